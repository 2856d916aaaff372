//! Stacked post-norm transformer encoder: an embedding layer followed by
//! `n_layers` blocks, each producing a partial encoding `H_i`.

use rand::{Rng, RngCore};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
/// Ids below this value are reserved for special tokens.
pub const FIRST_REGULAR_ID: u32 = 3;

const EMBEDDING_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 12,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            vocab_size: 1024,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= FIRST_REGULAR_ID as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for regular tokens",
                self.vocab_size
            )));
        }
        crate::autograd::check_dropout_rate(self.dropout_rate)?;
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `[CLS] question [SEP] candidate`, as token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Build the classification input for a question/candidate pair.
    pub fn pair(question: &[u32], candidate: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(question.len() + candidate.len() + 2);
        ids.push(CLS_ID);
        ids.extend_from_slice(question);
        ids.push(SEP_ID);
        ids.extend_from_slice(candidate);
        TokenSequence { ids }
    }

    /// Wrap raw ids. Position 0 must hold the classification token.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&CLS_ID) {
            return Err(Error::Data("token sequence must start with the classification token".into()));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<u32>,
    mask: Vec<bool>,
    batch: usize,
    seq_len: usize,
}

impl TokenBatch {
    /// Pad `sequences` to the longest one, validating ids and lengths.
    pub fn new(sequences: &[TokenSequence], config: &EncoderConfig) -> Result<Self> {
        let seq_len = sequences.iter().map(TokenSequence::len).max().unwrap_or(0);
        if sequences.is_empty() || seq_len == 0 {
            return Err(Error::Data("cannot build an empty batch".into()));
        }
        Self::with_len(sequences, seq_len, config)
    }

    /// Pad every sequence to exactly `seq_len` positions.
    pub fn with_len(sequences: &[TokenSequence], seq_len: usize, config: &EncoderConfig) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("cannot build an empty batch".into()));
        }
        if seq_len > config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
        let mut ids = Vec::with_capacity(sequences.len() * seq_len);
        let mut mask = Vec::with_capacity(sequences.len() * seq_len);
        for s in sequences {
            if s.is_empty() || s.len() > seq_len {
                return Err(Error::Data(format!("sequence of length {} does not fit {seq_len}", s.len())));
            }
            if let Some(bad) = s.ids().iter().find(|&&id| id as usize >= config.vocab_size) {
                return Err(Error::Data(format!(
                    "token id {bad} out of range for vocab_size {}",
                    config.vocab_size
                )));
            }
            ids.extend_from_slice(s.ids());
            ids.extend(std::iter::repeat_n(PAD_ID, seq_len - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Ok(TokenBatch {
            ids,
            mask,
            batch: sequences.len(),
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// `true` at real tokens, `false` at padding; `[batch, seq_len]`.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Keep only the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> TokenBatch {
        let m = self.seq_len;
        let mut ids = Vec::with_capacity(rows.len() * m);
        let mut mask = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            ids.extend_from_slice(&self.ids[r * m..(r + 1) * m]);
            mask.extend_from_slice(&self.mask[r * m..(r + 1) * m]);
        }
        TokenBatch {
            ids,
            mask,
            batch: rows.len(),
            seq_len: m,
        }
    }
}

/// Whether a forward pass applies dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub(crate) fn dropout<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => g.dropout(x, rate, true, &mut **rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub query: (ParamId, ParamId),
    pub key: (ParamId, ParamId),
    pub value: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
    pub attn_norm: (ParamId, ParamId),
    pub ff_in: (ParamId, ParamId),
    pub ff_out: (ParamId, ParamId),
    pub ff_norm: (ParamId, ParamId),
}

/// Parameter layout of the encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<BlockParams>,
}

fn dense<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let std = 1.0 / (fan_in as f64).sqrt();
    let w = store.insert(format!("{name}.weight"), normal_tensor(&[fan_in, fan_out], std, rng))?;
    let b = store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
    Ok((w, b))
}

fn norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
    let g = store.insert(format!("{name}.gain"), Tensor::full(&[d], T::one()))?;
    let b = store.insert(format!("{name}.bias"), Tensor::zeros(&[d]))?;
    Ok((g, b))
}

impl Encoder {
    /// Register freshly initialised encoder parameters in `store`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tokens = store.insert("embeddings.tokens", normal_tensor(&[config.vocab_size, d], EMBEDDING_STD, rng))?;
        let positions = store.insert(
            "embeddings.positions",
            normal_tensor(&[config.max_seq_len, d], EMBEDDING_STD, rng),
        )?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 1..=config.n_layers {
            let p = format!("layers.{layer}");
            blocks.push(BlockParams {
                query: dense(store, &format!("{p}.attn.query"), d, d, rng)?,
                key: dense(store, &format!("{p}.attn.key"), d, d, rng)?,
                value: dense(store, &format!("{p}.attn.value"), d, d, rng)?,
                output: dense(store, &format!("{p}.attn.output"), d, d, rng)?,
                attn_norm: norm(store, &format!("{p}.attn.norm"), d)?,
                ff_in: dense(store, &format!("{p}.ff.in"), d, config.d_ff, rng)?,
                ff_out: dense(store, &format!("{p}.ff.out"), config.d_ff, d, rng)?,
                ff_norm: norm(store, &format!("{p}.ff.norm"), d)?,
            });
        }
        Ok(Encoder {
            config,
            tokens,
            positions,
            blocks,
        })
    }

    /// Rebuild the layout from parameter names already present in `store`.
    pub fn from_store<T: Scalar>(config: EncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let id = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let pair = |name: String, a: &str, b: &str| -> Result<(ParamId, ParamId)> {
            Ok((id(format!("{name}.{a}"))?, id(format!("{name}.{b}"))?))
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 1..=config.n_layers {
            let p = format!("layers.{layer}");
            blocks.push(BlockParams {
                query: pair(format!("{p}.attn.query"), "weight", "bias")?,
                key: pair(format!("{p}.attn.key"), "weight", "bias")?,
                value: pair(format!("{p}.attn.value"), "weight", "bias")?,
                output: pair(format!("{p}.attn.output"), "weight", "bias")?,
                attn_norm: pair(format!("{p}.attn.norm"), "gain", "bias")?,
                ff_in: pair(format!("{p}.ff.in"), "weight", "bias")?,
                ff_out: pair(format!("{p}.ff.out"), "weight", "bias")?,
                ff_norm: pair(format!("{p}.ff.norm"), "gain", "bias")?,
            });
        }
        let encoder = Encoder {
            tokens: id("embeddings.tokens".into())?,
            positions: id("embeddings.positions".into())?,
            blocks,
            config,
        };
        let expect = |pid: ParamId, shape: &[usize]| {
            let actual = store.value(pid).shape();
            if actual != shape {
                return Err(Error::dim("encoder parameter", actual, shape));
            }
            Ok(())
        };
        let c = &encoder.config;
        expect(encoder.tokens, &[c.vocab_size, c.d_model])?;
        expect(encoder.positions, &[c.max_seq_len, c.d_model])?;
        for b in &encoder.blocks {
            expect(b.query.0, &[c.d_model, c.d_model])?;
            expect(b.ff_in.0, &[c.d_model, c.d_ff])?;
            expect(b.ff_out.0, &[c.d_ff, c.d_model])?;
        }
        Ok(encoder)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// `H_0`: token plus positional embeddings, then dropout.
    pub fn embed_graph<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &TokenBatch, mode: &mut Mode<'_>) -> Result<Var> {
        let (b, m) = (batch.batch_size(), batch.seq_len());
        if m > self.config.max_seq_len {
            return Err(Error::Data(format!("sequence length {m} exceeds max_seq_len")));
        }
        if let Some(bad) = batch.ids().iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        let rows: Vec<usize> = batch.ids().iter().map(|&id| id as usize).collect();
        let table = g.param(self.tokens)?;
        let tok = g.gather_rows(table, &rows, &[b, m])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
        let pos_table = g.param(self.positions)?;
        let pos = g.gather_rows(pos_table, &positions, &[b, m])?;
        let h = g.add(tok, pos)?;
        mode.dropout(g, h, self.config.dropout_rate)
    }

    /// One post-norm block: `H' = LN(H + MHA(H))`, `H_out = LN(H' + FFN(H'))`.
    ///
    /// `layer` is 1-based. When `probe` is given it receives the attention
    /// probability node `[b, heads, m, m]`.
    pub fn block_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        layer: usize,
        h: Var,
        mask: &[bool],
        mode: &mut Mode<'_>,
        probe: Option<&mut Option<Var>>,
    ) -> Result<Var> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::Config(format!(
                "layer {layer} outside 1..={}",
                self.config.n_layers
            )));
        }
        let p = &self.blocks[layer - 1];
        let c = &self.config;
        let shape = g.value(h).shape().to_vec();
        if shape.len() != 3 || shape[2] != c.d_model || mask.len() != shape[0] * shape[1] {
            return Err(Error::dim("transformer_block", &shape, &[mask.len(), c.d_model]));
        }
        let batch = shape[0];
        let rate = c.dropout_rate;

        let linear = |g: &mut Graph<'_, T>, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let (w, b) = (g.param(w)?, g.param(b)?);
            g.linear(x, w, b)
        };

        let q = linear(g, h, p.query)?;
        let k = linear(g, h, p.key)?;
        let v = linear(g, h, p.value)?;
        let q = g.split_heads(q, c.n_heads)?;
        let k = g.split_heads(k, c.n_heads)?;
        let v = g.split_heads(v, c.n_heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (c.head_dim() as f64).sqrt());
        let probs = g.masked_softmax(scores, mask, batch)?;
        if let Some(slot) = probe {
            *slot = Some(probs);
        }
        let probs = mode.dropout(g, probs, rate)?;
        let ctx = g.batch_matmul(probs, v, false)?;
        let ctx = g.merge_heads(ctx)?;
        let attn = linear(g, ctx, p.output)?;
        let attn = mode.dropout(g, attn, rate)?;
        let res = g.add(h, attn)?;
        let (ng, nb) = (g.param(p.attn_norm.0)?, g.param(p.attn_norm.1)?);
        let h1 = g.layer_norm(res, ng, nb, c.layer_norm_eps)?;

        let ff = linear(g, h1, p.ff_in)?;
        let ff = g.gelu(ff);
        let ff = linear(g, ff, p.ff_out)?;
        let ff = mode.dropout(g, ff, rate)?;
        let res = g.add(h1, ff)?;
        let (ng, nb) = (g.param(p.ff_norm.0)?, g.param(p.ff_norm.1)?);
        g.layer_norm(res, ng, nb, c.layer_norm_eps)
    }

    /// Hidden-state nodes `H_0 ..= H_up_to` on a graph.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &TokenBatch,
        up_to: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Var>> {
        if up_to > self.config.n_layers {
            return Err(Error::Config(format!(
                "layer {up_to} beyond n_layers {}",
                self.config.n_layers
            )));
        }
        let mut hidden = Vec::with_capacity(up_to + 1);
        hidden.push(self.embed_graph(g, batch, mode)?);
        for layer in 1..=up_to {
            let prev = *hidden.last().expect("non-empty");
            hidden.push(self.block_graph(g, layer, prev, batch.mask(), mode, None)?);
        }
        Ok(hidden)
    }

    /// Eval-mode `H_0` for a batch.
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, batch: TokenBatch) -> Result<EncoderState<T>> {
        let h0 = {
            let mut g = Graph::with_params(store).no_grad();
            let h = self.embed_graph(&mut g, &batch, &mut Mode::Eval)?;
            g.into_value(h)
        };
        let mut hidden = vec![None; self.config.n_layers + 1];
        hidden[0] = Some(h0);
        Ok(EncoderState {
            batch,
            hidden,
            layer_batch_sizes: vec![0; self.config.n_layers],
        })
    }

    /// Run blocks `from+1 ..= to` in eval mode, storing each new `H_i`.
    pub fn encode_to_layer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        state: &mut EncoderState<T>,
        from: usize,
        to: usize,
    ) -> Result<()> {
        if to > self.config.n_layers {
            return Err(Error::Config(format!(
                "layer {to} beyond n_layers {}",
                self.config.n_layers
            )));
        }
        if to < from {
            return Err(Error::Config(format!("cannot encode backwards from {from} to {to}")));
        }
        if to == from {
            return Ok(());
        }
        let start = state
            .hidden(from)
            .ok_or_else(|| Error::Usage(format!("H_{from} has not been computed")))?;
        let computed: Vec<Tensor<T>> = {
            let mut g = Graph::with_params(store).no_grad();
            let mut h = g.leaf_ref(start, false);
            let mut vars = Vec::with_capacity(to - from);
            for layer in from + 1..=to {
                h = self.block_graph(&mut g, layer, h, state.batch.mask(), &mut Mode::Eval, None)?;
                vars.push(h);
            }
            vars.iter().map(|&v| g.value(v).clone()).collect()
        };
        let b = state.batch.batch_size();
        for (offset, t) in computed.into_iter().enumerate() {
            let layer = from + 1 + offset;
            state.hidden[layer] = Some(t);
            state.layer_batch_sizes[layer - 1] += b;
        }
        Ok(())
    }

    /// Attention probabilities `[b, heads, m, m]` of block `layer` applied to `h_in`.
    pub fn attention_weights<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h_in: &Tensor<T>,
        mask: &[bool],
        layer: usize,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(store).no_grad();
        let h = g.leaf_ref(h_in, false);
        let mut probe = None;
        self.block_graph(&mut g, layer, h, mask, &mut Mode::Eval, Some(&mut probe))?;
        let probs = probe.expect("probe is always filled");
        Ok(g.value(probs).clone())
    }
}

/// Partial encodings of one batch, computed incrementally in eval mode.
#[derive(Clone, Debug)]
pub struct EncoderState<T: Scalar = f32> {
    batch: TokenBatch,
    hidden: Vec<Option<Tensor<T>>>,
    layer_batch_sizes: Vec<usize>,
}

impl<T: Scalar> EncoderState<T> {
    pub fn batch(&self) -> &TokenBatch {
        &self.batch
    }

    /// `H_layer`, `[b, m, d]`, if computed.
    pub fn hidden(&self, layer: usize) -> Option<&Tensor<T>> {
        self.hidden.get(layer).and_then(|h| h.as_ref())
    }

    /// Deepest computed layer.
    pub fn depth(&self) -> usize {
        self.hidden.iter().rposition(Option::is_some).unwrap_or(0)
    }

    /// Examples processed at each encoder layer (index 0 is layer 1), summed
    /// over every `encode_to_layer` call on this state.
    pub fn layer_batch_sizes(&self) -> &[usize] {
        &self.layer_batch_sizes
    }

    /// Total example-layer passes executed.
    pub fn layer_passes(&self) -> usize {
        self.layer_batch_sizes.iter().sum()
    }

    /// Keep only the given examples (row positions of the current batch).
    pub fn retain(&mut self, rows: &[usize]) -> Result<()> {
        let (b, m) = (self.batch.batch_size(), self.batch.seq_len());
        if let Some(bad) = rows.iter().find(|&&r| r >= b) {
            return Err(Error::Usage(format!("row {bad} out of range for batch of {b}")));
        }
        if rows.is_empty() {
            return Err(Error::Usage("cannot retain zero examples".into()));
        }
        let token_rows: Vec<usize> = rows.iter().flat_map(|&r| r * m..(r + 1) * m).collect();
        for h in self.hidden.iter_mut().flatten() {
            *h = h.select_rows(&token_rows, &[rows.len(), m])?;
        }
        self.batch = self.batch.select(rows);
        Ok(())
    }
}
