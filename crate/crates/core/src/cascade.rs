//! One shared encoder with a classifier head after each scheduled layer.
//!
//! Stages are indexed from 0 in this API; stage `i` reads `H_{ρ(i)}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{Encoder, EncoderConfig, EncoderState, Mode, TokenBatch};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Mean over non-padding positions.
    Mean,
    /// Encoding of the classification token only.
    Cls,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Cls => "cls",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::Config(format!("unknown pooling {other:?}, expected mean or cls"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    /// ρ: encoder layer read by each stage, strictly increasing.
    pub layer_schedule: Vec<usize>,
    pub head_hidden: usize,
    /// Dense layers per head, the 2-logit projection included.
    pub head_depth: usize,
    /// Pooling used by the last stage; partial stages always use the mean.
    pub final_pooling: Pooling,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            layer_schedule: vec![4, 6, 8, 10, 12],
            head_hidden: 64,
            head_depth: 3,
            final_pooling: Pooling::Mean,
        }
    }
}

impl CascadeConfig {
    /// A single-stage configuration reading the top layer.
    pub fn monolithic(n_layers: usize, head_hidden: usize) -> Self {
        CascadeConfig {
            layer_schedule: vec![n_layers],
            head_hidden,
            ..CascadeConfig::default()
        }
    }

    /// `ρ(i) = start + step·(i−1)` for `i = 1..=n_stages`.
    pub fn arithmetic_schedule(start: usize, step: usize, n_stages: usize) -> Vec<usize> {
        (0..n_stages).map(|i| start + step * i).collect()
    }

    pub fn n_stages(&self) -> usize {
        self.layer_schedule.len()
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        let rho = &self.layer_schedule;
        if rho.is_empty() {
            return Err(Error::Config("layer schedule is empty".into()));
        }
        if rho[0] == 0 {
            return Err(Error::Config("layer schedule entries must be at least 1".into()));
        }
        if rho.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("layer schedule {rho:?} is not strictly increasing")));
        }
        if *rho.last().expect("non-empty") != encoder.n_layers {
            return Err(Error::Config(format!(
                "layer schedule {rho:?} must end at n_layers = {}",
                encoder.n_layers
            )));
        }
        if self.head_depth == 0 || self.head_hidden == 0 {
            return Err(Error::Config("head_depth and head_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Scalar parameters in one head reading `d_model` features.
    pub fn head_param_count(&self, d_model: usize) -> usize {
        let h = self.head_hidden;
        if self.head_depth == 1 {
            return d_model * 2 + 2;
        }
        (d_model * h + h) + (self.head_depth - 2) * (h * h + h) + (h * 2 + 2)
    }
}

/// Dense layers with tanh between them, ending in two logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl ClassifierHead {
    fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        stage: usize,
        d_model: usize,
        config: &CascadeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(config.head_depth);
        let mut fan_in = d_model;
        for j in 0..config.head_depth {
            let fan_out = if j + 1 == config.head_depth { 2 } else { config.head_hidden };
            let std = 1.0 / (fan_in as f64).sqrt();
            let w = store.insert(
                format!("heads.{stage}.dense.{j}.weight"),
                normal_tensor(&[fan_in, fan_out], std, rng),
            )?;
            let b = store.insert(format!("heads.{stage}.dense.{j}.bias"), Tensor::zeros(&[fan_out]))?;
            layers.push((w, b));
            fan_in = fan_out;
        }
        Ok(ClassifierHead { layers })
    }

    fn from_store<T: Scalar>(store: &ParamStore<T>, stage: usize, d_model: usize, config: &CascadeConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(config.head_depth);
        let mut fan_in = d_model;
        for j in 0..config.head_depth {
            let fan_out = if j + 1 == config.head_depth { 2 } else { config.head_hidden };
            let find = |suffix: &str| {
                let name = format!("heads.{stage}.dense.{j}.{suffix}");
                store
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
            };
            let (w, b) = (find("weight")?, find("bias")?);
            if store.value(w).shape() != [fan_in, fan_out] || store.value(b).shape() != [fan_out] {
                return Err(Error::dim("classifier head", store.value(w).shape(), &[fan_in, fan_out]));
            }
            layers.push((w, b));
            fan_in = fan_out;
        }
        Ok(ClassifierHead { layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Logits `[b, 2]` from pooled features `[b, d_model]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64, mode: &mut Mode<'_>) -> Result<Var> {
        let mut h = x;
        for (j, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(w)?, g.param(b)?);
            h = g.linear(h, w, b)?;
            if j + 1 < self.layers.len() {
                h = g.tanh(h);
                h = mode.dropout(g, h, dropout)?;
            }
        }
        Ok(h)
    }
}

/// Pool `H[b, m, d]` into `[b, d]`.
pub fn pooled_input<T: Scalar>(g: &mut Graph<'_, T>, h: Var, mask: &[bool], pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::Mean => g.masked_mean_pool(h, mask),
        Pooling::Cls => {
            let s = g.value(h).shape().to_vec();
            if s.len() != 3 || mask.len() != s[0] * s[1] {
                return Err(Error::dim("pooled_input", &s, &[mask.len()]));
            }
            let (b, m) = (s[0], s[1]);
            if (0..b).any(|i| !mask[i * m]) {
                return Err(Error::Data("sequence with padding at position 0".into()));
            }
            let rows: Vec<usize> = (0..b).map(|i| i * m).collect();
            g.gather_rows(h, &rows, &[b])
        }
    }
}

/// Positive-class probability of each `[l0, l1]` logit row.
pub fn positive_probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    logits
        .data()
        .chunks_exact(2)
        .map(|row| 1.0 / (1.0 + (row[0].as_f64() - row[1].as_f64()).exp()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct CascadeModel<T: Scalar = f32> {
    encoder: Encoder,
    config: CascadeConfig,
    heads: Vec<ClassifierHead>,
    store: ParamStore<T>,
}

impl<T: Scalar> CascadeModel<T> {
    /// Fresh weights drawn from a generator seeded with `seed`.
    pub fn new(encoder: EncoderConfig, config: CascadeConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(encoder, config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(encoder: EncoderConfig, config: CascadeConfig, rng: &mut R) -> Result<Self> {
        encoder.validate()?;
        config.validate(&encoder)?;
        let mut store = ParamStore::new();
        let d = encoder.d_model;
        let encoder = Encoder::init(encoder, &mut store, rng)?;
        let heads = (0..config.n_stages())
            .map(|s| ClassifierHead::init(&mut store, s, d, &config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CascadeModel {
            encoder,
            config,
            heads,
            store,
        })
    }

    /// Wrap existing parameters, resolving them by name.
    pub fn from_store(encoder: EncoderConfig, config: CascadeConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate(&encoder)?;
        let d = encoder.d_model;
        let encoder = Encoder::from_store(encoder, &store)?;
        let heads = (0..config.n_stages())
            .map(|s| ClassifierHead::from_store(&store, s, d, &config))
            .collect::<Result<Vec<_>>>()?;
        let expected = store.len();
        let used = 2 + 16 * encoder.n_layers() + heads.iter().map(|h| 2 * h.layers.len()).sum::<usize>();
        if used != expected {
            return Err(Error::Checkpoint(format!(
                "{expected} parameters stored but the configuration uses {used}"
            )));
        }
        Ok(CascadeModel {
            encoder,
            config,
            heads,
            store,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn heads(&self) -> &[ClassifierHead] {
        &self.heads
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn n_stages(&self) -> usize {
        self.config.n_stages()
    }

    pub fn n_layers(&self) -> usize {
        self.encoder.n_layers()
    }

    /// ρ(stage).
    pub fn stage_layer(&self, stage: usize) -> Result<usize> {
        self.config
            .layer_schedule
            .get(stage)
            .copied()
            .ok_or_else(|| Error::Config(format!("stage {stage} out of range for {} stages", self.n_stages())))
    }

    pub fn pooling(&self, stage: usize) -> Pooling {
        if stage + 1 == self.n_stages() {
            self.config.final_pooling
        } else {
            Pooling::Mean
        }
    }

    pub fn cast<U: Scalar>(&self) -> CascadeModel<U> {
        CascadeModel {
            encoder: self.encoder.clone(),
            config: self.config.clone(),
            heads: self.heads.clone(),
            store: self.store.cast(),
        }
    }

    /// Logits `[b, 2]` of one stage on a differentiable graph. The encoder
    /// runs only up to ρ(stage).
    pub fn stage_logits_graph(
        &self,
        g: &mut Graph<'_, T>,
        batch: &TokenBatch,
        stage: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let layer = self.stage_layer(stage)?;
        let hidden = self.encoder.forward_graph(g, batch, layer, mode)?;
        let pooled = pooled_input(g, hidden[layer], batch.mask(), self.pooling(stage))?;
        self.heads[stage].forward(g, pooled, self.encoder_config().dropout_rate, mode)
    }

    /// Eval-mode `H_0` for a batch.
    pub fn embed(&self, batch: TokenBatch) -> Result<EncoderState<T>> {
        self.encoder.embed(&self.store, batch)
    }

    pub fn encode_to_layer(&self, state: &mut EncoderState<T>, from: usize, to: usize) -> Result<()> {
        self.encoder.encode_to_layer(&self.store, state, from, to)
    }

    /// Eval-mode logits `[b, 2]` of one stage from an already encoded state.
    pub fn stage_logits(&self, state: &EncoderState<T>, stage: usize) -> Result<Tensor<T>> {
        let layer = self.stage_layer(stage)?;
        let h = state
            .hidden(layer)
            .ok_or_else(|| Error::Usage(format!("H_{layer} has not been computed")))?;
        let mut g = Graph::with_params(&self.store).no_grad();
        let h = g.leaf_ref(h, false);
        let pooled = pooled_input(&mut g, h, state.batch().mask(), self.pooling(stage))?;
        let logits = self.heads[stage].forward(&mut g, pooled, 0.0, &mut Mode::Eval)?;
        Ok(g.into_value(logits))
    }

    /// Positive-class probabilities of one stage, one per example in `state`.
    pub fn stage_scores(&self, state: &EncoderState<T>, stage: usize) -> Result<Vec<f64>> {
        let logits = self.stage_logits(state, stage)?;
        logits.check_finite("stage logits")?;
        Ok(positive_probabilities(&logits))
    }

    /// Every stage's scores from one unpruned pass to the top layer.
    pub fn forward_all_stages(&self, batch: &TokenBatch) -> Result<Vec<Vec<f64>>> {
        let mut state = self.embed(batch.clone())?;
        let mut depth = 0;
        let mut out = Vec::with_capacity(self.n_stages());
        for stage in 0..self.n_stages() {
            let layer = self.stage_layer(stage)?;
            self.encode_to_layer(&mut state, depth, layer)?;
            depth = layer;
            out.push(self.stage_scores(&state, stage)?);
        }
        Ok(out)
    }
}
