//! Binary checkpoint: magic, version byte, model configuration as text,
//! training metadata, then named little-endian `f32` tensors.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cascade_core::cascade::CascadeModel;
use cascade_core::params::ParamStore;
use cascade_core::tensor::Tensor;
use cascade_core::{Error, Result};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"CTCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CascadeModel,
    pub seed: u64,
    /// Optimizer steps taken when this checkpoint was written.
    pub updates: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        String::from_utf8(buf).map_err(|_| bad("non-UTF-8 string"))
    }
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

impl Checkpoint {
    pub fn new(model: CascadeModel, seed: u64, updates: u64) -> Self {
        Checkpoint { model, seed, updates }
    }

    fn config_text(model: &CascadeModel) -> Result<String> {
        let mut cfg = RunConfig::default();
        let enc = model.encoder_config();
        let cas = model.config();
        let pairs = [
            ("encoder.n_layers", enc.n_layers.to_string()),
            ("encoder.d_model", enc.d_model.to_string()),
            ("encoder.n_heads", enc.n_heads.to_string()),
            ("encoder.d_ff", enc.d_ff.to_string()),
            ("encoder.max_seq_len", enc.max_seq_len.to_string()),
            ("encoder.vocab_size", enc.vocab_size.to_string()),
            ("encoder.dropout_rate", enc.dropout_rate.to_string()),
            ("encoder.layer_norm_eps", enc.layer_norm_eps.to_string()),
            (
                "cascade.layer_schedule",
                cas.layer_schedule.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            ),
            ("cascade.head_hidden", cas.head_hidden.to_string()),
            ("cascade.head_depth", cas.head_depth.to_string()),
            ("cascade.final_pooling", cas.final_pooling.name().to_string()),
        ];
        for (k, v) in pairs {
            cfg.set(k, &v)?;
        }
        Ok(cfg.section_text("encoder") + &cfg.section_text("cascade"))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        put_str(&mut w, &Self::config_text(&self.model)?)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.updates.to_le_bytes())?;
        let store = self.model.store();
        w.write_all(&(store.len() as u32).to_le_bytes())?;
        for (_, p) in store.iter() {
            put_str(&mut w, &p.name)?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader(r);
        if &r.bytes::<4>()? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let [version] = r.bytes::<1>()?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let mut cfg = RunConfig::default();
        cfg.merge_text(&r.string()?)?;
        let seed = r.u64()?;
        let updates = r.u64()?;
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| r.bytes::<4>().map(f32::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        let model = CascadeModel::from_store(cfg.encoder()?, cfg.cascade()?, store)?;
        Ok(Checkpoint { model, seed, updates })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write(BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read(BufReader::new(file))
    }
}
