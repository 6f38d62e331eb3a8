//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GVRN" | u32 version
//! u32 n | n bytes   model configuration, `key = value` lines
//! u32 n | n bytes   run configuration echo (free text, may be empty)
//! u64 step
//! [u8; 32] seed | u64 stream | u128 word position      trainer rng
//! u32 tensors, each: u16 n | name | u8 rank | u32 dims.. | u64 offset | u64 len
//! u64 n | n f64     parameters
//! u8 flag | n f64   momentum buffer when flag = 1
//! ```

use std::path::Path;

use beliefnet_core::model::{ModelConfig, ModelParams, Variant};
use beliefnet_core::render::{GridSpec, Resolution};
use beliefnet_core::train::OptimizerState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"GVRN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("index extents cover {indexed} values but the buffer holds {stored}")]
    Extent { indexed: u64, stored: u64 },
    #[error("tensor `{0}` does not match the model layout")]
    Layout(String),
    #[error("bad model configuration: {0}")]
    Config(String),
    #[error("{0} trailing bytes after the checkpoint")]
    Trailing(usize),
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub velocity: Option<OptimizerState>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub run_config: String,
}

fn model_config_text(c: &ModelConfig) -> String {
    let fields: [(&str, String); 15] = [
        ("variant", c.variant.to_string()),
        ("agents", c.num_agents.to_string()),
        ("hidden", c.hidden.to_string()),
        ("latent", c.latent.to_string()),
        ("embed", c.embed.to_string()),
        ("message", c.message.to_string()),
        ("mlp_hidden", c.mlp_hidden.to_string()),
        ("decoder_hidden", c.decoder_hidden.to_string()),
        ("attention_hidden", c.attention_hidden.to_string()),
        ("observed", c.observed.to_string()),
        ("horizon", c.horizon.to_string()),
        ("grid_cols", c.grid.cols.to_string()),
        ("grid_rows", c.grid.rows.to_string()),
        ("width", c.resolution.width.to_string()),
        ("height", c.resolution.height.to_string()),
    ];
    fields.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn parse_model_config(text: &str) -> Result<ModelConfig, CheckpointError> {
    let mut c = ModelConfig::default();
    let bad = |m: String| CheckpointError::Config(m);
    for line in text.lines() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        let num = || v.parse::<usize>().map_err(|_| bad(format!("`{k}` is not a count")));
        match k {
            "variant" => c.variant = v.parse::<Variant>().map_err(|e| bad(e.to_string()))?,
            "agents" => c.num_agents = num()?,
            "hidden" => c.hidden = num()?,
            "latent" => c.latent = num()?,
            "embed" => c.embed = num()?,
            "message" => c.message = num()?,
            "mlp_hidden" => c.mlp_hidden = num()?,
            "decoder_hidden" => c.decoder_hidden = num()?,
            "attention_hidden" => c.attention_hidden = num()?,
            "observed" => c.observed = num()?,
            "horizon" => c.horizon = num()?,
            "grid_cols" => c.grid = GridSpec { cols: num()?, ..c.grid },
            "grid_rows" => c.grid = GridSpec { rows: num()?, ..c.grid },
            "width" => c.resolution = Resolution { width: num()?, ..c.resolution },
            "height" => c.resolution = Resolution { height: num()?, ..c.resolution },
            _ => return Err(bad(format!("unknown key `{k}`"))),
        }
    }
    c.validate().map_err(|e| bad(e.to_string()))?;
    Ok(c)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let set = &self.params.set;
        let mut out = Vec::with_capacity(32 + 16 * set.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, model_config_text(&self.params.config).as_bytes());
        put_bytes(&mut out, self.run_config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        out.extend_from_slice(&(set.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in set.iter() {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let len = t.values.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            offset += len;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        put_f64s(&mut out, set.iter().flat_map(|t| &t.values));
        match &self.velocity {
            Some(v) => {
                out.push(1);
                put_f64s(&mut out, v.velocity.iter().flatten());
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let model_text = r.string("model configuration")?;
        let run_config = r.string("run configuration")?;
        let config = parse_model_config(&model_text)?;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut params = ModelParams::new(config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let count = r.u32("tensor count")? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16("tensor name")? as usize;
            let name = String::from_utf8(r.take(n, "tensor name")?.to_vec()).map_err(|_| CheckpointError::Layout("<non-utf8>".into()))?;
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u32("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64("tensor offset")?;
            let len = r.u64("tensor length")?;
            index.push((name, shape, offset, len));
        }
        let stored = r.u64("buffer length")?;
        let indexed: u64 = index.iter().map(|e| e.3).sum();
        if indexed != stored {
            return Err(CheckpointError::Extent { indexed, stored });
        }
        if count != params.set.len() {
            return Err(CheckpointError::Layout(format!("{count} tensors, model has {}", params.set.len())));
        }
        let values = r.f64s(stored as usize, "parameters")?;
        for ((name, shape, offset, len), t) in index.iter().zip(params.set.iter_mut()) {
            let (o, l) = (*offset as usize, *len as usize);
            if *name != t.name || *shape != t.shape || l != t.values.len() || o + l > values.len() {
                return Err(CheckpointError::Layout(name.clone()));
            }
            t.values.copy_from_slice(&values[o..o + l]);
        }
        let velocity = match r.take(1, "momentum flag")?[0] {
            0 => None,
            _ => {
                let flat = r.f64s(stored as usize, "momentum")?;
                let mut rest = &flat[..];
                let mut velocity = Vec::with_capacity(count);
                for t in params.set.iter() {
                    let (head, tail) = rest.split_at(t.values.len());
                    velocity.push(head.to_vec());
                    rest = tail;
                }
                Some(OptimizerState { velocity })
            }
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Checkpoint { params, velocity, step, rng, run_config })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CheckpointError::Config(format!("{what} is not UTF-8")))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), crate::Error> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| crate::Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, crate::Error> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|source| crate::Error::Checkpoint { path: path.to_path_buf(), source })
}
