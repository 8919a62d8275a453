//! Single-file container for parameters, optimizer moments and run metadata.
//!
//! Layout (little-endian):
//! `"PALG"`, `u32` format, `u64` step, `u64` metadata length, UTF-8 JSON
//! metadata, `u32` block count, then per block: `u16` name length, name,
//! `u8` dtype (0 = f64), `u8` rank, `u64` per dimension, raw values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParameterSet};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"PALG";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Serialized position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string (JSON numbers are too narrow).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    pub rng: RngState,
    pub adam_generator: AdamState,
    pub adam_discriminator: AdamState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
    pub opt_generator: Adam,
    pub opt_discriminator: Adam,
}

fn adam_state(a: &Adam) -> AdamState {
    AdamState {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        step: a.step,
    }
}

fn adam_from(s: &AdamState) -> Adam {
    let mut a = Adam::new(s.lr, s.beta1, s.beta2);
    a.eps = s.eps;
    a.step = s.step;
    a
}

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const ADAM_G: &str = "adam_g/";
const ADAM_D: &str = "adam_d/";

impl Checkpoint {
    pub fn new(step: u64, mut meta: CheckpointMeta, params: ParameterSet, opt_g: Adam, opt_d: Adam) -> Self {
        meta.adam_generator = adam_state(&opt_g);
        meta.adam_discriminator = adam_state(&opt_d);
        Self {
            step,
            meta,
            params,
            opt_generator: opt_g,
            opt_discriminator: opt_d,
        }
    }

    fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.extend(self.params.params().map(|(k, t)| (format!("{PARAM}{k}"), t)));
        out.extend(self.params.buffers().map(|(k, t)| (format!("{BUFFER}{k}"), t)));
        for (prefix, opt) in [(ADAM_G, &self.opt_generator), (ADAM_D, &self.opt_discriminator)] {
            for (k, m, v) in opt.moments() {
                out.push((format!("{prefix}m/{k}"), m));
                out.push((format!("{prefix}v/{k}"), v));
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut meta = self.meta.clone();
        meta.adam_generator = adam_state(&self.opt_generator);
        meta.adam_discriminator = adam_state(&self.opt_discriminator);
        let json = serde_json::to_vec(&meta).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let blocks = self.blocks();
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, t) in blocks {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[DTYPE_F64, t.ndim() as u8])?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let step = r.u64()?;
        let json_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Format(format!("bad metadata: {e}")))?;
        let mut params = ParameterSet::new();
        let mut opt_g = adam_from(&meta.adam_generator);
        let mut opt_d = adam_from(&meta.adam_discriminator);
        let mut pending_m: Vec<(bool, String, Tensor)> = Vec::new();
        let mut pending_v: Vec<(bool, String, Tensor)> = Vec::new();
        let count = r.u32()?;
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?
                .to_string();
            let head = r.take(2)?;
            if head[0] != DTYPE_F64 {
                return Err(Error::Format(format!("block {name}: unknown dtype {}", head[0])));
            }
            let shape: Vec<usize> = (0..head[1]).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("block too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data);
            if let Some(k) = name.strip_prefix(PARAM) {
                params.insert(k, t);
            } else if let Some(k) = name.strip_prefix(BUFFER) {
                params.insert_buffer(k, t);
            } else if let Some((gen, rest)) = name
                .strip_prefix(ADAM_G)
                .map(|r| (true, r))
                .or_else(|| name.strip_prefix(ADAM_D).map(|r| (false, r)))
            {
                if let Some(k) = rest.strip_prefix("m/") {
                    pending_m.push((gen, k.to_string(), t));
                } else if let Some(k) = rest.strip_prefix("v/") {
                    pending_v.push((gen, k.to_string(), t));
                } else {
                    return Err(Error::Format(format!("unknown optimizer block {name}")));
                }
            } else {
                return Err(Error::Format(format!("unknown block {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last block".into()));
        }
        if pending_m.len() != pending_v.len() {
            return Err(Error::Format("optimizer moments are unpaired".into()));
        }
        for ((gen, k, m), (gen_v, k_v, v)) in pending_m.into_iter().zip(pending_v) {
            if gen != gen_v || k != k_v {
                return Err(Error::Format(format!("optimizer moments for {k} are unpaired")));
            }
            if gen {
                opt_g.set_moments(k, m, v);
            } else {
                opt_d.set_moments(k, m, v);
            }
        }
        Ok(Self {
            step,
            meta,
            params,
            opt_generator: opt_g,
            opt_discriminator: opt_d,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn sample() -> Checkpoint {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = model.init(&mut rng);
        let mut opt_g = Adam::new(1e-4, 0.0, 0.9);
        let mut grads = BTreeMap::new();
        grads.insert("gen.out.bias".to_string(), Tensor::new(&[2], vec![0.5, -0.25]));
        let mut p2 = params.clone();
        opt_g.update(&mut p2, &grads);
        let meta = CheckpointMeta {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            total_steps: 10,
            steps_per_epoch: 2,
            rng: RngState {
                seed: [7; 32],
                stream: 3,
                word_pos: "12345678901234567890123".into(),
            },
            adam_generator: adam_state(&opt_g),
            adam_discriminator: adam_state(&Adam::new(4e-4, 0.0, 0.9)),
        };
        Checkpoint::new(4, meta, p2, opt_g, Adam::new(4e-4, 0.0, 0.9))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.step, 4);
        assert_eq!(back.params, ck.params);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.opt_generator, ck.opt_generator);
        assert_eq!(back.opt_discriminator, ck.opt_discriminator);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.palg");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().params, ck.params);
    }

    #[test]
    fn header_errors() {
        let mut bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut future = bytes.clone();
        future[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&future), Err(Error::Format(m)) if m.contains("format")));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("truncated")));
    }
}
