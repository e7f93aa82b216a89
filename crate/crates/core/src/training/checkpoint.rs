//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "CPFLOWCK"
//! version      u32       currently 1
//! dim          u64       data dimension
//! step         u64       completed optimizer steps
//! adam_step    u64       completed Adam updates
//! flags        u8        bit 0: normalizations initialized
//! config_len   u64
//! config       config_len bytes of UTF-8 `key = value` text
//! n_arrays     u64
//! n_arrays times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   data       prod(dims) x f64
//! ```
//!
//! Arrays are the flow parameters in canonical order, then `adam.m.<name>`
//! and `adam.v.<name>` once the optimizer has state, then any `data.*`
//! arrays attached by the caller. Every random stream is a pure function of
//! the configured seed and the step counter, so no generator state is stored.

use std::path::Path;

use super::{Adam, Result, TrainConfig, TrainError, Trainer};
use crate::autodiff::ArrayValue;
use crate::flow::FlowStack;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CPFLOWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dim: usize,
    pub step: u64,
    pub adam_step: u64,
    pub initialized: bool,
    pub config: TrainConfig,
    pub arrays: Vec<(String, ArrayValue)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TrainError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| TrainError::Checkpoint(format!("length {v} overflows")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TrainError::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.push(u8::from(self.initialized));
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &s in a.shape() {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let dim = r.len()?;
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let initialized = r.u8()? & 1 == 1;
        let n = r.len()?;
        let config = TrainConfig::from_text(&r.string(n)?)?;
        let count = r.len()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let size = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .filter(|s| s.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| TrainError::Checkpoint(format!("array `{name}` has an impossible shape {shape:?}")))?;
            let raw = r.take(size * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let a = ArrayValue::new(shape, data).map_err(|e| TrainError::Checkpoint(format!("array `{name}`: {e}")))?;
            arrays.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} trailing bytes after the last array",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            dim,
            step,
            adam_step,
            initialized,
            config,
            arrays,
        })
    }

    /// Writes through a temporary file and a rename, so an interrupted
    /// save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| TrainError::Io(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn array(&self, name: &str) -> Option<&ArrayValue> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Arrays under the `data.` prefix, without it.
    pub fn data_arrays(&self) -> impl Iterator<Item = (&str, &ArrayValue)> {
        self.arrays
            .iter()
            .filter_map(|(n, a)| n.strip_prefix("data.").map(|s| (s, a)))
    }
}

impl Trainer {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self.stack.tensors();
        let mut arrays: Vec<(String, ArrayValue)> = tensors.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        if !self.adam.m.is_empty() {
            for (prefix, state) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
                for ((n, _), a) in tensors.iter().zip(state) {
                    arrays.push((format!("{prefix}{n}"), a.clone()));
                }
            }
        }
        Checkpoint {
            dim: self.stack.dim(),
            step: self.step,
            adam_step: self.adam.step,
            initialized: self.stack.is_initialized(),
            config: self.config.clone(),
            arrays,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config.clone(), ck.dim)?;
        let lookup = |name: &str, like: &ArrayValue| -> Result<ArrayValue> {
            let a = ck
                .array(name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing array `{name}`")))?;
            if a.shape() != like.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "array `{name}` has shape {:?}, expected {:?}",
                    a.shape(),
                    like.shape()
                )));
            }
            Ok(a.clone())
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        let has_adam = ck.arrays.iter().any(|(n, _)| n.starts_with("adam."));
        for (name, t) in t.stack.tensors_mut() {
            *t = lookup(&name, t)?;
            if has_adam {
                m.push(lookup(&format!("adam.m.{name}"), t)?);
                v.push(lookup(&format!("adam.v.{name}"), t)?);
            }
        }
        if ck.initialized {
            t.stack.mark_initialized();
        }
        let adam = Adam {
            step: ck.adam_step,
            m,
            v,
            ..Adam::new(ck.config.learning_rate)
        };
        let stack: FlowStack = t.stack;
        Ok(Trainer::from_parts(ck.config.clone(), stack, adam, ck.step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{Dataset, DatasetKind};

    fn trained(steps: u64) -> (Trainer, Dataset) {
        let data = Dataset::toy(DatasetKind::Rings, 300, 4).unwrap();
        let cfg = TrainConfig {
            n_flows: 2,
            n_hidden_layers: 2,
            n_hidden_units: 8,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg, 2).unwrap();
        for _ in 0..steps {
            t.step_once(&data.train).unwrap();
        }
        (t, data)
    }

    #[test]
    fn save_load_save_is_bitwise_identical() {
        for steps in [0, 3] {
            let (t, _) = trained(steps);
            let bytes = t.to_checkpoint().encode();
            let back = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
            assert_eq!(back.to_checkpoint().encode(), bytes);
        }
    }

    #[test]
    fn resume_takes_an_identical_next_step() {
        let (mut a, data) = trained(3);
        let mut b = Trainer::from_checkpoint(&Checkpoint::decode(&a.to_checkpoint().encode()).unwrap()).unwrap();
        let sa = a.step_once(&data.train).unwrap();
        let sb = b.step_once(&data.train).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.to_checkpoint().encode(), b.to_checkpoint().encode());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let (t, _) = trained(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut ck = t.to_checkpoint();
        ck.arrays.push(("data.mean".into(), ArrayValue::vector(vec![1.0, 2.0])));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.data_arrays().count(), 1);
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::decode(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn header_is_little_endian() {
        let (t, _) = trained(0);
        let bytes = t.to_checkpoint().encode();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[2, 0, 0, 0, 0, 0, 0, 0]);
    }
}
