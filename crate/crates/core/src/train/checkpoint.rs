//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"UAANCKPT"  u16 version
//! u32 config length, config JSON
//! [u8; 32] config fingerprint
//! u64 completed epochs, u64 optimizer step
//! u32 parameter count, then per parameter:
//!     u16 name length, name, u8 rank, u32 dims..., f64 value[..], f64 m[..], f64 v[..]
//! ```

use std::path::Path;

use super::{AdamState, RunConfig, TrainState};
use crate::error::UaanError;
use crate::model::UaanModel;
use crate::params::Parameters;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UAANCKPT";
const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.state.epoch == other.state.epoch
            && self.state.adam == other.state.adam
            && self.state.model.params() == other.state.model.params()
    }
}

fn err(m: impl Into<String>) -> UaanError {
    UaanError::Checkpoint(m.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], UaanError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            err(format!(
                "truncated {what} at byte offset {}: need {n} bytes, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], UaanError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8, UaanError> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, UaanError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32, UaanError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, UaanError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, UaanError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| err("tensor too large"))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, state: TrainState) -> Self {
        Self { config, state }
    }

    pub fn model(&self) -> &UaanModel {
        &self.state.model
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serialises");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.config.fingerprint());
        out.extend_from_slice(&(self.state.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.state.adam.step.to_le_bytes());
        let params = self.state.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (i, p) in params.iter().enumerate() {
            out.extend_from_slice(&(p.name().len() as u16).to_le_bytes());
            out.extend_from_slice(p.name().as_bytes());
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in [&p.value, &self.state.adam.m[i], &self.state.adam.v[i]] {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, UaanError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(err(format!("bad magic {magic:?}")));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(len, "config")?)?;
        let stored: [u8; 32] = r.array("fingerprint")?;
        if stored != config.fingerprint() {
            return Err(err("config fingerprint does not match the stored config"));
        }
        let epoch = r.u64("epoch")? as usize;
        let step = r.u64("optimizer step")?;

        let mut model = UaanModel::new(config.model_config(), config.seed)?;
        let count = r.u32("parameter count")? as usize;
        let expected = model.params().len();
        if count != expected {
            return Err(err(format!("{count} parameters stored, model has {expected}")));
        }
        let mut loaded = Vec::with_capacity(count);
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| err("parameter name is not UTF-8"))?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut tensor = || -> Result<Tensor, UaanError> {
                Ok(Tensor::new(shape.clone(), r.f64s(n, &name)?)?)
            };
            loaded.push((name.clone(), tensor()?));
            m.push(tensor()?);
            v.push(tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut mismatch = None;
        let mut i = 0;
        model.visit_mut(&mut |p| {
            let (name, value) = &loaded[i];
            if mismatch.is_none() && (name != p.name() || value.shape() != p.value.shape()) {
                mismatch = Some(format!(
                    "parameter {i}: stored {name} {:?}, model expects {} {:?}",
                    value.shape(),
                    p.name(),
                    p.value.shape()
                ));
            }
            p.value = value.clone();
            i += 1;
        });
        if let Some(m) = mismatch {
            return Err(err(m));
        }
        Ok(Self {
            config,
            state: TrainState {
                model,
                adam: AdamState { step, m, v },
                epoch,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), UaanError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, UaanError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
