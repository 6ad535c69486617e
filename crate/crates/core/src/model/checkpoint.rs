//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "JDCK" | version u32 | meta_len u32 | meta (TOML) | tensor_count u32 | tensors
//! tensor = name_len u16 | name | rank u8 | dims u32 × rank | f32 × prod(dims)
//! ```
//!
//! Optimiser moments are stored as extra tensors named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Joadaa, ModelConfig};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::memory::MemoryConfig;

pub const MAGIC: &[u8; 4] = b"JDCK";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    memory: MemoryConfig,
    state: TrainState,
}

/// First and second Adam moments, one tensor per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub state: TrainState,
    pub params: Vec<(String, Array2<f64>)>,
    pub moments: Option<AdamMoments>,
}

impl Checkpoint {
    pub fn capture(
        model: &Joadaa,
        memory: MemoryConfig,
        state: TrainState,
        moments: Option<AdamMoments>,
    ) -> Self {
        let store = model.params();
        let params = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).clone()))
            .collect();
        Self {
            model: model.config().clone(),
            memory,
            state,
            params,
            moments,
        }
    }

    pub fn restore(&self) -> Result<Joadaa> {
        Joadaa::from_params(self.model.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&Meta {
            model: self.model.clone(),
            memory: self.memory,
            state: self.state,
        })
        .map_err(|e| Error::format("checkpoint meta", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());

        let mut tensors: Vec<(String, &Array2<f64>)> =
            self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(mom) = &self.moments {
            if mom.m.len() != self.params.len() || mom.v.len() != self.params.len() {
                return Err(Error::shape(
                    "checkpoint moments",
                    self.params.len(),
                    mom.m.len().min(mom.v.len()),
                ));
            }
            for ((name, _), m) in self.params.iter().zip(&mom.m) {
                tensors.push((format!("{ADAM_M}{name}"), m));
            }
            for ((name, _), v) in self.params.iter().zip(&mom.v) {
                tensors.push((format!("{ADAM_V}{name}"), v));
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| {
                Error::format("checkpoint", format!("tensor name too long: {name}"))
            })?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|e| Error::format("checkpoint meta", e.to_string()))?;
        let meta: Meta =
            toml::from_str(meta).map_err(|e| Error::format("checkpoint meta", e.to_string()))?;

        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::format("checkpoint tensor name", e.to_string()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims.as_slice() {
                [r] => (1, *r),
                [r, c] => (*r, *c),
                _ => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("tensor `{name}` has rank {rank}"),
                    ))
                }
            };
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            if let Some(p) = name.strip_prefix(ADAM_M) {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                v.push((p.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let moments = if m.is_empty() && v.is_empty() {
            None
        } else {
            let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
            let order = |xs: &[(String, Array2<f64>)]| {
                xs.iter().map(|(n, _)| n.as_str()).eq(names.iter().copied())
            };
            if !order(&m) || !order(&v) {
                return Err(Error::format(
                    "checkpoint",
                    "optimiser moments do not match parameters",
                ));
            }
            Some(AdamMoments {
                m: m.into_iter().map(|(_, t)| t).collect(),
                v: v.into_iter().map(|(_, t)| t).collect(),
            })
        };
        Ok(Self {
            model: meta.model,
            memory: meta.memory,
            state: meta.state,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl AdamMoments {
    pub fn zeros(store: &ParamStore) -> Self {
        let z: Vec<_> = store
            .ids()
            .map(|id| Array2::zeros(store.get(id).dim()))
            .collect();
        Self { m: z.clone(), v: z }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
