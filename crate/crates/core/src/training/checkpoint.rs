//! Checkpoint container.
//!
//! Layout: 8-byte magic `AVLOCKPT`, u64 little-endian header length, a UTF-8
//! JSON header, then the tensors listed in the header as contiguous
//! little-endian f64 values in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::objective::Trainable;
use super::TrainConfig;
use crate::audio_embedder::{ProjectionParams, PROJECTION_TENSORS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AVLOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub params: Trainable,
    pub adam: AdamState,
    pub backend_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: String,
    epoch: usize,
    step: usize,
    adam_t: u64,
    backend_digest: String,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn masker_scalars(&self) -> (f64, f64) {
        (self.params.w, self.params.b)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        let mut tensors: Vec<TensorEntry> = self
            .params
            .projection
            .tensors()
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: (*name).into(),
                shape: shape.clone(),
            })
            .collect();
        for (name, shape) in [
            ("masker", vec![2]),
            ("adam_m", vec![n]),
            ("adam_v", vec![n]),
        ] {
            tensors.push(TensorEntry {
                name: name.into(),
                shape,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            dtype: "f64".into(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            backend_digest: self.backend_digest.clone(),
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * 3 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let body = self
            .params
            .to_flat()
            .into_iter()
            .chain(self.adam.m.iter().copied())
            .chain(self.adam.v.iter().copied());
        for v in body {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                header.version
            )));
        }
        if header.dtype != "f64" {
            return Err(bad(format!("unsupported dtype {}", header.dtype)));
        }
        let body = &bytes[16 + hlen..];
        if !body.len().is_multiple_of(8) {
            return Err(bad("body is not a whole number of values".into()));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let shape = |name: &str| -> Result<&Vec<usize>> {
            header
                .tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.shape)
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let w1 = shape(PROJECTION_TENSORS[0])?;
        let w2 = shape(PROJECTION_TENSORS[2])?;
        if w1.len() != 2 || w2.len() != 2 {
            return Err(bad("projection weights must be matrices".into()));
        }
        let mut projection = ProjectionParams::zeros(w1[1], w1[0], w2[0]);
        for (entry, (name, expected, _)) in header.tensors.iter().zip(projection.tensors()) {
            if entry.name != name || entry.shape != expected {
                return Err(bad(format!(
                    "unexpected tensor {} {:?}",
                    entry.name, entry.shape
                )));
            }
        }
        let n = projection.num_params() + 2;
        if values.len() != 3 * n {
            return Err(bad(format!(
                "expected {} values, found {}",
                3 * n,
                values.len()
            )));
        }
        projection.set_flat(&values[..n - 2]);
        let params = Trainable {
            projection,
            w: values[n - 2],
            b: values[n - 1],
        };
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            params,
            adam: AdamState {
                t: header.adam_t,
                m: values[n..2 * n].to_vec(),
                v: values[2 * n..].to_vec(),
            },
            backend_digest: header.backend_digest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let projection = ProjectionParams::init(4, 5, 3, 7);
        let n = projection.num_params() + 2;
        Checkpoint {
            config: TrainConfig::default(),
            epoch: 3,
            step: 12,
            params: Trainable {
                projection,
                w: 0.9871,
                b: -0.01234,
            },
            adam: AdamState {
                t: 12,
                m: (0..n).map(|k| k as f64 * 1e-3).collect(),
                v: (0..n).map(|k| (k as f64).sqrt() * 1e-7).collect(),
            },
            backend_digest: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT00000000").is_err());
    }
}
