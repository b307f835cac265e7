//! Versioned binary checkpoints.
//!
//! All integers and floats are little-endian; strings are a length prefix
//! followed by UTF-8 bytes.
//!
//! ```text
//! magic        8 bytes "MCICKPT\0"
//! version      u32
//! config       u32 length, JSON text
//! epoch        u32
//! fold         u32
//! best         f64       best validation accuracy so far (NaN if none)
//! rng seed     32 bytes
//! rng stream   u64
//! rng word pos u128
//! adam step    u64
//! count        u32
//! count × {
//!   name       u16 length, text
//!   flags      u8        bit 0 trainable, bit 1 moments follow
//!   ndim       u8
//!   dims       ndim × u32
//!   values     n × f64
//!   [m, v      n × f64 each, when bit 1 is set]
//! }
//! normalizer   u8 present flag, then u32 width, width × f64 mean, width × f64 std
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, Moments};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MCICKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
    pub moments: Option<Moments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON of the model and training configuration.
    pub config: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub fold: usize,
    pub best_val_accuracy: f64,
    pub rng: RngState,
    pub adam_step: u64,
    pub tensors: Vec<NamedTensor>,
    pub normalizer: Option<Normalizer>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        config: String,
        epoch: usize,
        fold: usize,
        best_val_accuracy: f64,
        rng: &ChaCha8Rng,
        store: &ParamStore,
        adam: &Adam,
        normalizer: Option<&Normalizer>,
    ) -> Self {
        let tensors = store
            .iter()
            .map(|(id, p)| NamedTensor {
                name: p.name.clone(),
                trainable: p.trainable,
                value: p.value.clone(),
                moments: adam.moments.get(id.index()).cloned().flatten(),
            })
            .collect();
        Self {
            config,
            epoch,
            fold,
            best_val_accuracy,
            rng: RngState::capture(rng),
            adam_step: adam.step,
            tensors,
            normalizer: normalizer.cloned(),
        }
    }

    /// Writes parameter values and optimizer moments into a store and
    /// optimizer built from the same configuration. Names, order and shapes
    /// must match exactly.
    pub fn restore(&self, store: &mut ParamStore, adam: &mut Adam) -> Result<ChaCha8Rng> {
        if store.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in checkpoint, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, t) in ids.iter().zip(&self.tensors) {
            let p = store.get(*id);
            if p.name != t.name || p.value.shape() != t.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    t.name,
                    t.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        adam.moments = vec![None; store.len()];
        for (id, t) in ids.into_iter().zip(&self.tensors) {
            let p = store.get_mut(id);
            p.value = t.value.clone();
            p.trainable = t.trainable;
            adam.moments[id.index()] = t.moments.clone();
        }
        adam.step = self.adam_step;
        Ok(self.rng.restore())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.config.len() as u32);
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.epoch as u32);
        put_u32(&mut out, self.fold as u32);
        put_f64s(&mut out, &[self.best_val_accuracy]);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(u8::from(t.trainable) | (u8::from(t.moments.is_some()) << 1));
            out.push(t.value.ndim() as u8);
            for &d in t.value.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f64s(&mut out, t.value.data());
            if let Some(m) = &t.moments {
                put_f64s(&mut out, m.m.data());
                put_f64s(&mut out, m.v.data());
            }
        }
        match &self.normalizer {
            Some(n) => {
                out.push(1);
                put_u32(&mut out, n.mean.len() as u32);
                put_f64s(&mut out, &n.mean);
                put_f64s(&mut out, &n.std);
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_len = r.u32()? as usize;
        let config = r.string(config_len)?;
        let epoch = r.u32()? as usize;
        let fold = r.u32()? as usize;
        let best_val_accuracy = r.f64s(1)?[0];
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let adam_step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = r.string(name_len)?;
            let flags = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let value = Tensor::new(&shape, r.f64s(n)?)?;
            let moments = if flags & 2 != 0 {
                Some(Moments {
                    m: Tensor::new(&shape, r.f64s(n)?)?,
                    v: Tensor::new(&shape, r.f64s(n)?)?,
                })
            } else {
                None
            };
            tensors.push(NamedTensor {
                name,
                trainable: flags & 1 != 0,
                value,
                moments,
            });
        }
        let normalizer = match r.take(1)?[0] {
            0 => None,
            _ => {
                let width = r.u32()? as usize;
                Some(Normalizer {
                    mean: r.f64s(width)?,
                    std: r.f64s(width)?,
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            fold,
            best_val_accuracy,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            adam_step,
            tensors,
            normalizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::adam::AdamConfig;
    use rand::Rng;

    fn sample() -> (ParamStore, Adam, ChaCha8Rng) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.5, -2.0]), true);
        store.add("frozen", Tensor::new(&[2, 1], vec![0.25, 4.0]).unwrap(), false);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step = 7;
        adam.moments[0] = Some(Moments {
            m: Tensor::vector(vec![0.1, 0.2]),
            v: Tensor::vector(vec![0.3, 0.4]),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(3);
        let _: u64 = rng.random();
        (store, adam, rng)
    }

    #[test]
    fn bytes_round_trip() {
        let (store, adam, rng) = sample();
        let ckpt = Checkpoint::capture("{}".into(), 4, 2, 0.75, &rng, &store, &adam, Some(&Normalizer::default()));
        assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(), ckpt);
    }

    #[test]
    fn restore_resumes_rng_and_state() {
        let (store, adam, mut rng) = sample();
        let ckpt = Checkpoint::capture(String::new(), 1, 0, f64::NAN, &rng, &store, &adam, None);
        let mut fresh_store = store.clone();
        fresh_store.get_mut(crate::tensor::ParamId(0)).value = Tensor::zeros(&[2]);
        let mut fresh_adam = Adam::new(AdamConfig::default(), &store);
        let mut restored = ckpt.restore(&mut fresh_store, &mut fresh_adam).unwrap();
        assert_eq!(fresh_store, store);
        assert_eq!(fresh_adam, adam);
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn corrupt_input_rejected() {
        let (store, adam, rng) = sample();
        let bytes = Checkpoint::capture(String::new(), 1, 0, 0.0, &rng, &store, &adam, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn mismatched_model_rejected() {
        let (store, adam, rng) = sample();
        let ckpt = Checkpoint::capture(String::new(), 1, 0, 0.0, &rng, &store, &adam, None);
        let mut other = ParamStore::new();
        other.add("w", Tensor::vector(vec![0.0; 3]), true);
        other.add("frozen", Tensor::zeros(&[2, 1]), false);
        let mut other_adam = Adam::new(AdamConfig::default(), &other);
        assert!(ckpt.restore(&mut other, &mut other_adam).is_err());
    }
}
