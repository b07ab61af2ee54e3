//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"MSELCKPT"
//! u32    format version
//! u32    header length, then a UTF-8 TOML header (configs, counters, rng)
//! u32    array count
//! per array: u32 name length, name, u64 element count, f32 values
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DualNet;
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::selector::SelectorConfig;
use crate::trainer::{TrainConfig, TrainState};
use crate::transformer::TransformerConfig;

pub const MAGIC: &[u8; 8] = b"MSELCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32-byte seed as hex.
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Format(format!("bad rng {what} in checkpoint header"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad("stream"))?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub iteration: u64,
    pub adam_steps: u64,
    pub rng: RngState,
    pub transformer: TransformerConfig,
    pub selector: SelectorConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<(String, Vec<f32>)>,
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

impl Checkpoint {
    pub fn from_state<T: Scalar>(state: &TrainState<T>, train: &TrainConfig) -> Self {
        let m = &state.model;
        let mut arrays = Vec::new();
        m.visit(&mut |name, v| arrays.push((name.to_string(), to_f32(v))));
        m.selector.visit_buffers(&mut |name, v| arrays.push((name.to_string(), to_f32(v))));
        for (i, name) in state.adam.names.iter().enumerate() {
            arrays.push((format!("adam.m.{name}"), to_f32(&state.adam.m[i])));
            arrays.push((format!("adam.v.{name}"), to_f32(&state.adam.v[i])));
        }
        Checkpoint {
            header: CheckpointHeader {
                iteration: state.iteration,
                adam_steps: state.adam.steps,
                rng: RngState::capture(&state.rng),
                transformer: m.transformer_config.clone(),
                selector: m.selector_config.clone(),
                train: train.clone(),
            },
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = toml::to_string(&self.header).map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, v) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let header: CheckpointHeader =
            toml::from_str(text).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.push((name, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last array", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn array(&self, name: &str, len: usize) -> Result<&[f32]> {
        let (_, v) = self
            .arrays
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing array `{name}`")))?;
        if v.len() != len {
            return Err(Error::Format(format!(
                "array `{name}` holds {} values, the model needs {len}",
                v.len()
            )));
        }
        Ok(v)
    }

    /// Errors unless the stored architecture matches the given configs.
    pub fn check_compatible(&self, transformer: &TransformerConfig, selector: &SelectorConfig) -> Result<()> {
        if &self.header.transformer != transformer {
            return Err(Error::Incompatible(format!(
                "transformer config differs: checkpoint {:?}, requested {:?}",
                self.header.transformer, transformer
            )));
        }
        if &self.header.selector != selector {
            return Err(Error::Incompatible(format!(
                "selector config differs: checkpoint {:?}, requested {:?}",
                self.header.selector, selector
            )));
        }
        Ok(())
    }

    pub fn model<T: Scalar>(&self) -> Result<DualNet<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DualNet::new(self.header.transformer.clone(), self.header.selector.clone(), &mut rng)?;
        let mut err = None;
        let mut fill = |name: &str, dst: &mut [T]| {
            if err.is_some() {
                return;
            }
            match self.array(name, dst.len()) {
                Ok(src) => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = T::lit(s as f64)),
                Err(e) => err = Some(e),
            }
        };
        model.visit_mut(&mut fill);
        model.selector.visit_buffers_mut(&mut fill);
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn train_state<T: Scalar>(&self) -> Result<TrainState<T>> {
        let model = self.model::<T>()?;
        let mut adam = Adam::new(&model, self.header.train.adam());
        for (i, name) in adam.names.clone().iter().enumerate() {
            for (prefix, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let src = self.array(&format!("adam.{prefix}.{name}"), dst.len())?;
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = T::lit(s as f64));
            }
        }
        adam.steps = self.header.adam_steps;
        Ok(TrainState {
            model,
            adam,
            iteration: self.header.iteration,
            rng: self.header.rng.restore()?,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, state: &TrainState<T>, train: &TrainConfig) -> Result<()> {
    Checkpoint::from_state(state, train).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
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
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{run_stage1, NoObserver};
    use crate::video_io::Clip;
    use crate::Frame;
    use rand::RngCore;

    fn trained() -> (TrainState<f32>, TrainConfig) {
        let t = TransformerConfig::new(2, 4, 2, 1, 8, 8);
        let s = SelectorConfig {
            ndf: 2,
            ..SelectorConfig::default()
        };
        let cfg = TrainConfig {
            iters_per_k: 2,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut st = TrainState::init(t, s, &cfg).unwrap();
        let clip = Clip::new((0..6).map(|i| Frame::filled(1, 8, 8, 0.1 * i as f32 - 0.3)).collect()).unwrap();
        run_stage1(&mut st, &clip, &cfg, &mut NoObserver).unwrap();
        (st, cfg)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (mut st, cfg) = trained();
        let ck = Checkpoint::from_state(&st, &cfg);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.train_state::<f32>().unwrap();
        assert_eq!(restored.model, st.model);
        assert_eq!(restored.adam, st.adam);
        assert_eq!(restored.iteration, st.iteration);
        assert_eq!(restored.rng.next_u64(), st.rng.next_u64());
        assert_eq!(back.header.train, cfg);
    }

    #[test]
    fn truncation_and_future_versions_are_rejected() {
        let (st, cfg) = trained();
        let bytes = Checkpoint::from_state(&st, &cfg).to_bytes().unwrap();
        for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&future), Err(Error::Incompatible(_))));
    }

    #[test]
    fn compatibility_check_compares_architectures() {
        let (st, cfg) = trained();
        let ck = Checkpoint::from_state(&st, &cfg);
        ck.check_compatible(&st.model.transformer_config, &st.model.selector_config).unwrap();
        let mut other = st.model.transformer_config.clone();
        other.channels = 3;
        assert!(matches!(
            ck.check_compatible(&other, &st.model.selector_config),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn save_and_load_through_a_file() {
        let (st, cfg) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &st, &cfg).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model::<f32>().unwrap(), st.model);
    }
}
