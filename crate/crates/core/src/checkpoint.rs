//! Self-describing model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "STEGFLOW"
//! version    u32
//! meta_len   u64, then meta_len bytes of JSON metadata
//! count      u32 tensors, each:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u64 * ndim
//!   values   f32 * product(dims)
//! ```
//!
//! The metadata carries the flow config, permutation seed, training stage,
//! embedding settings and the layout conventions (including the whitening
//! keystream seed), so a container can be revealed from the checkpoint and
//! the image alone.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::{AB_SCALE, L_SCALE};
use crate::flow::{FlowConfig, FlowError, FlowModel, TrainingStage};
use crate::pipeline::{EmbeddingSettings, SCRAMBLE_SEED};

pub const MAGIC: &[u8; 8] = b"STEGFLOW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    IncompatibleVersion { found: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint layout {key} = {found}, this build uses {expected}")]
    LayoutMismatch {
        key: &'static str,
        found: String,
        expected: String,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Conventions both sides must share beyond the numeric settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutTags {
    pub l_scale: f64,
    pub ab_scale: f64,
    pub squeeze: String,
    pub bit_order: String,
    pub sign_rule: String,
    pub scramble_seed: u64,
}

impl LayoutTags {
    pub fn current() -> Self {
        Self {
            l_scale: L_SCALE,
            ab_scale: AB_SCALE,
            squeeze: "space_to_depth_2x2".into(),
            bit_order: "channel_major_row_major".into(),
            sign_rule: "negative_is_zero".into(),
            scramble_seed: SCRAMBLE_SEED,
        }
    }

    fn check(&self) -> Result<(), CheckpointError> {
        let want = Self::current();
        let pairs: [(&'static str, String, String); 6] = [
            ("l_scale", self.l_scale.to_string(), want.l_scale.to_string()),
            ("ab_scale", self.ab_scale.to_string(), want.ab_scale.to_string()),
            ("squeeze", self.squeeze.clone(), want.squeeze.clone()),
            ("bit_order", self.bit_order.clone(), want.bit_order.clone()),
            ("sign_rule", self.sign_rule.clone(), want.sign_rule.clone()),
            ("scramble_seed", self.scramble_seed.to_string(), want.scramble_seed.to_string()),
        ];
        for (key, found, expected) in pairs {
            if found != expected {
                return Err(CheckpointError::LayoutMismatch { key, found, expected });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    flow: FlowConfig,
    seed: u64,
    stage: TrainingStage,
    embedding: EmbeddingSettings,
    layout: LayoutTags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub settings: EmbeddingSettings,
}

impl Checkpoint {
    pub fn new(model: FlowModel, settings: EmbeddingSettings) -> Self {
        Self { model, settings }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<(), CheckpointError> {
        let meta = Metadata {
            flow: self.model.config().clone(),
            seed: self.model.seed(),
            stage: self.model.stage(),
            embedding: self.settings.clone(),
            layout: LayoutTags::current(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let specs = self.model.param_specs();
        out.write_all(&(specs.len() as u32).to_le_bytes())?;
        let params = self.model.params();
        for spec in &specs {
            out.write_all(&(spec.name.len() as u32).to_le_bytes())?;
            out.write_all(spec.name.as_bytes())?;
            out.write_all(&(spec.shape.len() as u32).to_le_bytes())?;
            for &d in &spec.shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(spec.len() * 4);
            for v in &params[spec.offset..spec.offset + spec.len()] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn read_from(mut input: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(CheckpointError::IncompatibleVersion { found: version });
        }
        let meta_len = read_u64(&mut input)?;
        if meta_len > 1 << 24 {
            return Err(CheckpointError::Malformed(format!("metadata of {meta_len} bytes")));
        }
        let mut json = vec![0u8; meta_len as usize];
        input.read_exact(&mut json)?;
        let meta: Metadata = serde_json::from_slice(&json).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        meta.layout.check()?;
        meta.flow.validate()?;

        let reference = crate::flow::init_model(&meta.flow, meta.seed)?;
        let specs = reference.param_specs();
        let count = read_u32(&mut input)? as usize;
        if count != specs.len() {
            return Err(CheckpointError::Malformed(format!(
                "{count} tensors, config needs {}",
                specs.len()
            )));
        }
        let mut params = vec![0f32; reference.params().len()];
        let mut seen = vec![false; specs.len()];
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            if name_len > 4096 {
                return Err(CheckpointError::Malformed("tensor name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("tensor name not UTF-8".into()))?;
            let ndim = read_u32(&mut input)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Malformed(format!("tensor {name} has {ndim} dims")));
            }
            let shape = (0..ndim)
                .map(|_| read_u64(&mut input).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let idx = specs
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown tensor {name}")))?;
            let spec = &specs[idx];
            if spec.shape != shape || seen[idx] {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name}: shape {shape:?} (expected {:?}) or duplicate",
                    spec.shape
                )));
            }
            seen[idx] = true;
            let mut buf = vec![0u8; spec.len() * 4];
            input.read_exact(&mut buf)?;
            for (p, chunk) in params[spec.offset..spec.offset + spec.len()].iter_mut().zip(buf.chunks_exact(4)) {
                *p = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        let model = FlowModel::from_parts(meta.flow, meta.seed, meta.stage, params)?;
        Ok(Self {
            model,
            settings: meta.embedding,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        // Write beside the target and rename, so a crash never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32(input: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::init_model;
    use crate::payload::EccConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut model = init_model(&FlowConfig::toy(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = model.params().iter().map(|&p| f64::from(p) + rng.gen_range(-1.0..1.0)).collect();
        model.set_params(&values);
        model.set_stage(TrainingStage::RoundTrained { rounds: 2 });
        Checkpoint::new(
            model,
            EmbeddingSettings {
                alpha: 0.2,
                ecc: EccConfig::bch(15, 7),
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let a: Vec<u32> = ck.model.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.model.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_is_little_endian() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 2;
        assert!(matches!(
            Checkpoint::read_from(bytes.as_slice()),
            Err(CheckpointError::IncompatibleVersion { found: 2 })
        ));
        assert!(matches!(Checkpoint::read_from(&b"PNG"[..]), Err(CheckpointError::BadMagic)));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
