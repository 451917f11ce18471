//! Hide and reveal: payload bytes to an 8-bit container PNG and back.
//!
//! Hiding keeps the host's luminance, frames the payload, maps the bits to a
//! latent with the sign rule, inverts the flow under the luminance, and saves
//! the result as 8-bit RGB. Revealing runs the same steps backwards.
//!
//! Framed bits are XORed with a fixed public keystream before they reach the
//! latent, so short payloads and zero padding still produce balanced signs.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::{
    fit_chroma_to_gamut, lab_to_rgb, lab_to_rgb_unclipped, quantize_to_storage, rgb_to_lab, ColorError, LabImage,
    RgbImage, StorageImage,
};
use crate::flow::{FlowError, FlowModel, FlowNet, TrainingStage};
use crate::latent::{capacity_bits, decode_latent, encode_bits, MappingError, DEFAULT_ALPHA};
use crate::payload::{frame_payload, unframe_payload_with_stats, EccConfig, PayloadError};

#[derive(Debug, Error)]
pub enum StegoError {
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error("model has not been trained (stage: initialized)")]
    UntrainedModel,
}

/// Settings both sides must agree on; stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub alpha: f64,
    pub ecc: EccConfig,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            ecc: EccConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HideResult {
    pub container: StorageImage,
    pub bits_embedded: usize,
    /// Fraction of pixels whose chrominance was pulled back into the RGB gamut.
    pub clip_fraction: f64,
    /// Channel bits carried by the latent signs (framed, then scrambled).
    pub bits: Vec<bool>,
}

/// Revealed payload with channel statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Revealed {
    pub bytes: Vec<u8>,
    pub corrected_bits: usize,
}

/// Seed of the whitening keystream. Changing it breaks every container.
pub const SCRAMBLE_SEED: u64 = 0x5354_4547_464c_4f57;

/// XORs `bits` with the whitening keystream (its own inverse).
pub fn scramble(bits: &[bool]) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(SCRAMBLE_SEED);
    let mut word = 0u64;
    bits.iter()
        .enumerate()
        .map(|(i, &b)| {
            if i % 64 == 0 {
                word = rng.next_u64();
            }
            b ^ ((word >> (i % 64)) & 1 == 1)
        })
        .collect()
}

fn check_trained(model: &FlowModel) -> Result<(), StegoError> {
    if model.stage() == TrainingStage::Initialized {
        return Err(StegoError::UntrainedModel);
    }
    Ok(())
}

/// Chrominance carrying `bits` under luminance `luma` (float, unstored).
pub fn embed_bits(net: &FlowNet, bits: &[bool], luma: &[f64], height: usize, width: usize, alpha: f64, seed: u64) -> Result<Vec<f64>, StegoError> {
    let z = encode_bits(bits, height, width, alpha, seed)?;
    Ok(net.inverse(z.values(), luma, height, width)?)
}

/// Latent recovered from a Lab image.
pub fn extract_latent(net: &FlowNet, lab: &LabImage) -> Result<Vec<f64>, StegoError> {
    let (z, _) = net.forward(lab.chroma(), lab.luminance(), lab.height(), lab.width())?;
    Ok(z)
}

/// The lossy storage step: gamut fit at fixed luminance, then 8-bit rounding.
///
/// Returns the container and the fraction of pixels whose chroma was reduced.
pub fn store_container(luma: &[f64], chroma: &[f64], height: usize, width: usize) -> Result<(StorageImage, f64), StegoError> {
    let n = height * width;
    let mut fitted = chroma.to_vec();
    let mut clipped = 0usize;
    for i in 0..n {
        let (a, b, changed) = fit_chroma_to_gamut(luma[i], chroma[i], chroma[n + i]);
        fitted[i] = a;
        fitted[n + i] = b;
        clipped += usize::from(changed);
    }
    let lab = LabImage::new(width, height, luma.to_vec(), fitted)?;
    let rgb = lab_to_rgb(&lab)?;
    Ok((quantize_to_storage(&rgb), clipped as f64 / n.max(1) as f64))
}

pub fn load_container(container: &StorageImage) -> Result<LabImage, StegoError> {
    Ok(rgb_to_lab(&container.to_working())?)
}

/// The lossless float channel: Lab to unclipped RGB and back, no rounding.
pub fn ideal_channel(luma: &[f64], chroma: &[f64], height: usize, width: usize) -> Result<LabImage, StegoError> {
    let lab = LabImage::new(width, height, luma.to_vec(), chroma.to_vec())?;
    let rgb: RgbImage = lab_to_rgb_unclipped(&lab)?;
    Ok(rgb_to_lab(&rgb)?)
}

pub fn hide(payload: &[u8], host: &RgbImage, model: &FlowModel, settings: &EmbeddingSettings, seed: u64) -> Result<HideResult, StegoError> {
    check_trained(model)?;
    let host_lab = rgb_to_lab(host)?;
    hide_in_luminance(payload, host_lab.luminance(), host.height(), host.width(), &model.net(), settings, seed)
}

/// [`hide`] with the host already reduced to its luminance plane.
pub fn hide_in_luminance(
    payload: &[u8],
    luma: &[f64],
    height: usize,
    width: usize,
    net: &FlowNet,
    settings: &EmbeddingSettings,
    seed: u64,
) -> Result<HideResult, StegoError> {
    let capacity = capacity_bits(height, width);
    let bits = scramble(frame_payload(payload, capacity, &settings.ecc)?.bits());
    let chroma = embed_bits(net, &bits, luma, height, width, settings.alpha, seed)?;
    let (container, clip_fraction) = store_container(luma, &chroma, height, width)?;
    Ok(HideResult {
        container,
        bits_embedded: capacity,
        clip_fraction,
        bits,
    })
}

/// Raw channel bits, before descrambling and unframing.
pub fn reveal_bits(container: &StorageImage, net: &FlowNet) -> Result<Vec<bool>, StegoError> {
    let lab = load_container(container)?;
    Ok(decode_latent(&extract_latent(net, &lab)?))
}

pub fn reveal(container: &StorageImage, model: &FlowModel, settings: &EmbeddingSettings) -> Result<Vec<u8>, StegoError> {
    reveal_with_stats(container, model, settings).map(|r| r.bytes)
}

pub fn reveal_with_stats(container: &StorageImage, model: &FlowModel, settings: &EmbeddingSettings) -> Result<Revealed, StegoError> {
    check_trained(model)?;
    let bits = reveal_bits(container, &model.net())?;
    let unframed = unframe_payload_with_stats(&scramble(&bits), &settings.ecc)?;
    Ok(Revealed {
        bytes: unframed.bytes,
        corrected_bits: unframed.corrected_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{init_model, FlowConfig};

    fn gray_host(size: usize) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            let v = 0.3 + 0.4 * ((x + y) as f64 / (2 * size) as f64);
            [v, v, v]
        })
    }

    #[test]
    fn untrained_model_is_rejected() {
        let model = init_model(&FlowConfig::toy(), 0).unwrap();
        let err = hide(b"x", &gray_host(16), &model, &EmbeddingSettings::default(), 0).unwrap_err();
        assert!(matches!(err, StegoError::UntrainedModel));
    }

    #[test]
    fn too_large_payload_reports_capacity() {
        let mut model = init_model(&FlowConfig::toy(), 0).unwrap();
        model.set_stage(TrainingStage::Likelihood);
        let payload = vec![0u8; 61];
        match hide(&payload, &gray_host(16), &model, &EmbeddingSettings::default(), 0) {
            Err(StegoError::Payload(PayloadError::PayloadTooLarge { max_bytes, .. })) => assert_eq!(max_bytes, 60),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ideal_channel_is_lossless() {
        let l: Vec<f64> = (0..16).map(|i| 0.2 + 0.04 * i as f64).collect();
        let c: Vec<f64> = (0..32).map(|i| (i as f64 - 16.0) * 0.05).collect();
        let lab = ideal_channel(&l, &c, 4, 4).unwrap();
        for (a, b) in lab.chroma().iter().zip(&c) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn storage_keeps_luminance() {
        let l: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        let c: Vec<f64> = (0..128).map(|i| ((i * 37) % 11) as f64 * 0.2 - 1.0).collect();
        let (img, clip) = store_container(&l, &c, 8, 8).unwrap();
        assert!(clip > 0.0);
        let back = load_container(&img).unwrap();
        for (a, b) in back.luminance().iter().zip(&l) {
            assert!((a - b).abs() < 2.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn scrambling_is_an_involution_and_balanced() {
        let zeros = vec![false; 4096];
        let s = scramble(&zeros);
        assert_eq!(scramble(&s), zeros);
        let ones = s.iter().filter(|&&b| b).count();
        assert!((1900..2200).contains(&ones), "{ones}");
        assert_eq!(scramble(&zeros[..100]), s[..100].to_vec());
    }

    #[test]
    fn hiding_is_deterministic() {
        let mut model = init_model(&FlowConfig::toy(), 0).unwrap();
        model.set_stage(TrainingStage::Likelihood);
        let s = EmbeddingSettings::default();
        let a = hide(b"abc", &gray_host(16), &model, &s, 9).unwrap();
        let b = hide(b"abc", &gray_host(16), &model, &s, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bits_embedded, 512);
    }
}
