//! Conditional invertible network over chrominance.
//!
//! The two chrominance planes `(2, H, W)` are squeezed space-to-depth into an
//! `(H/2, W/2, 8)` map, then pushed through `K` steps. Each step applies a
//! fixed channel permutation followed by an affine coupling:
//!
//! ```text
//! y_keep = x_keep
//! y_tr   = x_tr * exp(s(x_keep, cond)) + t(x_keep, cond)
//! ```
//!
//! `s` is soft-clamped to `(-clamp, clamp)` with a scaled `tanh`. Even steps
//! transform the upper four channels, odd steps the lower four. The
//! conditioning features are the squeezed luminance plane concatenated with
//! the output of a small convolutional encoder over it; every coupling sees
//! them. The log-determinant of the whole map is the sum of all `s`.

mod model;
mod tensor;

pub use model::{init_model, ConditionFeatures, FlowModel, FlowNet, ForwardTrace, ParamSpec, TrainingStage};
pub use tensor::{Act, Conv};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channels after the space-to-depth squeeze of the two chrominance planes.
pub const SQUEEZED: usize = 8;
/// Channels of the squeezed luminance plane.
pub const LUMA_SQUEEZED: usize = 4;
const HALF: usize = SQUEEZED / 2;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of coupling steps `K`.
    pub coupling_layers: usize,
    /// Channels in the hidden layers of every `s`/`t` subnetwork.
    pub hidden_width: usize,
    /// Learned conditioning channels (in addition to the squeezed luminance).
    pub cond_width: usize,
    /// Training resolution; the network itself accepts any even size.
    pub height: usize,
    pub width: usize,
    /// Bound on `|s|`.
    pub scale_clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            coupling_layers: 30,
            hidden_width: 64,
            cond_width: 16,
            height: 128,
            width: 128,
            scale_clamp: 2.0,
        }
    }
}

impl FlowConfig {
    /// Desk-scale configuration: 16x16 images, four couplings.
    pub fn toy() -> Self {
        Self {
            coupling_layers: 4,
            hidden_width: 32,
            cond_width: 8,
            height: 16,
            width: 16,
            scale_clamp: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: String| Err(FlowError::InvalidConfig(m));
        if self.coupling_layers == 0 {
            return bad("coupling_layers must be at least 1".into());
        }
        if self.hidden_width == 0 {
            return bad("hidden_width must be positive".into());
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return bad(format!(
                "image size {}x{} must be positive and even",
                self.width, self.height
            ));
        }
        if !(self.scale_clamp.is_finite() && self.scale_clamp > 0.0) {
            return bad(format!("scale_clamp must be positive, got {}", self.scale_clamp));
        }
        Ok(())
    }

    /// Channels of the conditioning features fed to each coupling.
    pub fn feature_channels(&self) -> usize {
        LUMA_SQUEEZED + self.cond_width
    }
}

fn check_image_shape(height: usize, width: usize) -> Result<(), FlowError> {
    if height == 0 || width == 0 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(FlowError::Shape(format!(
            "image size {width}x{height} must be positive and even"
        )));
    }
    Ok(())
}

/// `(2, H, W)` channel-major planes to `(H/2, W/2, 8)`, channel `plane*4 + dy*2 + dx`.
pub fn squeeze_chroma(c: &[f64], height: usize, width: usize) -> Act {
    let (h, w) = (height / 2, width / 2);
    let mut out = Act::zeros(h, w, SQUEEZED);
    let plane = height * width;
    for p in 0..2 {
        for y in 0..height {
            for x in 0..width {
                let ch = p * 4 + (y % 2) * 2 + x % 2;
                out.data[((y / 2) * w + x / 2) * SQUEEZED + ch] = c[p * plane + y * width + x];
            }
        }
    }
    out
}

pub fn unsqueeze_chroma(x: &Act) -> Vec<f64> {
    let (height, width) = (x.h * 2, x.w * 2);
    let plane = height * width;
    let mut c = vec![0.0; 2 * plane];
    for p in 0..2 {
        for y in 0..height {
            for x_ in 0..width {
                let ch = p * 4 + (y % 2) * 2 + x_ % 2;
                c[p * plane + y * width + x_] = x.data[((y / 2) * x.w + x_ / 2) * SQUEEZED + ch];
            }
        }
    }
    c
}

pub fn squeeze_luma(l: &[f64], height: usize, width: usize) -> Act {
    let (h, w) = (height / 2, width / 2);
    let mut out = Act::zeros(h, w, LUMA_SQUEEZED);
    for y in 0..height {
        for x in 0..width {
            out.data[((y / 2) * w + x / 2) * LUMA_SQUEEZED + (y % 2) * 2 + x % 2] = l[y * width + x];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squeeze_round_trips() {
        let c: Vec<f64> = (0..2 * 4 * 6).map(|v| v as f64).collect();
        let sq = squeeze_chroma(&c, 4, 6);
        assert_eq!((sq.h, sq.w, sq.c), (2, 3, 8));
        assert_eq!(unsqueeze_chroma(&sq), c);
        // Top-left 2x2 block of plane 0 sits in channels 0..4 of position 0.
        assert_eq!(&sq.data[..4], &[0.0, 1.0, 6.0, 7.0]);
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig::default().validate().is_ok());
        assert!(FlowConfig {
            coupling_layers: 0,
            ..FlowConfig::toy()
        }
        .validate()
        .is_err());
        assert!(FlowConfig {
            height: 15,
            ..FlowConfig::toy()
        }
        .validate()
        .is_err());
    }
}
