//! Likelihood and round-training objectives, with their partial derivatives.

use std::f64::consts::PI;

use serde::Serialize;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub nll_part: f64,
    pub recon_part: f64,
}

/// Loss value plus `d loss / d z'` and `d loss / d logdet'`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: LossValue,
    pub dz: Vec<f64>,
    pub dlogdet: f64,
}

fn check_finite(v: &LossValue) -> Result<(), TrainError> {
    if v.total.is_finite() && v.nll_part.is_finite() && v.recon_part.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss)
    }
}

/// Negative log-likelihood per dimension under a standard normal prior:
/// `(0.5 |z|^2 + D/2 log(2 pi) - logdet) / D`.
pub fn nll_loss(z: &[f64], logdet: f64) -> Result<LossValue, TrainError> {
    nll_with_grad(z, logdet).map(|g| g.value)
}

pub fn nll_with_grad(z: &[f64], logdet: f64) -> Result<LossGrad, TrainError> {
    if z.is_empty() {
        return Err(TrainError::Shape("empty latent".into()));
    }
    let d = z.len() as f64;
    let sq: f64 = z.iter().map(|v| v * v).sum();
    let nll = (0.5 * sq + 0.5 * d * (2.0 * PI).ln() - logdet) / d;
    let value = LossValue {
        total: nll,
        nll_part: nll,
        recon_part: 0.0,
    };
    check_finite(&value)?;
    Ok(LossGrad {
        value,
        dz: z.iter().map(|v| v / d).collect(),
        dlogdet: -1.0 / d,
    })
}

/// `nll(z', logdet') + weight * |z - z'|_2`, the norm taken over the whole tensor.
pub fn stage2_loss(z: &[f64], z_prime: &[f64], logdet_prime: f64, weight: f64) -> Result<LossValue, TrainError> {
    stage2_with_grad(z, z_prime, logdet_prime, weight).map(|g| g.value)
}

pub fn stage2_with_grad(z: &[f64], z_prime: &[f64], logdet_prime: f64, weight: f64) -> Result<LossGrad, TrainError> {
    if z.len() != z_prime.len() {
        return Err(TrainError::Shape(format!(
            "target latent has {} values, revealed latent {}",
            z.len(),
            z_prime.len()
        )));
    }
    let mut g = nll_with_grad(z_prime, logdet_prime)?;
    let norm = z.iter().zip(z_prime).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let recon = weight * norm;
    if norm > 0.0 {
        for ((d, a), b) in g.dz.iter_mut().zip(z).zip(z_prime) {
            *d += weight * (b - a) / norm;
        }
    }
    g.value.recon_part = recon;
    g.value.total = g.value.nll_part + recon;
    check_finite(&g.value)?;
    Ok(g)
}
