//! Two-stage training.
//!
//! Stage 1 fits the flow by maximum likelihood on natural chrominance.
//! Stage 2 runs rounds: a frozen copy `H` of the model produces 8-bit
//! containers from fresh random bits, a trainable copy `R` learns to map
//! those containers back to the latents they were made from, and at the end
//! of the round `R` is copied into `H`. Rounding happens only while
//! containers are generated, never on the gradient path.

mod loss;
mod optim;

pub use loss::{nll_loss, nll_with_grad, stage2_loss, stage2_with_grad, LossGrad, LossValue};
pub use optim::{Adam, Plateau};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::LabImage;
use crate::flow::{FlowError, FlowModel, FlowNet, TrainingStage};
use crate::latent::{capacity_bits, decode_latent, encode_bits};
use crate::pipeline::{load_container, store_container, EmbeddingSettings, StegoError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged in {stage} at iteration {iteration}")]
    Diverged { stage: &'static str, iteration: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Stego(#[from] StegoError),
    #[error("observer: {0}")]
    Observer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// The rate is divided by this on a plateau.
    pub lr_decay_factor: f64,
    pub plateau_window: usize,
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    pub batch: usize,
    /// Stage-1 passes over the data.
    pub epochs: usize,
    pub rounds: usize,
    pub iters_per_round: usize,
    /// Weight of `|z - z'|_2` in the stage-2 loss.
    pub recon_weight: f64,
    /// Set from the run seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            lr_decay_factor: 5.0,
            plateau_window: 200,
            plateau_patience: 3,
            plateau_tolerance: 1e-3,
            batch: 48,
            epochs: 100,
            rounds: 5,
            iters_per_round: 4000,
            recon_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.plateau_window == 0 || self.plateau_patience == 0 {
            return bad("plateau window and patience must be at least 1");
        }
        if !(self.recon_weight.is_finite() && self.recon_weight >= 0.0) {
            return bad("recon_weight must be non-negative");
        }
        Ok(())
    }

    fn plateau(&self) -> Plateau {
        Plateau::new(
            self.plateau_window,
            self.plateau_patience,
            self.plateau_tolerance,
            self.lr_decay_factor,
        )
    }
}

/// One line of training progress.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgressRecord {
    pub stage: u8,
    pub round: usize,
    pub iteration: usize,
    pub total: f64,
    pub nll: f64,
    pub recon: f64,
    pub lr: f64,
    /// Sign agreement of revealed latents on the batch (stage 2 only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bit_accuracy: Option<f64>,
}

/// Hooks called during training; all have no-op defaults.
pub trait TrainObserver {
    fn record(&mut self, _record: &ProgressRecord) -> Result<(), TrainError> {
        Ok(())
    }

    fn epoch_end(&mut self, _epoch: usize, _mean_nll: f64, _model: &FlowModel) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called after the copy step, with the model `H` now holds.
    fn round_end(&mut self, _round: usize, _model: &FlowModel) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes every record as one JSON object per line.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> TrainObserver for JsonLines<W> {
    fn record(&mut self, record: &ProgressRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).map_err(|e| TrainError::Observer(e.to_string()))?;
        writeln!(self.0, "{line}").map_err(|e| TrainError::Observer(e.to_string()))
    }
}

fn check_images(images: &[LabImage]) -> Result<(), TrainError> {
    if images.is_empty() {
        return Err(TrainError::InvalidConfig("training set is empty".into()));
    }
    for img in images {
        if img.height() % 2 != 0 || img.width() % 2 != 0 || img.height() == 0 || img.width() == 0 {
            return Err(TrainError::Shape(format!(
                "image {}x{} must have positive even sides",
                img.width(),
                img.height()
            )));
        }
    }
    Ok(())
}

fn sum_in_order(parts: Vec<(LossValue, Vec<f64>)>, len: usize) -> (LossValue, Vec<f64>) {
    let n = parts.len() as f64;
    let mut grad = vec![0.0; len];
    let mut total = LossValue {
        total: 0.0,
        nll_part: 0.0,
        recon_part: 0.0,
    };
    for (v, g) in parts {
        total.total += v.total / n;
        total.nll_part += v.nll_part / n;
        total.recon_part += v.recon_part / n;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / n;
        }
    }
    (total, grad)
}

/// Mean stage-1 loss and parameter gradient over a batch.
pub fn stage1_batch_gradient(net: &FlowNet, batch: &[&LabImage]) -> Result<(LossValue, Vec<f64>), TrainError> {
    let parts = batch
        .par_iter()
        .map(|img| {
            let trace = net.forward_trace(img.chroma(), img.luminance(), img.height(), img.width())?;
            let g = nll_with_grad(&trace.z, trace.logdet)?;
            let mut grad = vec![0.0; net.num_params()];
            net.backward(&trace, &g.dz, g.dlogdet, &mut grad);
            Ok((g.value, grad))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(sum_in_order(parts, net.num_params()))
}

fn diverged(stage: &'static str, iteration: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::NonFiniteLoss | TrainError::Flow(FlowError::NonFinite(_)) => TrainError::Diverged { stage, iteration },
        other => other,
    }
}

/// Maximum-likelihood training. The observer sees the model after every epoch.
pub fn train_stage1(
    model: &FlowModel,
    images: &[LabImage],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FlowModel, TrainError> {
    config.validate()?;
    check_images(images)?;
    let mut net = model.net();
    let mut opt = Adam::new(net.num_params(), config.beta1, config.beta2);
    let mut plateau = config.plateau();
    let mut lr = config.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut out = model.clone();
    out.set_stage(TrainingStage::Likelihood);
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&LabImage> = chunk.iter().map(|&i| &images[i]).collect();
            let (loss, grad) = stage1_batch_gradient(&net, &batch).map_err(diverged("stage 1", iteration))?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    stage: "stage 1",
                    iteration,
                });
            }
            opt.update(net.params_mut(), &grad, lr);
            observer.record(&ProgressRecord {
                stage: 1,
                round: 0,
                iteration,
                total: loss.total,
                nll: loss.nll_part,
                recon: 0.0,
                lr,
                bit_accuracy: None,
            })?;
            if let Some(new_lr) = plateau.observe(loss.total, lr) {
                log::info!("stage 1: plateau at iteration {iteration}, lr {lr:e} -> {new_lr:e}");
                lr = new_lr;
            }
            epoch_sum += loss.total;
            batches += 1;
            iteration += 1;
        }
        out.set_params(net.params());
        let mean = epoch_sum / batches as f64;
        log::info!("stage 1: epoch {epoch} mean nll {mean:.5}");
        observer.epoch_end(epoch, mean, &out)?;
    }
    out.set_params(net.params());
    Ok(out)
}

/// Mean NLL of a model over a set of images.
pub fn mean_nll(net: &FlowNet, images: &[LabImage]) -> Result<f64, TrainError> {
    let values = images
        .par_iter()
        .map(|img| {
            let (z, logdet) = net.forward(img.chroma(), img.luminance(), img.height(), img.width())?;
            Ok(nll_loss(&z, logdet)?.total)
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

/// One training example for the revealing side.
#[derive(Debug, Clone)]
pub struct ContainerSample {
    /// Latent the container was generated from.
    pub z: Vec<f64>,
    /// Lab view of the stored 8-bit container.
    pub container: LabImage,
    pub clip_fraction: f64,
}

/// Container generation with `H` (no gradients): bits -> z -> c -> 8-bit.
pub fn generate_container(
    hiding: &FlowNet,
    luma: &[f64],
    height: usize,
    width: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<ContainerSample, TrainError> {
    let bits: Vec<bool> = (0..capacity_bits(height, width)).map(|_| rng.gen()).collect();
    let seed = rng.gen();
    let z = encode_bits(&bits, height, width, alpha, seed).map_err(StegoError::from)?;
    let c = hiding.inverse(z.values(), luma, height, width)?;
    let (stored, clip_fraction) = store_container(luma, &c, height, width)?;
    Ok(ContainerSample {
        z: z.into_values(),
        container: load_container(&stored)?,
        clip_fraction,
    })
}

/// State of one stage-2 round: a frozen hiding net and a trainable
/// revealing net that start from the same parameters.
pub struct RoundTrainer<'a> {
    hiding: FlowNet,
    revealing: FlowNet,
    hosts: &'a [LabImage],
    config: &'a TrainConfig,
    alpha: f64,
    opt: Adam,
    plateau: Plateau,
    lr: f64,
    rng: ChaCha8Rng,
}

impl<'a> RoundTrainer<'a> {
    pub fn new(model: &FlowModel, hosts: &'a [LabImage], config: &'a TrainConfig, alpha: f64, round: usize) -> Self {
        let hiding = model.net();
        let revealing = hiding.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(round as u64 + 1);
        Self {
            opt: Adam::new(hiding.num_params(), config.beta1, config.beta2),
            plateau: config.plateau(),
            lr: config.lr,
            hiding,
            revealing,
            hosts,
            config,
            alpha,
            rng,
        }
    }

    pub fn hiding(&self) -> &FlowNet {
        &self.hiding
    }

    pub fn revealing(&self) -> &FlowNet {
        &self.revealing
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Generates a fresh batch of containers and takes one optimizer step on `R`.
    pub fn step(&mut self) -> Result<(LossValue, f64), TrainError> {
        let jobs: Vec<(usize, u64)> = (0..self.config.batch)
            .map(|_| (self.rng.gen_range(0..self.hosts.len()), self.rng.gen()))
            .collect();
        let (hiding, revealing, hosts, alpha, weight) =
            (&self.hiding, &self.revealing, self.hosts, self.alpha, self.config.recon_weight);
        let parts = jobs
            .par_iter()
            .map(|&(host, seed)| {
                let img = &hosts[host];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sample = generate_container(hiding, img.luminance(), img.height(), img.width(), alpha, &mut rng)?;
                let lab = &sample.container;
                let trace = revealing.forward_trace(lab.chroma(), lab.luminance(), lab.height(), lab.width())?;
                let g = stage2_with_grad(&sample.z, &trace.z, trace.logdet, weight)?;
                let correct = decode_latent(&trace.z)
                    .iter()
                    .zip(decode_latent(&sample.z))
                    .filter(|(a, b)| **a == *b)
                    .count();
                let mut grad = vec![0.0; revealing.num_params()];
                revealing.backward(&trace, &g.dz, g.dlogdet, &mut grad);
                Ok(((g.value, grad), correct as f64 / sample.z.len() as f64))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let accuracy = parts.iter().map(|(_, a)| a).sum::<f64>() / parts.len() as f64;
        let (loss, grad) = sum_in_order(parts.into_iter().map(|(p, _)| p).collect(), self.revealing.num_params());
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss);
        }
        self.opt.update(self.revealing.params_mut(), &grad, self.lr);
        if let Some(new_lr) = self.plateau.observe(loss.total, self.lr) {
            self.lr = new_lr;
        }
        Ok((loss, accuracy))
    }

    /// The copy step: `R`'s parameters become the model's.
    pub fn finish(self, model: &mut FlowModel) {
        model.set_params(self.revealing.params());
    }
}

/// Round-based training. `rounds = 0` returns the model unchanged.
pub fn train_stage2(
    model: &FlowModel,
    hosts: &[LabImage],
    config: &TrainConfig,
    settings: &EmbeddingSettings,
    observer: &mut dyn TrainObserver,
) -> Result<FlowModel, TrainError> {
    config.validate()?;
    check_images(hosts)?;
    let mut out = model.clone();
    let start = match model.stage() {
        TrainingStage::RoundTrained { rounds } => rounds as usize,
        _ => 0,
    };
    let mut iteration = 0;
    for round in 0..config.rounds {
        let mut trainer = RoundTrainer::new(&out, hosts, config, settings.alpha, start + round);
        for _ in 0..config.iters_per_round {
            let lr = trainer.lr();
            let (loss, accuracy) = trainer.step().map_err(diverged("stage 2", iteration))?;
            observer.record(&ProgressRecord {
                stage: 2,
                round: start + round + 1,
                iteration,
                total: loss.total,
                nll: loss.nll_part,
                recon: loss.recon_part,
                lr,
                bit_accuracy: Some(accuracy),
            })?;
            iteration += 1;
        }
        trainer.finish(&mut out);
        out.set_stage(TrainingStage::RoundTrained {
            rounds: (start + round + 1) as u32,
        });
        log::info!("stage 2: round {} done", start + round + 1);
        observer.round_end(start + round + 1, &out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_dataset;
    use crate::flow::{init_model, FlowConfig};

    fn small() -> (FlowModel, Vec<LabImage>) {
        let config = FlowConfig {
            coupling_layers: 2,
            hidden_width: 8,
            cond_width: 2,
            height: 8,
            width: 8,
            scale_clamp: 2.0,
        };
        (init_model(&config, 1).unwrap(), synthetic_dataset(6, 8, 2))
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch: 3,
            epochs: 2,
            rounds: 1,
            iters_per_round: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage1_is_reproducible() {
        let (model, data) = small();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let ma = train_stage1(&model, &data, &quick(), &mut JsonLines(&mut a)).unwrap();
        let mb = train_stage1(&model, &data, &quick(), &mut JsonLines(&mut b)).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
        assert_eq!(ma.stage(), TrainingStage::Likelihood);
    }

    #[test]
    fn zero_rounds_leave_model_unchanged() {
        let (model, data) = small();
        let config = TrainConfig { rounds: 0, ..quick() };
        let out = train_stage2(&model, &data, &config, &EmbeddingSettings::default(), &mut ()).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn hiding_net_is_frozen_during_a_round() {
        let (model, data) = small();
        let config = quick();
        let mut trainer = RoundTrainer::new(&model, &data, &config, 0.1, 0);
        let before = trainer.hiding().params().to_vec();
        for _ in 0..3 {
            trainer.step().unwrap();
        }
        assert_eq!(trainer.hiding().params(), &before[..]);
        assert_ne!(trainer.revealing().params(), &before[..]);
        let mut out = model.clone();
        let revealed: Vec<f32> = trainer.revealing().params().iter().map(|&p| p as f32).collect();
        trainer.finish(&mut out);
        assert_eq!(out.params(), &revealed[..]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (model, data) = small();
        let config = TrainConfig { lr: 0.0, ..quick() };
        assert!(matches!(train_stage1(&model, &data, &config, &mut ()), Err(TrainError::InvalidConfig(_))));
        assert!(matches!(train_stage1(&model, &[], &quick(), &mut ()), Err(TrainError::InvalidConfig(_))));
    }
}
