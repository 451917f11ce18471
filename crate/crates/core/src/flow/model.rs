use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{leaky_relu, leaky_relu_backward, Act, Conv};
use super::{
    check_image_shape, squeeze_chroma, squeeze_luma, unsqueeze_chroma, FlowConfig, FlowError, HALF, LUMA_SQUEEZED,
    SQUEEZED,
};

/// How far a model has been trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    Initialized,
    Likelihood,
    RoundTrained { rounds: u32 },
}

/// A named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    cond: Option<[Conv; 2]>,
    couplings: Vec<[Conv; 3]>,
    total: usize,
}

impl Layout {
    fn new(config: &FlowConfig) -> Self {
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut conv = |name: &str, kernel: usize, cin: usize, cout: usize| {
            let weight = offset;
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![kernel, kernel, cin, cout],
                offset,
            });
            offset += kernel * kernel * cin * cout;
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                offset,
            });
            let bias = offset;
            offset += cout;
            Conv {
                kernel,
                cin,
                cout,
                weight,
                bias,
            }
        };
        let f = config.cond_width;
        let cond = (f > 0).then(|| [conv("cond.0", 3, LUMA_SQUEEZED, f), conv("cond.1", 3, f, f)]);
        let hidden = config.hidden_width;
        let couplings = (0..config.coupling_layers)
            .map(|k| {
                [
                    conv(&format!("coupling.{k}.0"), 3, HALF + config.feature_channels(), hidden),
                    conv(&format!("coupling.{k}.1"), 1, hidden, hidden),
                    conv(&format!("coupling.{k}.2"), 3, hidden, 2 * HALF),
                ]
            })
            .collect();
        Self {
            specs,
            cond,
            couplings,
            total: offset,
        }
    }
}

fn channel_splits(config: &FlowConfig, seed: u64) -> Vec<([usize; HALF], [usize; HALF])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..config.coupling_layers)
        .map(|k| {
            let mut perm: [usize; SQUEEZED] = std::array::from_fn(|i| i);
            perm.shuffle(&mut rng);
            let lo: [usize; HALF] = perm[..HALF].try_into().unwrap();
            let hi: [usize; HALF] = perm[HALF..].try_into().unwrap();
            if k % 2 == 0 {
                (lo, hi)
            } else {
                (hi, lo)
            }
        })
        .collect()
}

/// Stored model: configuration, permutation seed and 32-bit parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    seed: u64,
    stage: TrainingStage,
    params: Vec<f32>,
}

impl FlowModel {
    pub fn from_parts(config: FlowConfig, seed: u64, stage: TrainingStage, params: Vec<f32>) -> Result<Self, FlowError> {
        config.validate()?;
        let expected = Layout::new(&config).total;
        if params.len() != expected {
            return Err(FlowError::Shape(format!(
                "{} parameters given, config needs {expected}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            seed,
            stage,
            params,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stage(&self) -> TrainingStage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: TrainingStage) {
        self.stage = stage;
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        Layout::new(&self.config).specs
    }

    /// Stores `values` rounded to 32-bit floats.
    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.params.len());
        for (p, &v) in self.params.iter_mut().zip(values) {
            *p = v as f32;
        }
    }

    /// 64-bit compute view of this model.
    pub fn net(&self) -> FlowNet {
        FlowNet::new(
            self.config.clone(),
            self.seed,
            self.params.iter().map(|&p| f64::from(p)).collect(),
        )
        .expect("model parameters validated at construction")
    }
}

/// Builds a model whose every coupling starts as the identity.
///
/// Final layers of the `s`/`t` subnetworks are zero; other weights are
/// He-normal, biases zero. Channel splits derive from `seed`.
pub fn init_model(config: &FlowConfig, seed: u64) -> Result<FlowModel, FlowError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0f32; layout.total];
    for spec in &layout.specs {
        let zero_init = spec.name.ends_with(".bias") || (spec.name.starts_with("coupling.") && spec.name.ends_with(".2.weight"));
        if zero_init {
            continue;
        }
        let fan_in = spec.shape[0] * spec.shape[1] * spec.shape[2];
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        for p in &mut params[spec.offset..spec.offset + spec.len()] {
            *p = normal.sample(&mut rng) as f32;
        }
    }
    FlowModel::from_parts(config.clone(), seed, TrainingStage::Initialized, params)
}

/// Per-position features of the luminance plane fed to every coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionFeatures {
    act: Act,
}

const FEATURE_MAGIC: &[u8; 8] = b"SFCFEAT1";

impl ConditionFeatures {
    pub fn from_act(act: Act) -> Self {
        Self { act }
    }

    pub fn as_act(&self) -> &Act {
        &self.act
    }

    pub fn channels(&self) -> usize {
        self.act.c
    }

    /// Spatial size of the squeezed grid (half the image size).
    pub fn grid(&self) -> (usize, usize) {
        (self.act.h, self.act.w)
    }

    /// Little-endian feature file: magic, `u32` height/width/channels of the
    /// squeezed grid, then `f32` values position-major.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(FEATURE_MAGIC)?;
        for d in [self.act.h, self.act.w, self.act.c] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.act.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(bad("not a condition feature file"));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| bad("feature dimensions overflow"))?;
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 4];
        for _ in 0..n {
            input.read_exact(&mut b)?;
            data.push(f64::from(f32::from_le_bytes(b)));
        }
        Ok(Self {
            act: Act {
                h: dims[0],
                w: dims[1],
                c: dims[2],
                data,
            },
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }
}

#[derive(Debug, Clone)]
struct CondTrace {
    luma: Act,
    h1pre: Act,
    h1: Act,
}

#[derive(Debug, Clone)]
struct CouplingTrace {
    input: Act,
    u: Act,
    h1pre: Act,
    h1: Act,
    h2pre: Act,
    h2: Act,
    /// Clamped log-scales of the transformed half, `HALF` channels.
    s: Act,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    height: usize,
    width: usize,
    cond: Option<CondTrace>,
    couplings: Vec<CouplingTrace>,
    /// Latent in `(2, H, W)` channel-major layout.
    pub z: Vec<f64>,
    pub logdet: f64,
}

/// 64-bit evaluation view with forward, inverse and gradient passes.
#[derive(Debug, Clone)]
pub struct FlowNet {
    config: FlowConfig,
    layout: Layout,
    splits: Vec<([usize; HALF], [usize; HALF])>,
    params: Vec<f64>,
}

impl FlowNet {
    pub fn new(config: FlowConfig, seed: u64, params: Vec<f64>) -> Result<Self, FlowError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(FlowError::Shape(format!(
                "{} parameters given, config needs {}",
                params.len(),
                layout.total
            )));
        }
        let splits = channel_splits(&config, seed);
        Ok(Self {
            config,
            layout,
            splits,
            params,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    /// `(keep, transformed)` squeezed channels of coupling `k`.
    pub fn split(&self, k: usize) -> ([usize; HALF], [usize; HALF]) {
        self.splits[k]
    }

    fn cond_trace(&self, luma: &[f64], height: usize, width: usize) -> Result<(ConditionFeatures, Option<CondTrace>), FlowError> {
        check_image_shape(height, width)?;
        if luma.len() != height * width {
            return Err(FlowError::Shape(format!(
                "luminance has {} values, expected {}x{}",
                luma.len(),
                width,
                height
            )));
        }
        let lsq = squeeze_luma(luma, height, width);
        match &self.layout.cond {
            None => Ok((ConditionFeatures { act: lsq }, None)),
            Some([c0, c1]) => {
                let h1pre = c0.forward(&self.params, &lsq);
                let h1 = leaky_relu(&h1pre);
                let learned = c1.forward(&self.params, &h1);
                let act = lsq.concat(&learned);
                Ok((ConditionFeatures { act }, Some(CondTrace { luma: lsq, h1pre, h1 })))
            }
        }
    }

    /// Conditioning features of a luminance plane.
    pub fn condition_features(&self, luma: &[f64], height: usize, width: usize) -> Result<ConditionFeatures, FlowError> {
        self.cond_trace(luma, height, width).map(|(f, _)| f)
    }

    fn check_features(&self, feats: &ConditionFeatures, h: usize, w: usize) -> Result<(), FlowError> {
        if feats.act.c != self.config.feature_channels() || feats.act.h != h || feats.act.w != w {
            return Err(FlowError::Shape(format!(
                "features are {}x{}x{}, model expects {}x{}x{}",
                feats.act.h,
                feats.act.w,
                feats.act.c,
                h,
                w,
                self.config.feature_channels()
            )));
        }
        Ok(())
    }

    fn subnet(&self, k: usize, keep: &Act, feats: &Act) -> (Act, Act, Act, Act, Act, Act) {
        let [c0, c1, c2] = &self.layout.couplings[k];
        let u = keep.concat(feats);
        let h1pre = c0.forward(&self.params, &u);
        let h1 = leaky_relu(&h1pre);
        let h2pre = c1.forward(&self.params, &h1);
        let h2 = leaky_relu(&h2pre);
        let o = c2.forward(&self.params, &h2);
        (u, h1pre, h1, h2pre, h2, o)
    }

    fn scale(&self, raw: f64) -> f64 {
        let clamp = self.config.scale_clamp;
        clamp * (raw / clamp).tanh()
    }

    fn coupling_step(&self, k: usize, x: &Act, feats: &ConditionFeatures) -> (Act, f64, CouplingTrace) {
        let (keep, tr) = self.splits[k];
        let (u, h1pre, h1, h2pre, h2, o) = self.subnet(k, &x.select(&keep), &feats.act);
        let mut y = x.clone();
        let mut s_act = Act::zeros(x.h, x.w, HALF);
        let mut logdet = 0.0;
        for pos in 0..x.positions() {
            for (i, &ch) in tr.iter().enumerate() {
                let s = self.scale(o.at(pos, i));
                let t = o.at(pos, HALF + i);
                y.data[pos * SQUEEZED + ch] = x.at(pos, ch) * s.exp() + t;
                s_act.data[pos * HALF + i] = s;
                logdet += s;
            }
        }
        let trace = CouplingTrace {
            input: x.clone(),
            u,
            h1pre,
            h1,
            h2pre,
            h2,
            s: s_act,
        };
        (y, logdet, trace)
    }

    /// One coupling on a squeezed map: returns the output and `sum(s)`.
    pub fn coupling_forward(&self, k: usize, x: &Act, feats: &ConditionFeatures) -> (Act, f64) {
        let (y, logdet, _) = self.coupling_step(k, x, feats);
        (y, logdet)
    }

    pub fn coupling_inverse(&self, k: usize, y: &Act, feats: &ConditionFeatures) -> Act {
        let (keep, tr) = self.splits[k];
        let (.., o) = self.subnet(k, &y.select(&keep), &feats.act);
        let mut x = y.clone();
        for pos in 0..y.positions() {
            for (i, &ch) in tr.iter().enumerate() {
                let s = self.scale(o.at(pos, i));
                let t = o.at(pos, HALF + i);
                x.data[pos * SQUEEZED + ch] = (y.at(pos, ch) - t) * (-s).exp();
            }
        }
        x
    }

    fn check_chroma(&self, c: &[f64], height: usize, width: usize) -> Result<(), FlowError> {
        check_image_shape(height, width)?;
        if c.len() != 2 * height * width {
            return Err(FlowError::Shape(format!(
                "chrominance has {} values, expected 2x{}x{}",
                c.len(),
                height,
                width
            )));
        }
        Ok(())
    }

    /// `z = f(c; L)` with the log-determinant of `dz/dc`.
    pub fn forward(&self, c: &[f64], luma: &[f64], height: usize, width: usize) -> Result<(Vec<f64>, f64), FlowError> {
        let feats = self.condition_features(luma, height, width)?;
        self.forward_with_features(c, height, width, &feats)
    }

    pub fn forward_with_features(
        &self,
        c: &[f64],
        height: usize,
        width: usize,
        feats: &ConditionFeatures,
    ) -> Result<(Vec<f64>, f64), FlowError> {
        self.check_chroma(c, height, width)?;
        self.check_features(feats, height / 2, width / 2)?;
        let mut x = squeeze_chroma(c, height, width);
        let mut logdet = 0.0;
        for k in 0..self.config.coupling_layers {
            let (y, ld) = self.coupling_forward(k, &x, feats);
            x = y;
            logdet += ld;
        }
        let z = unsqueeze_chroma(&x);
        if !logdet.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("flow forward"));
        }
        Ok((z, logdet))
    }

    /// `c = f^-1(z; L)`, inverting the couplings in reverse order.
    pub fn inverse(&self, z: &[f64], luma: &[f64], height: usize, width: usize) -> Result<Vec<f64>, FlowError> {
        let feats = self.condition_features(luma, height, width)?;
        self.inverse_with_features(z, height, width, &feats)
    }

    pub fn inverse_with_features(
        &self,
        z: &[f64],
        height: usize,
        width: usize,
        feats: &ConditionFeatures,
    ) -> Result<Vec<f64>, FlowError> {
        self.check_chroma(z, height, width)?;
        self.check_features(feats, height / 2, width / 2)?;
        let mut y = squeeze_chroma(z, height, width);
        for k in (0..self.config.coupling_layers).rev() {
            y = self.coupling_inverse(k, &y, feats);
        }
        let c = unsqueeze_chroma(&y);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("flow inverse"));
        }
        Ok(c)
    }

    /// Forward pass that records the activations needed by [`FlowNet::backward`].
    pub fn forward_trace(&self, c: &[f64], luma: &[f64], height: usize, width: usize) -> Result<ForwardTrace, FlowError> {
        self.check_chroma(c, height, width)?;
        let (feats, cond) = self.cond_trace(luma, height, width)?;
        let mut x = squeeze_chroma(c, height, width);
        let mut logdet = 0.0;
        let mut couplings = Vec::with_capacity(self.config.coupling_layers);
        for k in 0..self.config.coupling_layers {
            let (y, ld, trace) = self.coupling_step(k, &x, &feats);
            couplings.push(trace);
            x = y;
            logdet += ld;
        }
        let z = unsqueeze_chroma(&x);
        if !logdet.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("flow forward"));
        }
        Ok(ForwardTrace {
            height,
            width,
            cond,
            couplings,
            z,
            logdet,
        })
    }

    /// Accumulates into `grad` the parameter gradient of a scalar loss whose
    /// partials are `dz` (in `(2, H, W)` layout) and `dlogdet`.
    pub fn backward(&self, trace: &ForwardTrace, dz: &[f64], dlogdet: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.layout.total);
        let clamp = self.config.scale_clamp;
        let mut dy = squeeze_chroma(dz, trace.height, trace.width);
        let (gh, gw) = (dy.h, dy.w);
        let mut dfeat = Act::zeros(gh, gw, self.config.feature_channels());
        for k in (0..self.config.coupling_layers).rev() {
            let t = &trace.couplings[k];
            let (keep, tr) = self.splits[k];
            let [c0, c1, c2] = &self.layout.couplings[k];
            let mut dx = dy.clone();
            let mut dout = Act::zeros(gh, gw, 2 * HALF);
            for pos in 0..dy.positions() {
                for (i, &ch) in tr.iter().enumerate() {
                    let s = t.s.at(pos, i);
                    let e = s.exp();
                    let g = dy.at(pos, ch);
                    dx.data[pos * SQUEEZED + ch] = g * e;
                    let ds = g * t.input.at(pos, ch) * e + dlogdet;
                    let tanh = s / clamp;
                    dout.data[pos * 2 * HALF + i] = ds * (1.0 - tanh * tanh);
                    dout.data[pos * 2 * HALF + HALF + i] = g;
                }
            }
            let mut dh2 = c2.backward(&self.params, &t.h2, &dout, grad);
            leaky_relu_backward(&t.h2pre, &mut dh2);
            let mut dh1 = c1.backward(&self.params, &t.h1, &dh2, grad);
            leaky_relu_backward(&t.h1pre, &mut dh1);
            let du = c0.backward(&self.params, &t.u, &dh1, grad);
            let uc = du.c;
            for pos in 0..dy.positions() {
                let row = &du.data[pos * uc..(pos + 1) * uc];
                for (i, &ch) in keep.iter().enumerate() {
                    dx.data[pos * SQUEEZED + ch] += row[i];
                }
                for (j, &v) in row[HALF..].iter().enumerate() {
                    dfeat.data[pos * dfeat.c + j] += v;
                }
            }
            dy = dx;
        }
        if let (Some([c0, c1]), Some(ct)) = (&self.layout.cond, &trace.cond) {
            let learned: Vec<usize> = (LUMA_SQUEEZED..dfeat.c).collect();
            let dlearned = dfeat.select(&learned);
            let mut dh1 = c1.backward(&self.params, &ct.h1, &dlearned, grad);
            leaky_relu_backward(&ct.h1pre, &mut dh1);
            c0.backward(&self.params, &ct.luma, &dh1, grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_net(config: &FlowConfig, seed: u64, scale: f64) -> FlowNet {
        let model = init_model(config, seed).unwrap();
        let mut net = model.net();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for p in net.params_mut() {
            *p += rng.gen_range(-scale..scale);
        }
        net
    }

    fn random_inputs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let c = (0..2 * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let l = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        (c, l)
    }

    #[test]
    fn fresh_model_is_identity() {
        let config = FlowConfig::toy();
        let net = init_model(&config, 3).unwrap().net();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, l) = random_inputs(&mut rng, 16, 16);
        let (z, logdet) = net.forward(&c, &l, 16, 16).unwrap();
        assert_eq!(z, c);
        assert_eq!(logdet, 0.0);
        assert_eq!(net.inverse(&z, &l, 16, 16).unwrap(), c);
    }

    #[test]
    fn same_seed_same_parameters() {
        let config = FlowConfig::toy();
        assert_eq!(init_model(&config, 9).unwrap(), init_model(&config, 9).unwrap());
        assert_ne!(init_model(&config, 9).unwrap().params(), init_model(&config, 10).unwrap().params());
        assert_eq!(FlowConfig::default().coupling_layers, 30);
    }

    #[test]
    fn constant_scale_gives_n_log_two() {
        let config = FlowConfig {
            coupling_layers: 1,
            ..FlowConfig::toy()
        };
        let mut net = init_model(&config, 1).unwrap().net();
        let bias = net.param_specs().iter().find(|s| s.name == "coupling.0.2.bias").unwrap().offset;
        let raw = config.scale_clamp * (2f64.ln() / config.scale_clamp).atanh();
        for i in 0..HALF {
            net.params_mut()[bias + i] = raw;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, l) = random_inputs(&mut rng, 4, 4);
        let (z, logdet) = net.forward(&c, &l, 4, 4).unwrap();
        let n = 2 * 2 * HALF; // four squeezed positions, HALF channels each
        assert!((logdet - n as f64 * 2f64.ln()).abs() < 1e-12);
        let doubled = z.iter().zip(&c).filter(|(a, b)| (*a - 2.0 * *b).abs() < 1e-12).count();
        assert_eq!(doubled, n);
    }

    #[test]
    fn random_model_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [1, 2, 5] {
            let config = FlowConfig {
                coupling_layers: k,
                ..FlowConfig::toy()
            };
            let net = random_net(&config, k as u64, 0.05);
            let (c, l) = random_inputs(&mut rng, 8, 12);
            let (z, _) = net.forward(&c, &l, 8, 12).unwrap();
            let back = net.inverse(&z, &l, 8, 12).unwrap();
            let err = back.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "K={k}: {err}");
        }
    }

    #[test]
    fn constant_luma_gives_constant_features() {
        let net = random_net(&FlowConfig::toy(), 2, 0.1);
        let feats = net.condition_features(&[0.37; 64], 8, 8).unwrap();
        let act = feats.as_act();
        assert_eq!(feats.channels(), FlowConfig::toy().feature_channels());
        for pos in 1..act.positions() {
            for ch in 0..act.c {
                assert!((act.at(pos, ch) - act.at(0, ch)).abs() < 1e-12);
            }
        }
        assert_eq!(feats, net.condition_features(&[0.37; 64], 8, 8).unwrap());
    }

    #[test]
    fn shape_errors() {
        let net = init_model(&FlowConfig::toy(), 0).unwrap().net();
        assert!(net.condition_features(&[0.0; 15], 3, 5).is_err());
        assert!(net.forward(&[0.0; 10], &[0.0; 16], 4, 4).is_err());
        let feats = net.condition_features(&[0.0; 16], 4, 4).unwrap();
        assert!(net.forward_with_features(&[0.0; 128], 8, 8, &feats).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let net = random_net(&FlowConfig::toy(), 8, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, l) = random_inputs(&mut rng, 4, 4);
        let feats = net.condition_features(&l, 4, 4).unwrap();
        let mut bytes = Vec::new();
        feats.write_to(&mut bytes).unwrap();
        let back = ConditionFeatures::read_from(&bytes[..]).unwrap();
        assert_eq!(back.channels(), feats.channels());
        let (z, _) = net.forward_with_features(&c, 4, 4, &back).unwrap();
        let c2 = net.inverse_with_features(&z, 4, 4, &back).unwrap();
        assert!(c2.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn backward_matches_finite_differences_on_inputs_of_a_linear_probe() {
        let config = FlowConfig {
            coupling_layers: 2,
            hidden_width: 6,
            cond_width: 3,
            ..FlowConfig::toy()
        };
        let net = random_net(&config, 6, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, l) = random_inputs(&mut rng, 4, 4);
        let probe: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |n: &FlowNet| {
            let (z, ld) = n.forward(&c, &l, 4, 4).unwrap();
            z.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>() + 0.7 * ld
        };
        let trace = net.forward_trace(&c, &l, 4, 4).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&trace, &probe, 0.7, &mut grad);
        let eps = 1e-6;
        for i in (0..net.num_params()).step_by(7) {
            let mut n = net.clone();
            n.params_mut()[i] += eps;
            let up = objective(&n);
            n.params_mut()[i] -= 2.0 * eps;
            let down = objective(&n);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }
}
