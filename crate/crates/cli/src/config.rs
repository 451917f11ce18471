//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stegflow_core::flow::FlowConfig;
use stegflow_core::payload::EccConfig;
use stegflow_core::pipeline::EmbeddingSettings;
use stegflow_core::training::TrainConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    /// Side length images are resized to.
    pub size: usize,
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            size: 128,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub coupling_layers: usize,
    pub hidden_width: usize,
    pub cond_width: usize,
    pub scale_clamp: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let f = FlowConfig::default();
        Self {
            coupling_layers: f.coupling_layers,
            hidden_width: f.hidden_width,
            cond_width: f.cond_width,
            scale_clamp: f.scale_clamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    pub alpha: f64,
}

impl Default for MappingSection {
    fn default() -> Self {
        Self {
            alpha: EmbeddingSettings::default().alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Square sizes for the capacity sweep.
    pub sizes: Vec<usize>,
    /// Synthetic hosts per size in the sweep.
    pub per_size: usize,
    /// Cap on evaluation images drawn from the dataset (0 = all).
    pub max_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sizes: vec![16, 32, 64, 128],
            per_size: 4,
            max_images: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub mapping: MappingSection,
    pub training: TrainConfig,
    pub ecc: EccConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            mapping: MappingSection::default(),
            training: TrainConfig::default(),
            ecc: EccConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Flags that override config-file values when given.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML config file with [data], [model], [mapping], [training], [ecc], [eval] sections
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run name; outputs go to <run-dir>/<name>
    #[arg(long)]
    pub name: Option<String>,
    /// Seed for every random choice in the run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory (data.dir)
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Image side length after resizing (data.size)
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of coupling layers (model.coupling_layers)
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width of the coupling subnetworks (model.hidden_width)
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Gap half-width around zero for latent sampling (mapping.alpha)
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Initial learning rate (training.lr)
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size (training.batch)
    #[arg(long)]
    pub batch: Option<usize>,
    /// Stage-1 epochs (training.epochs)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stage-2 rounds (training.rounds)
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Iterations per stage-2 round (training.iters_per_round)
    #[arg(long)]
    pub iters: Option<usize>,
    /// Enable BCH error correction (ecc.enabled)
    #[arg(long)]
    pub ecc: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, UsageError> {
        toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Defaults, then the config file (if any), then the flags.
    pub fn resolve(flags: &Overrides) -> Result<Self, UsageError> {
        let mut c = match &flags.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt).+) => {
                if let Some(v) = flags.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(name => name);
        set!(seed => seed);
        set!(size => data.size);
        set!(layers => model.coupling_layers);
        set!(hidden => model.hidden_width);
        set!(alpha => mapping.alpha);
        set!(lr => training.lr);
        set!(batch => training.batch);
        set!(epochs => training.epochs);
        set!(rounds => training.rounds);
        set!(iters => training.iters_per_round);
        if flags.data.is_some() {
            c.data.dir = flags.data.clone();
        }
        if flags.ecc {
            c.ecc.enabled = true;
        }
        c.training.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |m: String| Err(UsageError(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name {:?} must be a plain directory name", self.name));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return bad("data.val_fraction must lie in [0, 1)".into());
        }
        self.flow().validate().map_err(|e| UsageError(format!("model: {e}")))?;
        if !(0.0..1.0).contains(&self.mapping.alpha) {
            return bad(format!("mapping.alpha must lie in [0, 1), got {}", self.mapping.alpha));
        }
        self.training.validate().map_err(|e| UsageError(format!("training: {e}")))?;
        if self.ecc.enabled {
            stegflow_core::payload::Bch::new(self.ecc.n, self.ecc.k).map_err(|e| UsageError(format!("ecc: {e}")))?;
        }
        if self.eval.sizes.iter().any(|&s| s == 0 || s % 2 != 0) {
            return bad("eval.sizes must be positive and even".into());
        }
        Ok(())
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            coupling_layers: self.model.coupling_layers,
            hidden_width: self.model.hidden_width,
            cond_width: self.model.cond_width,
            height: self.data.size,
            width: self.data.size,
            scale_clamp: self.model.scale_clamp,
        }
    }

    pub fn embedding(&self) -> EmbeddingSettings {
        EmbeddingSettings {
            alpha: self.mapping.alpha,
            ecc: self.ecc,
        }
    }

    /// `data.dir`, which must exist.
    pub fn data_dir(&self) -> Result<&Path, UsageError> {
        match &self.data.dir {
            None => Err(UsageError("missing required key data.dir (or --data)".into())),
            Some(dir) if !dir.is_dir() => Err(UsageError(format!("data.dir {} does not exist", dir.display()))),
            Some(dir) => Ok(dir),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\n[training]\nlr = 0.01\nbatch = 8\n[data]\nsize = 16\n").unwrap();
        let flags = Overrides {
            config: Some(path),
            batch: Some(4),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(&flags).unwrap();
        assert_eq!(c.training.lr, 0.01);
        assert_eq!(c.training.batch, 4);
        assert_eq!(c.training.seed, 3);
        assert_eq!(c.data.size, 16);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("[training]\nlearning_rate = 1.0\n").is_err());
        let flags = Overrides {
            alpha: Some(1.5),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(&flags).is_err());
        let err = RunConfig::default().data_dir().unwrap_err();
        assert!(err.0.contains("data.dir"));
    }
}
