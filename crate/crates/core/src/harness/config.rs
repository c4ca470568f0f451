use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AiaMember, AiaTraining, InitDistribution, Optimizer};
use crate::error::{Error, Result};
use crate::grad::{Backend, DistanceKind};
use crate::metrics::DEFAULT_RANK_TOL;
use crate::nn::ModelSpec;

use super::dataset::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Dra,
    Aia,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    Grid,
    /// One threshold per cell: the mean SSIM of the cell's restarts.
    Expectation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// A named architecture (`lenet-mini`, `lenet5-mini`, `fc2`) or a layer
    /// string such as `C4(3)-R-P(2)-F32-R-O4`.
    #[serde(default = "default_model")]
    pub name: String,
}

fn default_model() -> String {
    "lenet-mini".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { name: default_model() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 256,
            height: 8,
            width: 8,
            seed: 1,
        }
    }
}

/// Training applied to the freshly initialised model before measuring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            lr: 0.05,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    #[default]
    None,
    MixFactor {
        values: Vec<usize>,
    },
    /// Training epochs before the update is taken.
    Epochs {
        values: Vec<usize>,
    },
    MaskFraction {
        values: Vec<f64>,
    },
    MaskCount {
        values: Vec<usize>,
    },
    DpSigma {
        values: Vec<f64>,
        #[serde(default = "default_clip")]
        max_norm: f64,
    },
}

fn default_clip() -> f64 {
    1.0
}

/// One point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepPoint {
    None,
    Mix(usize),
    Epochs(usize),
    MaskFraction(f64),
    MaskCount(usize),
    Dp { sigma: f64, max_norm: f64 },
}

impl SweepPoint {
    pub fn value(&self) -> Option<f64> {
        match *self {
            SweepPoint::None => None,
            SweepPoint::Mix(n) | SweepPoint::Epochs(n) | SweepPoint::MaskCount(n) => Some(n as f64),
            SweepPoint::MaskFraction(f) => Some(f),
            SweepPoint::Dp { sigma, .. } => Some(sigma),
        }
    }

    pub fn mix_factor(&self) -> usize {
        match *self {
            SweepPoint::Mix(n) => n,
            _ => 0,
        }
    }
}

impl Sweep {
    pub fn points(&self) -> Vec<SweepPoint> {
        match self {
            Sweep::None => vec![SweepPoint::None],
            Sweep::MixFactor { values } => values.iter().map(|&v| SweepPoint::Mix(v)).collect(),
            Sweep::Epochs { values } => values.iter().map(|&v| SweepPoint::Epochs(v)).collect(),
            Sweep::MaskFraction { values } => values.iter().map(|&v| SweepPoint::MaskFraction(v)).collect(),
            Sweep::MaskCount { values } => values.iter().map(|&v| SweepPoint::MaskCount(v)).collect(),
            Sweep::DpSigma { values, max_norm } => values
                .iter()
                .map(|&sigma| SweepPoint::Dp {
                    sigma,
                    max_norm: *max_norm,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraSettings {
    pub steps: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub init: InitDistribution,
    /// One family member per distance kind.
    pub dist_kinds: Vec<DistanceKind>,
    /// Target samples per cell.
    pub targets: usize,
    pub backend: Backend,
}

impl Default for DraSettings {
    fn default() -> Self {
        Self {
            steps: 400,
            step_size: 0.1,
            optimizer: Optimizer::default(),
            init: InitDistribution::Uniform,
            dist_kinds: vec![DistanceKind::L2],
            targets: 2,
            backend: Backend::Analytic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AiaSettings {
    pub batch_size: usize,
    pub rows_per_label: usize,
    pub train_fraction: f64,
    pub members: Vec<AiaMember>,
    pub training: AiaTraining,
}

impl Default for AiaSettings {
    fn default() -> Self {
        Self {
            batch_size: 1,
            rows_per_label: 100,
            train_fraction: 0.7,
            members: AiaMember::family(),
            training: AiaTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivitySettings {
    /// Samples averaged for the Jacobian norm risk.
    pub jacobian_samples: usize,
    pub backend: Backend,
    pub rank_tol: f64,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        Self {
            jacobian_samples: 4,
            backend: Backend::Analytic,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

pub fn default_tau_grid() -> Vec<f64> {
    (1..=16)
        .map(|i| f64::from(i) * 0.05)
        .map(|t| (t * 100.0).round() / 100.0)
        .collect()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_restarts() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub attack: AttackKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Explicit layer sets; by default consecutive parameterised-layer pairs
    /// for reconstruction and single layers for attribute inference.
    #[serde(default)]
    pub layer_sets: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub dra: DraSettings,
    #[serde(default)]
    pub aia: AiaSettings,
    #[serde(default)]
    pub sensitivity: SensitivitySettings,
}

impl ScenarioConfig {
    pub fn new(name: impl Into<String>, attack: AttackKind) -> Self {
        Self {
            name: name.into(),
            attack,
            seeds: default_seeds(),
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            training: TrainingConfig::default(),
            sweep: Sweep::None,
            threshold_mode: ThresholdMode::Grid,
            tau_grid: default_tau_grid(),
            restarts: default_restarts(),
            layer_sets: None,
            dra: DraSettings::default(),
            aia: AiaSettings::default(),
            sensitivity: SensitivitySettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let shape = (1, self.dataset.height, self.dataset.width);
        let spec = match ModelSpec::named(&self.model.name, shape, NUM_CLASSES) {
            Ok(spec) => spec,
            Err(_) => ModelSpec::parse(shape, &self.model.name)?,
        };
        if spec.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "model has {} outputs but the dataset has {NUM_CLASSES} classes",
                spec.num_classes
            )));
        }
        Ok(spec)
    }

    pub fn resolved_layer_sets(&self, spec: &ModelSpec) -> Result<Vec<Vec<usize>>> {
        let layers = spec.param_layers();
        let sets = match &self.layer_sets {
            Some(sets) => sets.clone(),
            None => match self.attack {
                AttackKind::Dra if layers.len() >= 2 => layers.windows(2).map(<[usize]>::to_vec).collect(),
                AttackKind::Dra => vec![layers.clone()],
                AttackKind::Aia => layers.iter().map(|&l| vec![l]).collect(),
            },
        };
        for set in &sets {
            if set.is_empty() {
                return Err(Error::Config("empty layer set".into()));
            }
            if let Some(&l) = set.iter().find(|l| !layers.contains(l)) {
                return Err(Error::Config(format!("layer {l} has no parameters")));
            }
            if self.attack == AttackKind::Aia && set.len() != 1 {
                return Err(Error::Config("attribute inference layer sets hold one layer".into()));
            }
        }
        Ok(sets)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.restarts == 0 {
            return fail("restarts must be positive".into());
        }
        if self.tau_grid.is_empty() {
            return fail("tau_grid must not be empty".into());
        }
        if let Some(t) = self.tau_grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return fail(format!("tau {t} outside (0, 1)"));
        }
        let spec = self.model_spec().map_err(|e| Error::Config(e.to_string()))?;
        self.resolved_layer_sets(&spec)?;
        if self.dataset.n < 8 || self.dataset.height < 8 || self.dataset.width < 8 {
            return fail("dataset needs n >= 8 and height, width >= 8".into());
        }
        match &self.sweep {
            Sweep::MaskFraction { values } => {
                if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                    return fail(format!("mask fraction {v} outside (0, 1]"));
                }
            }
            Sweep::MaskCount { values } => {
                if values.contains(&0) {
                    return fail("mask count must be positive".into());
                }
            }
            Sweep::DpSigma { values, max_norm } => {
                if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                    return fail(format!("sigma {v} must be non-negative"));
                }
                if !(*max_norm > 0.0) {
                    return fail(format!("max_norm {max_norm} must be positive"));
                }
            }
            _ => {}
        }
        if self.sweep.points().is_empty() {
            return fail("sweep has no values".into());
        }
        match self.attack {
            AttackKind::Dra => {
                let d = &self.dra;
                if d.steps == 0 || d.targets == 0 || d.dist_kinds.is_empty() || !(d.step_size > 0.0) {
                    return fail("dra needs positive steps, targets, step_size and a distance kind".into());
                }
                let needed = d.targets
                    + self
                        .sweep
                        .points()
                        .iter()
                        .map(SweepPoint::mix_factor)
                        .max()
                        .unwrap_or(0);
                if needed > self.dataset.n {
                    return fail(format!(
                        "dra needs {needed} samples but the dataset has {}",
                        self.dataset.n
                    ));
                }
            }
            AttackKind::Aia => {
                let a = &self.aia;
                if !a.members.contains(&AiaMember::Constant) {
                    return fail("aia members must include constant".into());
                }
                if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
                    return fail("train_fraction must lie in (0, 1)".into());
                }
                if a.rows_per_label < 2 {
                    return fail("rows_per_label must be at least 2".into());
                }
                let pool = self.dataset.n / 2;
                if a.batch_size == 0 || a.batch_size > pool {
                    return fail(format!("aia batch_size must be in [1, {pool}]"));
                }
            }
        }
        if self.sensitivity.jacobian_samples == 0 || self.sensitivity.jacobian_samples > self.dataset.n {
            return fail("jacobian_samples must be in [1, n]".into());
        }
        Ok(())
    }
}
