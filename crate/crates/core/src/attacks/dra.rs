//! Gradient-matching data reconstruction with random restarts.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::label::{infer_label, output_layer};
use crate::error::{Error, Result};
use crate::grad::{Backend, DistanceKind, DummyLabel, Objective, SharedUpdate};
use crate::metrics::ssim;
use crate::nn::{check_input, ModelSpec, Params, Sample};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDistribution {
    /// Standard normal per entry.
    Gaussian,
    /// Uniform on `[0, 1)` per entry.
    #[default]
    Uniform,
}

impl InitDistribution {
    pub fn mean(self) -> f64 {
        match self {
            InitDistribution::Gaussian => 0.0,
            InitDistribution::Uniform => 0.5,
        }
    }

    fn draw(self, n: usize, r: &mut rng::Rng) -> Vec<f64> {
        match self {
            InitDistribution::Gaussian => (0..n).map(|_| StandardNormal.sample(r)).collect(),
            InitDistribution::Uniform => (0..n).map(|_| r.random::<f64>()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraConfig {
    pub dist_kind: DistanceKind,
    pub steps: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub restarts: usize,
    pub init: InitDistribution,
    pub layer_subset: Vec<usize>,
    pub seed: u64,
    pub backend: Backend,
}

impl DraConfig {
    pub fn new(layer_subset: Vec<usize>, seed: u64) -> Self {
        Self {
            dist_kind: DistanceKind::L2,
            steps: 400,
            step_size: 0.1,
            optimizer: Optimizer::default(),
            restarts: 10,
            init: InitDistribution::Uniform,
            layer_subset,
            seed,
            backend: Backend::Analytic,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::invalid("steps and restarts must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step size {} must be positive", self.step_size)));
        }
        if self.layer_subset.is_empty() {
            return Err(Error::Empty("layer subset"));
        }
        if let Optimizer::Adam { beta1, beta2 } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                return Err(Error::invalid("Adam betas must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// How the reconstruction's label was obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSource {
    Inferred,
    /// Jointly optimised; holds the final dummy logits.
    Optimised(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraRun {
    pub reconstruction: Tensor,
    pub label: usize,
    pub label_source: LabelSource,
    /// Distance before each optimisation step (`steps` entries). Entries after
    /// a failure are NaN.
    pub trace: Vec<f64>,
    pub final_distance: f64,
    pub restart: usize,
    pub seed: u64,
    pub diverged: bool,
    /// SSIM against the true input when it is known.
    pub ssim: Option<f64>,
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, opt: Optimizer) {
        match opt {
            Optimizer::GradientDescent => theta.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
            Optimizer::Adam { beta1, beta2 } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..theta.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Label known from the update when the output layer is observed and the
/// sign rule is unambiguous.
fn known_label(observed: &SharedUpdate, layers: &[usize]) -> Option<usize> {
    let out = output_layer(observed).ok()?;
    if layers.contains(&out) {
        infer_label(observed).ok()
    } else {
        None
    }
}

fn optimise(
    obj: &Objective<'_>,
    x0: Vec<f64>,
    logits0: Option<Vec<f64>>,
    label: Option<usize>,
    config: &DraConfig,
) -> (Vec<f64>, Option<Vec<f64>>, Vec<f64>, Result<f64>) {
    let nx = x0.len();
    let mut theta = x0;
    if let Some(l) = &logits0 {
        theta.extend_from_slice(l);
    }
    let mut state = OptState::new(theta.len());
    let mut trace = Vec::with_capacity(config.steps);
    let eval = |theta: &[f64], grad: bool| {
        let lab = match label {
            Some(y) => DummyLabel::Fixed(y),
            None => DummyLabel::Logits(&theta[nx..]),
        };
        if grad {
            obj.gradient(&theta[..nx], lab, config.backend)
        } else {
            obj.value(&theta[..nx], lab).map(|d| (d, Vec::new(), Vec::new()))
        }
    };
    let mut failure = None;
    for _ in 0..config.steps {
        match eval(&theta, true) {
            Ok((d, dx, dl)) if d.is_finite() => {
                trace.push(d);
                let mut g = dx;
                if label.is_none() {
                    g.extend(dl);
                }
                state.step(&mut theta, &g, config.step_size, config.optimizer);
            }
            Ok((d, ..)) => {
                failure = Some(Error::DegenerateGradient(format!("non-finite distance {d}")));
                break;
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let last = match failure {
        Some(e) => Err(e),
        None => eval(&theta, false).map(|(d, ..)| d),
    };
    trace.resize(config.steps, f64::NAN);
    let logits = logits0.map(|_| theta[nx..].to_vec());
    theta.truncate(nx);
    (theta, logits, trace, last)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    spec: &ModelSpec,
    x: Vec<f64>,
    logits: Option<Vec<f64>>,
    label: Option<usize>,
    trace: Vec<f64>,
    last: Result<f64>,
    truth: Option<&Sample>,
    restart: usize,
    seed: u64,
) -> Result<DraRun> {
    let (c, h, w) = spec.input_shape;
    let initial = trace[0];
    let (final_distance, diverged) = match last {
        Ok(d) if d.is_finite() => (d, !(d <= initial)),
        Ok(d) => (d, true),
        Err(_) => (f64::NAN, true),
    };
    let reconstruction = Tensor::from_parts(vec![c, h, w], x);
    let (label, label_source) = match (label, logits) {
        (Some(y), _) => (y, LabelSource::Inferred),
        (None, Some(l)) => (crate::nn::argmax(&l), LabelSource::Optimised(l)),
        (None, None) => unreachable!("label is either inferred or optimised"),
    };
    let ssim = match truth {
        Some((x_true, _)) if reconstruction.values().iter().all(|v| v.is_finite()) => {
            Some(ssim(x_true, &reconstruction, 1.0)?)
        }
        Some(_) => Some(0.0),
        None => None,
    };
    Ok(DraRun {
        reconstruction,
        label,
        label_source,
        trace,
        final_distance,
        restart,
        seed,
        diverged,
        ssim,
    })
}

/// One restart of the attack.
pub fn run_restart(
    spec: &ModelSpec,
    params: &Params,
    observed: &SharedUpdate,
    truth: Option<&Sample>,
    config: &DraConfig,
    restart: usize,
) -> Result<DraRun> {
    config.validate()?;
    let obj = Objective::new(spec, params, observed, config.dist_kind, &config.layer_subset)?;
    let label = known_label(observed, &config.layer_subset);
    let mut r = rng::stream(config.seed, restart as u64);
    let x0 = config.init.draw(spec.input_len(), &mut r);
    let logits0 = label
        .is_none()
        .then(|| InitDistribution::Gaussian.draw(spec.num_classes, &mut r));
    let (x, logits, trace, last) = optimise(&obj, x0, logits0, label, config);
    finish(spec, x, logits, label, trace, last, truth, restart, config.seed)
}

/// Runs `config.restarts` independent restarts; restart `r` draws its dummy
/// from stream `r` of `config.seed`.
pub fn run_dra(
    spec: &ModelSpec,
    params: &Params,
    observed: &SharedUpdate,
    truth: Option<&Sample>,
    config: &DraConfig,
) -> Result<Vec<DraRun>> {
    config.validate()?;
    Objective::new(spec, params, observed, config.dist_kind, &config.layer_subset)?;
    if let Some((x, _)) = truth {
        check_input(spec, x)?;
    }
    (0..config.restarts)
        .into_par_iter()
        .map(|r| run_restart(spec, params, observed, truth, config, r))
        .collect()
}

/// Runs the optimiser from a given starting point instead of a random draw.
pub fn reconstruct_from(
    spec: &ModelSpec,
    params: &Params,
    observed: &SharedUpdate,
    start: &Tensor,
    truth: Option<&Sample>,
    config: &DraConfig,
) -> Result<DraRun> {
    config.validate()?;
    check_input(spec, start)?;
    let obj = Objective::new(spec, params, observed, config.dist_kind, &config.layer_subset)?;
    let label = known_label(observed, &config.layer_subset);
    let logits0 = label.is_none().then(|| vec![0.0; spec.num_classes]);
    let (x, logits, trace, last) = optimise(&obj, start.values().to_vec(), logits0, label, config);
    finish(spec, x, logits, label, trace, last, truth, 0, config.seed)
}

/// Random guesses drawn like the attack's dummies, the reference point for
/// how well one can do without gradients.
pub fn random_reconstruction_baseline(
    input_shape: (usize, usize, usize),
    restarts: usize,
    init: InitDistribution,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if restarts == 0 {
        return Err(Error::invalid("baseline needs at least one draw"));
    }
    let (c, h, w) = input_shape;
    Ok((0..restarts)
        .map(|r| {
            let mut g = rng::stream(seed, r as u64);
            Tensor::from_parts(vec![c, h, w], init.draw(c * h * w, &mut g))
        })
        .collect())
}
