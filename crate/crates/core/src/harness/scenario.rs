//! Scenario execution: one cell per (seed, sweep point, layer set).

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{AttackKind, ScenarioConfig, SweepPoint, ThresholdMode};
use super::dataset::{synth_dataset, SyntheticDataset};
use super::report::{LeakageReport, Metric, ReportRow};
use crate::attacks::{
    build_aia_features, random_reconstruction_baseline, run_dra, train_aia, AiaSampling, DraConfig, FeatureSet,
};
use crate::error::{Error, Result};
use crate::grad::{
    aggregate_mixed, apply_mask, dp_clip_noise, fed_sgd_update, input_gradient_jacobian_layers, DpConfig, MaskSpec,
    SharedUpdate,
};
use crate::metrics::{
    grassmann_distance, jacobian_pnorm_risk, mean_gradients_by_attribute, ssim, success_probability,
    usable_latent_info, usable_original_info, PNorm, SampleProbabilities, Smoothing,
};
use crate::nn::{init_params, train, ModelSpec, Params, Sample, Target};
use crate::rng::derive;
use crate::tensor::Matrix;

// Tags for child seeds.
const TAG_INIT: u64 = 0x11;
const TAG_TRAIN: u64 = 0x12;
const TAG_TARGETS: u64 = 0x21;
const TAG_TARGET: u64 = 0x22;
const TAG_BASELINE: u64 = 0x23;
const TAG_AIA_ROWS: u64 = 0x31;
const TAG_AIA_SPLIT: u64 = 0x32;
const TAG_AIA_TRAIN: u64 = 0x33;
const TAG_MASK: u64 = 0x41;
const TAG_JACOBIAN: u64 = 0x51;

/// Errors that mean "the attack or metric broke down on this cell" rather
/// than "the scenario is wrong"; they become diverged rows.
fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::DegenerateGradient(_) | Error::VanishingGradient(_))
}

fn soften<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if is_numerical(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
    /// Record wall-clock time per cell. Off by default so reports are
    /// reproducible byte for byte.
    pub timings: bool,
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<LeakageReport> {
    run_scenario_with(config, RunOptions::default())
}

pub fn run_scenario_with(config: &ScenarioConfig, options: RunOptions) -> Result<LeakageReport> {
    config.validate()?;
    let d = &config.dataset;
    let data = synth_dataset(d.n, d.height, d.width, d.seed)?;
    run_on_dataset(config, &data, options)
}

/// Runs a scenario against a given dataset (its dimensions override the config's).
pub fn run_on_dataset(config: &ScenarioConfig, data: &SyntheticDataset, options: RunOptions) -> Result<LeakageReport> {
    let mut config = config.clone();
    config.dataset.n = data.len();
    config.dataset.height = data.height;
    config.dataset.width = data.width;
    config.validate()?;
    let spec = config.model_spec()?;
    let sets = config.resolved_layer_sets(&spec)?;
    let contexts: Vec<(u64, SweepPoint)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.sweep.points().into_iter().map(move |p| (s, p)))
        .collect();
    let job = || -> Result<Vec<ReportRow>> {
        let per_context: Vec<Vec<ReportRow>> = contexts
            .par_iter()
            .map(|&(seed, point)| {
                let ctx = Context {
                    config: &config,
                    spec: &spec,
                    data,
                    seed,
                    point,
                    timings: options.timings,
                };
                ctx.run(&sets)
            })
            .collect::<Result<_>>()?;
        Ok(per_context.into_iter().flatten().collect())
    };
    let rows = if options.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(job)?
    } else {
        job()?
    };
    Ok(LeakageReport::new(rows))
}

struct Context<'a> {
    config: &'a ScenarioConfig,
    spec: &'a ModelSpec,
    data: &'a SyntheticDataset,
    seed: u64,
    point: SweepPoint,
    timings: bool,
}

impl Context<'_> {
    fn run(&self, sets: &[Vec<usize>]) -> Result<Vec<ReportRow>> {
        let started = Instant::now();
        let params = self.params()?;
        let setup_ms = self.elapsed(started);
        match self.config.attack {
            AttackKind::Dra => {
                let mut rows = Vec::new();
                for set in sets {
                    let t = Instant::now();
                    let mut cell = self.dra_cell(&params, set)?;
                    let ms = setup_ms + self.elapsed(t);
                    cell.iter_mut().for_each(|r| r.runtime_ms = ms);
                    rows.extend(cell);
                }
                Ok(rows)
            }
            AttackKind::Aia => self.aia_cells(&params, sets, started),
        }
    }

    fn elapsed(&self, since: Instant) -> u64 {
        if self.timings {
            since.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn row(&self, layers: &[usize], metric: Metric, tau: Option<f64>, value: Option<f64>) -> ReportRow {
        ReportRow::new(
            &self.config.name,
            self.seed,
            layers,
            metric,
            self.point.value(),
            tau,
            value,
            0,
        )
    }

    /// Model parameters for this seed: fresh initialisation, then the
    /// configured (or swept) number of training epochs on the dataset.
    fn params(&self) -> Result<Params> {
        let init = init_params(self.spec, derive(self.seed, TAG_INIT))?;
        let epochs = match self.point {
            SweepPoint::Epochs(e) => e,
            _ => self.config.training.epochs,
        };
        if epochs == 0 {
            return Ok(init);
        }
        let t = &self.config.training;
        train(
            self.spec,
            &init,
            &self.data.samples(),
            epochs,
            t.batch_size,
            t.lr,
            derive(self.seed, TAG_TRAIN),
        )
    }

    fn dp(&self) -> Option<DpConfig> {
        match self.point {
            SweepPoint::Dp { sigma, max_norm } => Some(DpConfig::new(max_norm, sigma)),
            _ => None,
        }
    }

    fn mask(&self, seed: u64) -> Option<MaskSpec> {
        match self.point {
            SweepPoint::MaskFraction(f) => Some(MaskSpec::fraction(f, seed)),
            SweepPoint::MaskCount(k) => Some(MaskSpec::count(k, seed)),
            _ => None,
        }
    }

    /// Samples in a seeded order; reconstruction targets come first.
    fn sample_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut crate::rng::seeded(derive(self.seed, TAG_TARGETS)));
        order
    }

    /// The update an observer sees for one target sample under the sweep's
    /// aggregation or defence.
    fn observed(&self, params: &Params, samples: &[Sample], order: &[usize], t: usize) -> Result<SharedUpdate> {
        let target = &samples[order[t]];
        let mut update = fed_sgd_update(self.spec, params, std::slice::from_ref(target))?;
        let tseed = derive(self.seed, TAG_TARGET ^ ((t as u64) << 8));
        let n = self.point.mix_factor();
        if n > 0 {
            let mut pool: Vec<usize> = order[self.config.dra.targets..].to_vec();
            pool.shuffle(&mut crate::rng::seeded(tseed));
            let others = pool[..n]
                .iter()
                .map(|&i| fed_sgd_update(self.spec, params, std::slice::from_ref(&samples[i])))
                .collect::<Result<Vec<_>>>()?;
            update = aggregate_mixed(&update, &others, n)?;
        }
        if let Some(dp) = self.dp() {
            update = dp_clip_noise(&update, &dp, tseed)?;
        }
        if let Some(mask) = self.mask(derive(tseed, TAG_MASK)) {
            update = apply_mask(&update, &mask)?;
        }
        Ok(update)
    }

    fn dra_cell(&self, params: &Params, layers: &[usize]) -> Result<Vec<ReportRow>> {
        let cfg = self.config;
        let samples = self.data.samples();
        let order = self.sample_order();
        let shape = self.spec.input_shape;
        let members = &cfg.dra.dist_kinds;

        // ssims[target][member] holds one value per restart.
        let mut ssims: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.dra.targets);
        let mut baselines: Vec<Vec<f64>> = Vec::with_capacity(cfg.dra.targets);
        let mut failed = false;
        for t in 0..cfg.dra.targets {
            let truth = &samples[order[t]];
            let observed = self.observed(params, &samples, &order, t)?;
            let tseed = derive(self.seed, TAG_TARGET ^ ((t as u64) << 8));
            let mut per_member = Vec::with_capacity(members.len());
            for (m, &kind) in members.iter().enumerate() {
                let dra = DraConfig {
                    dist_kind: kind,
                    steps: cfg.dra.steps,
                    step_size: cfg.dra.step_size,
                    optimizer: cfg.dra.optimizer,
                    restarts: cfg.restarts,
                    init: cfg.dra.init,
                    layer_subset: layers.to_vec(),
                    seed: derive(tseed, m as u64),
                    backend: cfg.dra.backend,
                };
                let runs = run_dra(self.spec, params, &observed, Some(truth), &dra)?;
                failed |= runs.iter().any(|r| !r.final_distance.is_finite());
                per_member.push(runs.iter().map(|r| r.ssim.unwrap_or(0.0)).collect::<Vec<_>>());
            }
            ssims.push(per_member);
            let guesses =
                random_reconstruction_baseline(shape, cfg.restarts, cfg.dra.init, derive(tseed, TAG_BASELINE))?;
            baselines.push(guesses.iter().map(|g| ssim(&truth.0, g, 1.0)).collect::<Result<_>>()?);
        }

        let taus = match cfg.threshold_mode {
            ThresholdMode::Grid => cfg.tau_grid.clone(),
            ThresholdMode::Expectation => {
                let all: Vec<f64> = ssims.iter().flatten().flatten().copied().collect();
                let mean = all.iter().sum::<f64>() / all.len() as f64;
                vec![mean.clamp(0.01, 0.99)]
            }
        };
        let names: Vec<String> = members.iter().map(|k| format!("{k:?}").to_lowercase()).collect();
        let mut rows = Vec::new();
        for &tau in &taus {
            let mut per_sample = Vec::with_capacity(ssims.len());
            let mut success = 0.0;
            for (s, b) in ssims.iter().zip(&baselines) {
                let probs = s
                    .iter()
                    .map(|m| success_probability(m, tau, Smoothing::Laplace))
                    .collect::<Result<Vec<_>>>()?;
                per_sample.push(SampleProbabilities {
                    members: probs,
                    baseline: success_probability(b, tau, Smoothing::Laplace)?,
                });
                let raw = s
                    .iter()
                    .map(|m| success_probability(m, tau, Smoothing::None))
                    .collect::<Result<Vec<_>>>()?;
                success += raw.into_iter().fold(0.0, f64::max);
            }
            let info = usable_original_info(&per_sample, &names)?;
            let ok = |v: f64| (!failed).then_some(v);
            rows.push(self.row(layers, Metric::UsableOriginal, Some(tau), ok(info.value)));
            rows.push(self.row(layers, Metric::SuccessProb, Some(tau), ok(success / ssims.len() as f64)));
        }
        let jac: Vec<usize> = order[..cfg.dra.targets.min(cfg.sensitivity.jacobian_samples)].to_vec();
        rows.extend(self.jacobian_rows(params, &samples, &jac, layers)?);
        Ok(rows)
    }

    fn jacobian_rows(
        &self,
        params: &Params,
        samples: &[Sample],
        idx: &[usize],
        layers: &[usize],
    ) -> Result<Vec<ReportRow>> {
        // Averaging with N other updates scales the target's contribution by 1/(N+1).
        let scale = 1.0 / (self.point.mix_factor() + 1) as f64;
        let mut mats: Vec<Matrix> = Vec::with_capacity(idx.len());
        for &i in idx {
            let (x, y) = &samples[i];
            let j = input_gradient_jacobian_layers(
                self.spec,
                params,
                x,
                &Target::Class(*y),
                layers,
                self.config.sensitivity.backend,
            )?;
            let mut m = j.matrix;
            m.values.iter_mut().for_each(|v| *v *= scale);
            mats.push(m);
        }
        [
            (Metric::JacF, PNorm::Frobenius),
            (Metric::Jac1, PNorm::One),
            (Metric::JacInf, PNorm::Inf),
        ]
        .into_iter()
        .map(|(metric, p)| Ok(self.row(layers, metric, None, Some(jacobian_pnorm_risk(&mats, p)?.value))))
        .collect()
    }

    fn aia_cells(&self, params: &Params, sets: &[Vec<usize>], started: Instant) -> Result<Vec<ReportRow>> {
        let cfg = self.config;
        let (without, with) = self.data.attribute_pools();
        let layers: Vec<usize> = sets.iter().map(|s| s[0]).collect();
        let rows_seed = derive(self.seed, TAG_AIA_ROWS);
        let sampling = AiaSampling {
            batch_size: cfg.aia.batch_size,
            rows_without: cfg.aia.rows_per_label,
            rows_with: cfg.aia.rows_per_label,
            mix_factor: self.point.mix_factor(),
            dp: self.dp(),
            mask: self.mask(derive(rows_seed, TAG_MASK)),
        };
        let features = build_aia_features(self.spec, params, &with, &without, &sampling, &layers, rows_seed)?;
        let shared_ms = self.elapsed(started);
        let samples = self.data.samples();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut crate::rng::seeded(derive(self.seed, TAG_JACOBIAN)));
        let jac_idx = &order[..cfg.sensitivity.jacobian_samples];

        let mut rows = Vec::new();
        for (set, feats) in sets.iter().zip(&features) {
            let t = Instant::now();
            let latent = self.latent(feats)?;
            let mut cell = vec![self.row(set, Metric::UsableLatent, None, latent)];
            let grass = soften(
                mean_gradients_by_attribute(self.spec, params, &without, &with, set[0])
                    .and_then(|(g0, g1)| grassmann_distance(&g0, &g1, cfg.sensitivity.rank_tol)),
            )?;
            cell.push(self.row(set, Metric::Grassmann, None, grass.map(|g| g.value)));
            cell.extend(self.jacobian_rows(params, &samples, jac_idx, set)?);
            let ms = shared_ms + self.elapsed(t);
            cell.iter_mut().for_each(|r| r.runtime_ms = ms);
            rows.extend(cell);
        }
        Ok(rows)
    }

    fn latent(&self, feats: &FeatureSet) -> Result<Option<f64>> {
        let cfg = &self.config.aia;
        let (train_set, eval_set) = feats.split(cfg.train_fraction, derive(self.seed, TAG_AIA_SPLIT))?;
        if !train_set.labels.contains(&0) || !train_set.labels.contains(&1) {
            return Err(Error::Config("training split holds a single attribute value".into()));
        }
        let family = cfg
            .members
            .iter()
            .map(|&m| train_aia(&train_set, m, &cfg.training, derive(self.seed, TAG_AIA_TRAIN)))
            .collect::<Result<Vec<_>>>()?;
        let v = usable_latent_info(&eval_set, &family)?;
        Ok(v.value.is_finite().then_some(v.value))
    }
}
