//! Attribute inference: binary classifiers over per-layer gradient features.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{aggregate_mixed, apply_mask, dp_clip_noise, fed_sgd_update, DpConfig, MaskSpec};
use crate::nn::{ModelSpec, Params, Sample};
use crate::rng;

/// Members of the attack family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AiaMember {
    Logistic,
    /// One tanh hidden layer of the given width.
    Mlp {
        hidden: usize,
    },
    /// Always predicts 1/2.
    Constant,
}

impl AiaMember {
    pub fn family() -> Vec<AiaMember> {
        vec![AiaMember::Logistic, AiaMember::Mlp { hidden: 32 }, AiaMember::Constant]
    }

    pub fn name(&self) -> String {
        match self {
            AiaMember::Logistic => "logistic".into(),
            AiaMember::Mlp { hidden } => format!("mlp{hidden}"),
            AiaMember::Constant => "constant".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub layer: usize,
    pub retained: Option<Vec<usize>>,
    pub dim: usize,
}

/// Gradient feature rows with binary attribute labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub descriptor: FeatureDescriptor,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn select(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            descriptor: self.descriptor.clone(),
        }
    }

    /// Seeded split into `(train, eval)` with `train_fraction` of the rows in train.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(FeatureSet, FeatureSet)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction {train_fraction} outside (0, 1)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::seeded(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let (a, b) = order.split_at(cut.clamp(1, self.len().saturating_sub(1)));
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        Ok((self.select(&a), self.select(&b)))
    }
}

/// How gradient features are sampled from the two attribute pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiaSampling {
    pub batch_size: usize,
    /// Rows drawn from the pool without the attribute (label 0).
    pub rows_without: usize,
    /// Rows drawn from the pool with the attribute (label 1).
    pub rows_with: usize,
    /// Each row's update is averaged with this many updates of batches drawn
    /// from both pools.
    pub mix_factor: usize,
    pub dp: Option<DpConfig>,
    pub mask: Option<MaskSpec>,
}

impl AiaSampling {
    pub fn new(batch_size: usize, rows_per_label: usize) -> Self {
        Self {
            batch_size,
            rows_without: rows_per_label,
            rows_with: rows_per_label,
            mix_factor: 0,
            dp: None,
            mask: None,
        }
    }
}

/// Feature sets for several layers from one pass over the sampled batches.
/// Row `i` (label 0 rows first) uses batch stream `i` of `seed`.
pub fn build_aia_features(
    spec: &ModelSpec,
    params: &Params,
    with_attr: &[Sample],
    without_attr: &[Sample],
    sampling: &AiaSampling,
    layers: &[usize],
    seed: u64,
) -> Result<Vec<FeatureSet>> {
    if with_attr.is_empty() || without_attr.is_empty() {
        return Err(Error::Empty("attribute pool"));
    }
    let b = sampling.batch_size;
    if b == 0 || b > with_attr.len() || b > without_attr.len() {
        return Err(Error::invalid(format!(
            "batch size {b} must be in [1, min pool size {}]",
            with_attr.len().min(without_attr.len())
        )));
    }
    let geo = spec.geometry()?;
    for &l in layers {
        if !geo.get(l).is_some_and(|g| g.kind.has_params()) {
            return Err(Error::NoParameters(l));
        }
    }
    let n = sampling.rows_without + sampling.rows_with;
    let union: Vec<Sample> = if sampling.mix_factor > 0 {
        without_attr.iter().chain(with_attr).cloned().collect()
    } else {
        Vec::new()
    };
    let mut sets: Vec<FeatureSet> = layers
        .iter()
        .map(|&l| FeatureSet {
            rows: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            descriptor: FeatureDescriptor {
                layer: l,
                retained: None,
                dim: 0,
            },
        })
        .collect();
    for i in 0..n {
        let label = u8::from(i >= sampling.rows_without);
        let pool = if label == 1 { with_attr } else { without_attr };
        let mut r = rng::stream(seed, i as u64);
        let mut idx = index::sample(&mut r, pool.len(), b).into_vec();
        idx.sort_unstable();
        let batch: Vec<Sample> = idx.iter().map(|&k| pool[k].clone()).collect();
        let mut update = fed_sgd_update(spec, params, &batch)?;
        if sampling.mix_factor > 0 {
            let others = (0..sampling.mix_factor)
                .map(|_| {
                    let mut idx = index::sample(&mut r, union.len(), b).into_vec();
                    idx.sort_unstable();
                    let batch: Vec<Sample> = idx.iter().map(|&k| union[k].clone()).collect();
                    fed_sgd_update(spec, params, &batch)
                })
                .collect::<Result<Vec<_>>>()?;
            update = aggregate_mixed(&update, &others, sampling.mix_factor)?;
        }
        if let Some(dp) = &sampling.dp {
            update = dp_clip_noise(&update, dp, r.random())?;
        }
        if let Some(mask) = &sampling.mask {
            update = apply_mask(&update, mask)?;
        }
        for (set, &l) in sets.iter_mut().zip(layers) {
            let (retained, values) = update.observed(l)?;
            if i == 0 {
                set.descriptor.dim = values.len();
                set.descriptor.retained = update.retained_indices(l).is_some().then_some(retained);
            }
            set.rows.push(values);
            set.labels.push(label);
        }
    }
    Ok(sets)
}

/// Features for a single layer.
#[allow(clippy::too_many_arguments)]
pub fn build_aia_dataset(
    spec: &ModelSpec,
    params: &Params,
    with_attr: &[Sample],
    without_attr: &[Sample],
    sampling: &AiaSampling,
    layer: usize,
    seed: u64,
) -> Result<FeatureSet> {
    Ok(build_aia_features(spec, params, with_attr, without_attr, sampling, &[layer], seed)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AiaTraining {
    pub epochs: usize,
    pub lr: f64,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for AiaTraining {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.05,
            batch_size: 16,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Weights {
    Logistic {
        w: Vec<f64>,
        b: f64,
    },
    Mlp {
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiaModel {
    pub member: AiaMember,
    pub descriptor: FeatureDescriptor,
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Weights,
}

const P_MIN: f64 = 1e-15;

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(P_MIN, 1.0 - P_MIN)
}

impl Weights {
    /// Logit and, when `grad` is given, accumulates `dlogit * d logit/d weights`.
    fn logit(&self, x: &[f64], grad: Option<(&mut Weights, f64)>) -> f64 {
        match self {
            Weights::Constant => 0.0,
            Weights::Logistic { w, b } => {
                let z = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                if let Some((Weights::Logistic { w: gw, b: gb }, d)) = grad {
                    gw.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                    *gb += d;
                }
                z
            }
            Weights::Mlp { w1, b1, w2, b2 } => {
                let n = x.len();
                let h: Vec<f64> = b1
                    .iter()
                    .enumerate()
                    .map(|(j, bj)| (bj + w1[j * n..(j + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).tanh())
                    .collect();
                let z = b2 + w2.iter().zip(&h).map(|(a, c)| a * c).sum::<f64>();
                if let Some((
                    Weights::Mlp {
                        w1: g1,
                        b1: gb1,
                        w2: g2,
                        b2: gb2,
                    },
                    d,
                )) = grad
                {
                    *gb2 += d;
                    for j in 0..h.len() {
                        g2[j] += d * h[j];
                        let dh = d * w2[j] * (1.0 - h[j] * h[j]);
                        gb1[j] += dh;
                        g1[j * n..(j + 1) * n]
                            .iter_mut()
                            .zip(x)
                            .for_each(|(g, xi)| *g += dh * xi);
                    }
                }
                z
            }
        }
    }

    fn zeros_like(&self) -> Weights {
        match self {
            Weights::Constant => Weights::Constant,
            Weights::Logistic { w, .. } => Weights::Logistic {
                w: vec![0.0; w.len()],
                b: 0.0,
            },
            Weights::Mlp { w1, b1, w2, .. } => Weights::Mlp {
                w1: vec![0.0; w1.len()],
                b1: vec![0.0; b1.len()],
                w2: vec![0.0; w2.len()],
                b2: 0.0,
            },
        }
    }

    /// `self -= lr * (grad / n + decay * weights)`; biases are not decayed.
    fn descend(&mut self, grad: &Weights, lr: f64, n: f64, decay: f64) {
        let upd = |p: &mut [f64], g: &[f64], decay: f64| {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * (g / n + decay * *p));
        };
        match (self, grad) {
            (Weights::Logistic { w, b }, Weights::Logistic { w: gw, b: gb }) => {
                upd(w, gw, decay);
                *b -= lr * gb / n;
            }
            (
                Weights::Mlp { w1, b1, w2, b2 },
                Weights::Mlp {
                    w1: g1,
                    b1: gb1,
                    w2: g2,
                    b2: gb2,
                },
            ) => {
                upd(w1, g1, decay);
                upd(b1, gb1, 0.0);
                upd(w2, g2, decay);
                *b2 -= lr * gb2 / n;
            }
            _ => {}
        }
    }
}

fn standardizer(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        var.iter_mut()
            .zip(r)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    let mut scale = vec![1.0; d];
    for j in 0..d {
        let sd = (var[j] / n).sqrt();
        if sd > 0.0 {
            scale[j] = 1.0 / sd;
        } else {
            mean[j] = 0.0;
        }
    }
    (mean, scale)
}

impl AiaModel {
    fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.descriptor.dim {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: vec![self.descriptor.dim],
                actual: vec![x.len()],
            })
        }
    }

    /// Mean binary cross-entropy over a feature set.
    pub fn log_loss(&self, features: &FeatureSet) -> Result<f64> {
        if features.is_empty() {
            return Err(Error::Empty("feature set"));
        }
        if self.member == AiaMember::Constant {
            return Ok(std::f64::consts::LN_2);
        }
        let mut total = 0.0;
        for (x, &y) in features.rows.iter().zip(&features.labels) {
            let p = aia_predict(self, x)?;
            total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        Ok(total / features.len() as f64)
    }

    pub fn accuracy(&self, features: &FeatureSet) -> Result<f64> {
        if features.is_empty() {
            return Err(Error::Empty("feature set"));
        }
        let mut hits = 0;
        for (x, &y) in features.rows.iter().zip(&features.labels) {
            hits += usize::from((aia_predict(self, x)? > 0.5) == (y == 1));
        }
        Ok(hits as f64 / features.len() as f64)
    }
}

/// Probability that the attribute is present.
pub fn aia_predict(model: &AiaModel, x: &[f64]) -> Result<f64> {
    model.check_dim(x)?;
    if model.member == AiaMember::Constant {
        return Ok(0.5);
    }
    Ok(sigmoid(model.weights.logit(&model.transform(x), None)))
}

/// Fits one family member by mini-batch gradient descent on the binary
/// cross-entropy with L2 weight decay; features are standardised first.
pub fn train_aia(features: &FeatureSet, member: AiaMember, training: &AiaTraining, seed: u64) -> Result<AiaModel> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("need at least two feature rows"));
    }
    if !features.labels.contains(&0) || !features.labels.contains(&1) {
        return Err(Error::invalid("both attribute labels must be present"));
    }
    let d = features.descriptor.dim;
    if let Some(row) = features.rows.iter().find(|r| r.len() != d) {
        return Err(Error::Shape {
            expected: vec![d],
            actual: vec![row.len()],
        });
    }
    if !(training.lr > 0.0) || training.weight_decay < 0.0 {
        return Err(Error::invalid("learning rate must be positive and decay non-negative"));
    }
    let (mean, scale) = standardizer(&features.rows);
    let weights = match member {
        AiaMember::Constant => Weights::Constant,
        AiaMember::Logistic => Weights::Logistic {
            w: vec![0.0; d],
            b: 0.0,
        },
        AiaMember::Mlp { hidden } => {
            if hidden == 0 {
                return Err(Error::invalid("hidden width must be positive"));
            }
            let mut r = rng::stream(seed, u64::MAX);
            let a1 = 1.0 / (d.max(1) as f64).sqrt();
            let a2 = 1.0 / (hidden as f64).sqrt();
            Weights::Mlp {
                w1: (0..hidden * d).map(|_| r.random_range(-a1..=a1)).collect(),
                b1: vec![0.0; hidden],
                w2: (0..hidden).map(|_| r.random_range(-a2..=a2)).collect(),
                b2: 0.0,
            }
        }
    };
    let mut model = AiaModel {
        member,
        descriptor: features.descriptor.clone(),
        mean,
        scale,
        weights,
    };
    if member == AiaMember::Constant {
        return Ok(model);
    }
    let xs: Vec<Vec<f64>> = features.rows.iter().map(|r| model.transform(r)).collect();
    let bs = if training.batch_size == 0 {
        n
    } else {
        training.batch_size.min(n)
    };
    for epoch in 0..training.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if bs < n {
            order.shuffle(&mut rng::stream(seed, epoch as u64));
        }
        for chunk in order.chunks(bs) {
            let mut grad = model.weights.zeros_like();
            for &i in chunk {
                let z = model.weights.logit(&xs[i], None);
                let p = sigmoid(z);
                let dz = p - f64::from(features.labels[i]);
                model.weights.logit(&xs[i], Some((&mut grad, dz)));
            }
            model
                .weights
                .descend(&grad, training.lr, chunk.len() as f64, training.weight_decay);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, seed: u64, shuffled: bool) -> FeatureSet {
        let mut r = rng::seeded(seed);
        let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                let c = if y == 1 { 1.0 } else { -1.0 };
                vec![c + r.random_range(-0.5..0.5), c * 0.5 + r.random_range(-0.5..0.5)]
            })
            .collect();
        if shuffled {
            labels.shuffle(&mut r);
        }
        FeatureSet {
            rows,
            labels,
            descriptor: FeatureDescriptor {
                layer: 0,
                retained: None,
                dim: 2,
            },
        }
    }

    #[test]
    fn separable_toy_is_learned() {
        let data = toy(60, 1, false);
        let t = AiaTraining {
            weight_decay: 0.0,
            ..AiaTraining::default()
        };
        for member in [AiaMember::Logistic, AiaMember::Mlp { hidden: 32 }] {
            let m = train_aia(&data, member, &t, 0).unwrap();
            assert_eq!(m.accuracy(&data).unwrap(), 1.0);
            let held_out = toy(40, 2, false);
            assert!(m.log_loss(&held_out).unwrap() < 2f64.ln());
        }
    }

    #[test]
    fn shuffled_labels_give_chance_predictions() {
        let mut means = Vec::new();
        for seed in 0..5 {
            let train = toy(200, seed, true);
            let eval = toy(200, seed + 50, true);
            let m = train_aia(&train, AiaMember::Logistic, &AiaTraining::default(), seed).unwrap();
            let mut total = 0.0;
            for (x, &y) in eval.rows.iter().zip(&eval.labels) {
                let p = aia_predict(&m, x).unwrap();
                total += if y == 1 { p } else { 1.0 - p };
            }
            means.push(total / eval.len() as f64);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!((0.45..=0.55).contains(&mean), "{means:?}");
    }

    #[test]
    fn predictions_are_strict_probabilities() {
        let mut data = toy(40, 3, false);
        data.rows.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v *= 1e6));
        let m = train_aia(&data, AiaMember::Logistic, &AiaTraining::default(), 0).unwrap();
        for x in &data.rows {
            let p = aia_predict(&m, x).unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(p + (1.0 - p), 1.0);
        }
        let c = train_aia(&data, AiaMember::Constant, &AiaTraining::default(), 0).unwrap();
        assert_eq!(aia_predict(&c, &[3.0, -7.0]).unwrap(), 0.5);
        assert!(aia_predict(&c, &[3.0]).is_err());
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let data = toy(50, 4, false);
        let mut last = f64::INFINITY;
        for epochs in [0, 1, 2, 5, 10, 20, 40] {
            let t = AiaTraining {
                epochs,
                lr: 1e-3,
                batch_size: 0,
                weight_decay: 0.0,
            };
            let loss = train_aia(&data, AiaMember::Logistic, &t, 0)
                .unwrap()
                .log_loss(&data)
                .unwrap();
            assert!(loss <= last + 1e-15, "{loss} > {last}");
            last = loss;
        }
    }

    #[test]
    fn single_label_is_rejected() {
        let mut data = toy(10, 0, false);
        data.labels.fill(1);
        assert!(train_aia(&data, AiaMember::Logistic, &AiaTraining::default(), 0).is_err());
    }

    #[test]
    fn gradient_features_contract() {
        let spec = ModelSpec::named("lenet-mini", (1, 8, 8), 4).unwrap();
        let params = crate::nn::init_params(&spec, 0).unwrap();
        let pool = |seed: u64| -> Vec<Sample> {
            crate::attacks::random_reconstruction_baseline(
                (1, 8, 8),
                40,
                crate::attacks::InitDistribution::Uniform,
                seed,
            )
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, x)| (x, i % 4))
            .collect()
        };
        let (with, without) = (pool(1), pool(2));
        let sampling = AiaSampling::new(4, 50);
        let f = build_aia_dataset(&spec, &params, &with, &without, &sampling, 6, 9).unwrap();
        assert_eq!(f.len(), 100);
        assert_eq!(f.labels.iter().filter(|&&y| y == 1).count(), 50);
        assert_eq!(f.descriptor.dim, params.block(6).unwrap().len());
        assert!(f.rows.iter().all(|r| r.len() == f.descriptor.dim));
        assert_eq!(
            f,
            build_aia_dataset(&spec, &params, &with, &without, &sampling, 6, 9).unwrap()
        );

        let masked = AiaSampling {
            mask: Some(MaskSpec::count(7, 1)),
            ..sampling.clone()
        };
        let m = build_aia_dataset(&spec, &params, &with, &without, &masked, 6, 9).unwrap();
        assert_eq!(m.descriptor.dim, 7);
        assert_eq!(m.descriptor.retained.as_ref().map(Vec::len), Some(7));

        let big = AiaSampling::new(41, 5);
        assert!(build_aia_dataset(&spec, &params, &with, &without, &big, 6, 9).is_err());
        assert!(build_aia_dataset(&spec, &params, &with, &without, &sampling, 1, 9).is_err());
    }
}
