//! Shared updates as an observer sees them: FedSGD gradients, FedAvg deltas,
//! and the aggregation, clipping/noise and masking applied before release.

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, GradientSet, ModelSpec, Params, Sample};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateMode {
    FedSgd,
    FedAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub max_norm: f64,
    pub sigma: f64,
    /// Clip each layer to `max_norm` separately instead of the whole update.
    #[serde(default)]
    pub per_layer: bool,
}

impl DpConfig {
    pub fn new(max_norm: f64, sigma: f64) -> Self {
        Self {
            max_norm,
            sigma,
            per_layer: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSelection {
    Fraction(f64),
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub selection: MaskSelection,
    pub selection_seed: u64,
}

impl MaskSpec {
    pub fn fraction(f: f64, seed: u64) -> Self {
        Self {
            selection: MaskSelection::Fraction(f),
            selection_seed: seed,
        }
    }

    pub fn count(k: usize, seed: u64) -> Self {
        Self {
            selection: MaskSelection::Count(k),
            selection_seed: seed,
        }
    }

    /// Number of entries retained from a layer of `size` entries.
    pub fn retained_len(&self, size: usize) -> Result<usize> {
        match self.selection {
            MaskSelection::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::invalid(format!("mask fraction {f} outside (0, 1]")));
                }
                Ok(((f * size as f64).ceil() as usize).clamp(1, size))
            }
            MaskSelection::Count(k) => {
                if k == 0 || k > size {
                    return Err(Error::invalid(format!("mask count {k} outside [1, {size}]")));
                }
                Ok(k)
            }
        }
    }

    /// Sorted retained flat indices for parameter layer `layer` of `size` entries.
    pub fn select(&self, layer: usize, size: usize) -> Result<Vec<usize>> {
        let k = self.retained_len(size)?;
        let mut r = rng::stream(self.selection_seed, layer as u64);
        let mut idx = index::sample(&mut r, size, k).into_vec();
        idx.sort_unstable();
        Ok(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: UpdateMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Option<f64>,
    pub mix_factor: usize,
    pub dp: Option<DpConfig>,
    pub mask: Option<MaskSpec>,
}

/// The update released to an observer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedUpdate {
    pub grads: GradientSet,
    pub provenance: Provenance,
    /// Retained flat indices per layer when masked. Entries outside the set
    /// are absent: their stored values are zeroed and must not be read.
    pub retained: Option<Vec<Option<Vec<usize>>>>,
}

impl SharedUpdate {
    fn plain(grads: GradientSet, provenance: Provenance) -> Self {
        Self {
            grads,
            provenance,
            retained: None,
        }
    }

    /// Observed entries of one layer: retained indices and their values.
    pub fn observed(&self, layer: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let flat = self.grads.layer_flat(layer)?;
        match self.retained_indices(layer) {
            Some(idx) => Ok((idx.to_vec(), idx.iter().map(|&i| flat[i]).collect())),
            None => Ok(((0..flat.len()).collect(), flat)),
        }
    }

    /// Observed values only.
    pub fn observed_values(&self, layer: usize) -> Result<Vec<f64>> {
        Ok(self.observed(layer)?.1)
    }

    pub fn retained_indices(&self, layer: usize) -> Option<&[usize]> {
        self.retained
            .as_ref()
            .and_then(|r| r.get(layer))
            .and_then(|r| r.as_deref())
    }

    pub fn is_masked(&self) -> bool {
        self.retained.is_some()
    }
}

/// Batch-mean gradients of one local batch, shared as is.
pub fn fed_sgd_update(spec: &ModelSpec, params: &Params, batch: &[Sample]) -> Result<SharedUpdate> {
    let (_, grads) = nn::backward(spec, params, batch)?;
    Ok(SharedUpdate::plain(
        grads,
        Provenance {
            mode: UpdateMode::FedSgd,
            epochs: 1,
            batch_size: batch.len(),
            lr: None,
            mix_factor: 0,
            dp: None,
            mask: None,
        },
    ))
}

/// Parameter delta after `epochs` of local mini-batch SGD.
pub fn fed_avg_update(
    spec: &ModelSpec,
    params: &Params,
    data: &[Sample],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<SharedUpdate> {
    let out = nn::train_tracked(spec, params, data, epochs, batch_size, lr, seed)?;
    Ok(SharedUpdate::plain(
        out.delta,
        Provenance {
            mode: UpdateMode::FedAvg,
            epochs,
            batch_size,
            lr: Some(lr),
            mix_factor: 0,
            dp: None,
            mask: None,
        },
    ))
}

/// Mean of the target update and `mix_factor` non-target updates.
pub fn aggregate_mixed(target: &SharedUpdate, nontargets: &[SharedUpdate], mix_factor: usize) -> Result<SharedUpdate> {
    if nontargets.len() != mix_factor {
        return Err(Error::invalid(format!(
            "mix factor {mix_factor} but {} non-target updates",
            nontargets.len()
        )));
    }
    if target.is_masked() || nontargets.iter().any(SharedUpdate::is_masked) {
        return Err(Error::invalid("aggregate before masking"));
    }
    let mut sum = target.grads.clone();
    for n in nontargets {
        sum = sum.add(&n.grads)?;
    }
    let mut grads = if mix_factor == 0 {
        sum
    } else {
        sum.scale(1.0 / (mix_factor + 1) as f64)
    };
    grads.batch_size = target.grads.batch_size;
    grads.epochs = target.grads.epochs;
    let mut provenance = target.provenance.clone();
    provenance.mix_factor = mix_factor;
    Ok(SharedUpdate::plain(grads, provenance))
}

/// L2 clipping to `max_norm` followed by i.i.d. Gaussian noise per entry.
pub fn dp_clip_noise(update: &SharedUpdate, dp: &DpConfig, seed: u64) -> Result<SharedUpdate> {
    if !(dp.max_norm > 0.0 && dp.max_norm.is_finite()) {
        return Err(Error::invalid(format!("max norm {} must be positive", dp.max_norm)));
    }
    if !(dp.sigma >= 0.0 && dp.sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma {} must be non-negative", dp.sigma)));
    }
    let clip = |norm: f64| if norm > dp.max_norm { dp.max_norm / norm } else { 1.0 };
    let mut grads = update.grads.clone();
    if dp.per_layer {
        for block in grads.blocks.iter_mut().flatten() {
            let norm = block.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = clip(norm);
            if s < 1.0 {
                block.weight.values_mut().iter_mut().for_each(|v| *v *= s);
                block.bias.values_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    } else {
        let s = clip(update.grads.l2_norm());
        if s < 1.0 {
            grads = grads.scale(s);
        }
    }
    if dp.sigma > 0.0 {
        let normal = Normal::new(0.0, dp.sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut r = rng::seeded(seed);
        for block in grads.blocks.iter_mut().flatten() {
            for v in block.weight.values_mut().iter_mut().chain(block.bias.values_mut()) {
                *v += normal.sample(&mut r);
            }
        }
    }
    if let Some(retained) = &update.retained {
        hide_absent(&mut grads, retained);
    }
    let mut provenance = update.provenance.clone();
    provenance.dp = Some(*dp);
    Ok(SharedUpdate {
        grads,
        provenance,
        retained: update.retained.clone(),
    })
}

fn hide_absent(grads: &mut GradientSet, retained: &[Option<Vec<usize>>]) {
    for (block, keep) in grads.blocks.iter_mut().zip(retained) {
        if let (Some(block), Some(keep)) = (block.as_mut(), keep) {
            let mut mask = vec![false; block.len()];
            keep.iter().for_each(|&i| mask[i] = true);
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    block.set_flat(i, 0.0);
                }
            }
        }
    }
}

/// Keeps a random subset of entries in every parameterised layer.
pub fn apply_mask(update: &SharedUpdate, mask: &MaskSpec) -> Result<SharedUpdate> {
    if update.is_masked() {
        return Err(Error::invalid("update is already masked"));
    }
    let retained = update
        .grads
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| b.as_ref().map(|b| mask.select(l, b.len())).transpose())
        .collect::<Result<Vec<_>>>()?;
    let mut grads = update.grads.clone();
    hide_absent(&mut grads, &retained);
    let mut provenance = update.provenance.clone();
    provenance.mask = Some(*mask);
    Ok(SharedUpdate {
        grads,
        provenance,
        retained: Some(retained),
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::nn::init_params;
    use crate::tensor::Tensor;

    fn setup() -> (ModelSpec, Params, Vec<Sample>) {
        let spec = ModelSpec::named("lenet-mini", (1, 8, 8), 4).unwrap();
        let params = init_params(&spec, 11).unwrap();
        let mut r = rng::seeded(5);
        let data = (0..6)
            .map(|i| {
                let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
                (x, i % 4)
            })
            .collect();
        (spec, params, data)
    }

    fn max_abs_diff(a: &GradientSet, b: &GradientSet) -> f64 {
        a.flat_values()
            .iter()
            .zip(b.flat_values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn fed_sgd_batch_semantics() {
        let (spec, params, data) = setup();
        let one = fed_sgd_update(&spec, &params, &data[..1]).unwrap();
        let (_, exact) = nn::backward(&spec, &params, &data[..1]).unwrap();
        assert_eq!(one.grads, exact);
        assert_eq!(one.provenance.mode, UpdateMode::FedSgd);
        let copies = fed_sgd_update(&spec, &params, &[data[0].clone(), data[0].clone()]).unwrap();
        assert_eq!(copies.grads.blocks, one.grads.blocks);
        let two = fed_sgd_update(&spec, &params, &data[..2]).unwrap();
        let other = fed_sgd_update(&spec, &params, &data[1..2]).unwrap();
        let mean = one.grads.add(&other.grads).unwrap().scale(0.5);
        assert!(max_abs_diff(&two.grads, &mean) < 1e-15);
        assert!(fed_sgd_update(&spec, &params, &[]).is_err());
    }

    #[test]
    fn fed_avg_single_full_batch_step_is_scaled_fed_sgd() {
        let (spec, params, data) = setup();
        let lr = 0.05;
        let avg = fed_avg_update(&spec, &params, &data, 1, data.len(), lr, 3).unwrap();
        let sgd = fed_sgd_update(&spec, &params, &data).unwrap();
        assert_eq!(avg.grads.blocks, sgd.grads.scale(-lr).blocks);
        let zero = fed_avg_update(&spec, &params, &data, 2, 2, 0.0, 3).unwrap();
        assert!(zero.grads.flat_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fed_avg_telescopes() {
        let (spec, params, data) = setup();
        let lr = 0.1;
        let n = data.len();
        let two = fed_avg_update(&spec, &params, &data, 2, n, lr, 3).unwrap();
        let first = fed_avg_update(&spec, &params, &data, 1, n, lr, 3).unwrap();
        let mid = nn::train(&spec, &params, &data, 1, n, lr, 3).unwrap();
        let second = fed_avg_update(&spec, &mid, &data, 1, n, lr, 3).unwrap();
        let sum = first.grads.add(&second.grads).unwrap();
        assert!(max_abs_diff(&sum, &two.grads) < 1e-12);
        let direct = GradientSet::delta(&params, &nn::train(&spec, &params, &data, 2, n, lr, 3).unwrap()).unwrap();
        assert!(max_abs_diff(&direct, &two.grads) < 1e-12);
    }

    #[test]
    fn mixing_averages() {
        let (spec, params, data) = setup();
        let ups: Vec<SharedUpdate> = data
            .iter()
            .map(|s| fed_sgd_update(&spec, &params, std::slice::from_ref(s)).unwrap())
            .collect();
        let t = &ups[0];
        assert_eq!(aggregate_mixed(t, &[], 0).unwrap().grads, t.grads);
        let same = aggregate_mixed(t, std::slice::from_ref(t), 1).unwrap();
        assert_eq!(same.grads.blocks, t.grads.blocks);
        assert_eq!(same.provenance.mix_factor, 1);

        let mixed = aggregate_mixed(t, &ups[1..4], 3).unwrap();
        let flat: Vec<Vec<f64>> = ups[..4].iter().map(|u| u.grads.flat_values()).collect();
        for (i, v) in mixed.grads.flat_values().iter().enumerate() {
            let direct = (flat[0][i] + flat[1][i] + flat[2][i] + flat[3][i]) / 4.0;
            assert!((v - direct).abs() < 1e-15);
        }
        let permuted = aggregate_mixed(t, &[ups[3].clone(), ups[1].clone(), ups[2].clone()], 3).unwrap();
        assert!(max_abs_diff(&permuted.grads, &mixed.grads) < 1e-15);
        assert!(aggregate_mixed(t, &ups[1..3], 3).is_err());
    }

    #[test]
    fn mixing_is_homogeneous() {
        let (spec, params, data) = setup();
        let ups: Vec<SharedUpdate> = data[..3]
            .iter()
            .map(|s| fed_sgd_update(&spec, &params, std::slice::from_ref(s)).unwrap())
            .collect();
        let scaled: Vec<SharedUpdate> = ups
            .iter()
            .map(|u| SharedUpdate {
                grads: u.grads.scale(2.5),
                ..u.clone()
            })
            .collect();
        let a = aggregate_mixed(&ups[0], &ups[1..], 2).unwrap();
        let b = aggregate_mixed(&scaled[0], &scaled[1..], 2).unwrap();
        assert!(max_abs_diff(&a.grads.scale(2.5), &b.grads) < 1e-14);
    }

    #[test]
    fn dp_clipping_and_noise() {
        let (spec, params, data) = setup();
        let u = fed_sgd_update(&spec, &params, &data[..1]).unwrap();
        let norm = u.grads.l2_norm();

        let loose = dp_clip_noise(&u, &DpConfig::new(norm * 2.0, 0.0), 1).unwrap();
        assert_eq!(loose.grads, u.grads);

        let doubled = SharedUpdate {
            grads: u.grads.scale(2.0 / norm),
            ..u.clone()
        };
        let halved = dp_clip_noise(&doubled, &DpConfig::new(1.0, 0.0), 1).unwrap();
        for (a, b) in halved.grads.flat_values().iter().zip(doubled.grads.flat_values()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        assert!(halved.grads.l2_norm() <= 1.0 + 1e-12);

        let noisy = dp_clip_noise(&u, &DpConfig::new(1.0, 0.1), 9).unwrap();
        assert_eq!(noisy, dp_clip_noise(&u, &DpConfig::new(1.0, 0.1), 9).unwrap());
        assert_ne!(noisy.grads, u.grads);
        assert!(dp_clip_noise(&u, &DpConfig::new(0.0, 0.1), 9).is_err());
        assert!(dp_clip_noise(&u, &DpConfig::new(1.0, -0.1), 9).is_err());
    }

    #[test]
    fn dp_per_layer_clips_each_layer() {
        let (spec, params, data) = setup();
        let u = fed_sgd_update(&spec, &params, &data[..1]).unwrap();
        let big = SharedUpdate {
            grads: u.grads.scale(1e3),
            ..u.clone()
        };
        let dp = DpConfig {
            max_norm: 0.5,
            sigma: 0.0,
            per_layer: true,
        };
        let out = dp_clip_noise(&big, &dp, 0).unwrap();
        for b in out.grads.blocks.iter().flatten() {
            let n = b.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn dp_noise_is_centered() {
        let spec = ModelSpec::parse((1, 1, 1), "O1").unwrap();
        let params = init_params(&spec, 0).unwrap();
        let zero = SharedUpdate::plain(
            GradientSet::zeros_like(&params),
            Provenance {
                mode: UpdateMode::FedSgd,
                epochs: 1,
                batch_size: 1,
                lr: None,
                mix_factor: 0,
                dp: None,
                mask: None,
            },
        );
        let dp = DpConfig::new(1.0, 0.1);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|s| dp_clip_noise(&zero, &dp, s).unwrap().grads.flat_values()[0])
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() <= 0.01, "{mean}");
    }

    #[test]
    fn masking_cardinality_and_determinism() {
        let (spec, params, data) = setup();
        let u = fed_sgd_update(&spec, &params, &data[..1]).unwrap();
        let all = apply_mask(&u, &MaskSpec::fraction(1.0, 3)).unwrap();
        for l in spec.param_layers() {
            let n = u.grads.block(l).unwrap().len();
            assert_eq!(all.retained_indices(l).unwrap(), (0..n).collect::<Vec<_>>().as_slice());
        }
        assert_eq!(all.grads, u.grads);

        let k = apply_mask(&u, &MaskSpec::count(5, 3)).unwrap();
        for l in spec.param_layers() {
            let idx = k.retained_indices(l).unwrap();
            assert_eq!(idx.len(), 5);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            let flat = u.grads.layer_flat(l).unwrap();
            let (_, vals) = k.observed(l).unwrap();
            assert_eq!(vals, idx.iter().map(|&i| flat[i]).collect::<Vec<_>>());
        }
        assert_eq!(k, apply_mask(&u, &MaskSpec::count(5, 3)).unwrap());

        let frac = apply_mask(&u, &MaskSpec::fraction(0.05, 1)).unwrap();
        for l in spec.param_layers() {
            let n = u.grads.block(l).unwrap().len();
            assert_eq!(
                frac.retained_indices(l).unwrap().len(),
                (0.05 * n as f64).ceil() as usize
            );
        }
        assert!(apply_mask(&u, &MaskSpec::count(41, 3)).is_err());
        assert!(apply_mask(&u, &MaskSpec::fraction(0.0, 3)).is_err());
        assert!(apply_mask(&frac, &MaskSpec::fraction(0.5, 3)).is_err());
    }
}
