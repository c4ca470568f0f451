use serde::{Deserialize, Serialize};

use super::update::SharedUpdate;
use crate::error::{Error, Result};
use crate::nn::GradientSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Squared Euclidean distance.
    L2,
    /// One minus cosine similarity of the concatenated entries.
    Cosine,
}

/// Flat gather plan: for each layer of the subset, the observed indices
/// (`None` means every entry) in concatenation order.
#[derive(Debug, Clone)]
pub(crate) struct Gather {
    pub layers: Vec<(usize, Option<Vec<usize>>)>,
}

impl Gather {
    pub fn new(grads: &GradientSet, retained: Option<&SharedUpdate>, layers: &[usize]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer subset"));
        }
        let mut out = Vec::with_capacity(layers.len());
        for &l in layers {
            if grads.block(l).is_none() {
                return Err(Error::NoParameters(l));
            }
            out.push((l, retained.and_then(|u| u.retained_indices(l)).map(<[usize]>::to_vec)));
        }
        Ok(Self { layers: out })
    }

    /// Concatenates the selected entries of per-layer `(weight, bias)` blocks.
    pub fn collect<S: Copy>(&self, blocks: &[Option<(Vec<S>, Vec<S>)>]) -> Vec<S> {
        let mut out = Vec::new();
        for (l, idx) in &self.layers {
            let (w, b) = blocks[*l].as_ref().expect("gathered layer has gradients");
            let at = |i: usize| if i < w.len() { w[i] } else { b[i - w.len()] };
            match idx {
                Some(idx) => out.extend(idx.iter().map(|&i| at(i))),
                None => out.extend(w.iter().chain(b).copied()),
            }
        }
        out
    }

    pub fn collect_set(&self, grads: &GradientSet) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (l, idx) in &self.layers {
            let flat = grads.layer_flat(*l)?;
            match idx {
                Some(idx) => out.extend(idx.iter().map(|&i| flat[i])),
                None => out.extend(flat),
            }
        }
        Ok(out)
    }
}

/// Distance between candidate entries `hat` and observed entries `obs`.
pub(crate) fn distance_values<S: Scalar>(hat: &[S], obs: &[f64], kind: DistanceKind) -> Result<S> {
    if hat.len() != obs.len() {
        return Err(Error::Shape {
            expected: vec![obs.len()],
            actual: vec![hat.len()],
        });
    }
    match kind {
        DistanceKind::L2 => {
            let mut acc = S::zero();
            for (&h, &o) in hat.iter().zip(obs) {
                let d = h - S::cst(o);
                acc = acc + d * d;
            }
            Ok(acc)
        }
        DistanceKind::Cosine => {
            let obs_norm = obs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut dot = S::zero();
            let mut sq = S::zero();
            for (&h, &o) in hat.iter().zip(obs) {
                dot = dot + h.scale(o);
                sq = sq + h * h;
            }
            if obs_norm == 0.0 || sq.value() == 0.0 || !sq.value().is_finite() {
                return Err(Error::DegenerateGradient(format!(
                    "cosine distance with norms {} and {obs_norm}",
                    sq.value().sqrt()
                )));
            }
            Ok(S::cst(1.0) - dot / sq.sqrt().scale(obs_norm))
        }
    }
}

/// Distance between two gradient sets restricted to `layers`.
pub fn grad_distance(g_hat: &GradientSet, g_obs: &GradientSet, kind: DistanceKind, layers: &[usize]) -> Result<f64> {
    let plan = Gather::new(g_obs, None, layers)?;
    distance_values(&plan.collect_set(g_hat)?, &plan.collect_set(g_obs)?, kind)
}

/// Distance between a candidate gradient set and an observed update; entries
/// the update does not reveal are excluded.
pub fn update_distance(
    g_hat: &GradientSet,
    observed: &SharedUpdate,
    kind: DistanceKind,
    layers: &[usize],
) -> Result<f64> {
    let plan = Gather::new(&observed.grads, Some(observed), layers)?;
    distance_values(&plan.collect_set(g_hat)?, &plan.collect_set(&observed.grads)?, kind)
}
