//! Derivatives of gradients with respect to the input: the gradient-matching
//! objective used by reconstruction attacks and the input-gradient Jacobian.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{distance_values, DistanceKind, Gather};
use super::update::SharedUpdate;
use crate::error::{Error, Result};
use crate::nn::{check_input, sample_grads, Head, LayerGeom, ModelSpec, Params, Target};
use crate::scalar::{Dual, Scalar, Tape};
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    FiniteDifference,
    Analytic,
}

/// Central-difference step for coordinate value `v`.
pub(crate) fn fd_step(v: f64) -> f64 {
    f64::EPSILON.cbrt() * v.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGradient {
    pub distance: f64,
    pub d_x: Tensor,
    pub d_logits: Vec<f64>,
}

/// How the dummy label enters the objective.
#[derive(Debug, Clone, Copy)]
pub(crate) enum DummyLabel<'a> {
    /// Trainable logits passed through softmax.
    Logits(&'a [f64]),
    /// A known class, held fixed.
    Fixed(usize),
}

fn softmax_s<S: Scalar>(z: &[S]) -> Vec<S> {
    let m = z.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = z.iter().map(|&v| (v - S::cst(m)).exp()).collect();
    let mut s = e[0];
    for &v in &e[1..] {
        s = s + v;
    }
    e.into_iter().map(|v| v / s).collect()
}

fn onehot<S: Scalar>(y: usize, k: usize) -> Vec<S> {
    (0..k).map(|i| S::cst(if i == y { 1.0 } else { 0.0 })).collect()
}

/// The gradient-matching objective `D(grad(x', y'), g_obs)` for one observed update.
pub(crate) struct Objective<'a> {
    geo: Vec<LayerGeom>,
    params: &'a Params,
    plan: Gather,
    obs: Vec<f64>,
    kind: DistanceKind,
    lowest: usize,
    num_classes: usize,
}

impl<'a> Objective<'a> {
    pub fn new(
        spec: &ModelSpec,
        params: &'a Params,
        observed: &SharedUpdate,
        kind: DistanceKind,
        layers: &[usize],
    ) -> Result<Self> {
        let geo = spec.geometry()?;
        params.check_against(spec)?;
        if !observed.grads.is_congruent(&crate::nn::GradientSet::zeros_like(params)) {
            return Err(Error::invalid("observed update does not match the model"));
        }
        let plan = Gather::new(&observed.grads, Some(observed), layers)?;
        let obs = plan.collect_set(&observed.grads)?;
        let lowest = *layers.iter().min().expect("non-empty subset");
        Ok(Self {
            geo,
            params,
            plan,
            obs,
            kind,
            lowest,
            num_classes: spec.num_classes,
        })
    }

    fn check_label(&self, label: DummyLabel<'_>) -> Result<()> {
        match label {
            DummyLabel::Logits(l) if l.len() != self.num_classes => Err(Error::Shape {
                expected: vec![self.num_classes],
                actual: vec![l.len()],
            }),
            DummyLabel::Fixed(y) if y >= self.num_classes => Err(Error::Index {
                index: y,
                size: self.num_classes,
            }),
            _ => Ok(()),
        }
    }

    fn eval<S: Scalar>(&self, x: &[S], target: Vec<S>) -> Result<S> {
        let g = sample_grads(&self.geo, self.params, x, &Head::CrossEntropy(target), self.lowest);
        distance_values(&self.plan.collect(&g.blocks), &self.obs, self.kind)
    }

    pub fn value(&self, x: &[f64], label: DummyLabel<'_>) -> Result<f64> {
        self.check_label(label)?;
        let target = match label {
            DummyLabel::Logits(l) => softmax_s(l),
            DummyLabel::Fixed(y) => onehot(y, self.num_classes),
        };
        self.eval(x, target)
    }

    /// Distance and its gradients with respect to `x` and the label logits
    /// (zeros for a fixed label), by reverse-mode differentiation.
    pub fn analytic(&self, x: &[f64], label: DummyLabel<'_>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_label(label)?;
        let tape = Tape::with_capacity(1 << 16);
        let xs: Vec<_> = x.iter().map(|&v| tape.var(v)).collect();
        let (ls, target) = match label {
            DummyLabel::Logits(l) => {
                let ls: Vec<_> = l.iter().map(|&v| tape.var(v)).collect();
                let t = softmax_s(&ls);
                (ls, t)
            }
            DummyLabel::Fixed(y) => (Vec::new(), onehot(y, self.num_classes)),
        };
        let d = self.eval(&xs, target)?;
        let adj = tape.adjoints(d);
        let dx = xs.iter().map(|&v| adj.wrt(v)).collect();
        let dl = match label {
            DummyLabel::Logits(_) => ls.iter().map(|&v| adj.wrt(v)).collect(),
            DummyLabel::Fixed(_) => vec![0.0; self.num_classes],
        };
        Ok((d.value(), dx, dl))
    }

    pub fn finite_difference(&self, x: &[f64], label: DummyLabel<'_>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let d = self.value(x, label)?;
        let mut xv = x.to_vec();
        let mut dx = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let h = fd_step(x[i]);
            xv[i] = x[i] + h;
            let up = self.value(&xv, label)?;
            xv[i] = x[i] - h;
            let down = self.value(&xv, label)?;
            xv[i] = x[i];
            dx.push((up - down) / (2.0 * h));
        }
        let dl = match label {
            DummyLabel::Logits(l) => {
                let mut lv = l.to_vec();
                let mut out = Vec::with_capacity(l.len());
                for i in 0..l.len() {
                    let h = fd_step(l[i]);
                    lv[i] = l[i] + h;
                    let up = self.value(x, DummyLabel::Logits(&lv))?;
                    lv[i] = l[i] - h;
                    let down = self.value(x, DummyLabel::Logits(&lv))?;
                    lv[i] = l[i];
                    out.push((up - down) / (2.0 * h));
                }
                out
            }
            DummyLabel::Fixed(_) => vec![0.0; self.num_classes],
        };
        Ok((d, dx, dl))
    }

    pub fn gradient(&self, x: &[f64], label: DummyLabel<'_>, backend: Backend) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        match backend {
            Backend::Analytic => self.analytic(x, label),
            Backend::FiniteDifference => self.finite_difference(x, label),
        }
    }
}

/// Gradient-matching distance between the gradients a dummy sample
/// `(dummy_x, softmax(dummy_logits))` would produce and the observed update,
/// with its derivatives with respect to both dummy variables.
#[allow(clippy::too_many_arguments)]
pub fn grad_of_grad_distance(
    spec: &ModelSpec,
    params: &Params,
    observed: &SharedUpdate,
    dummy_x: &Tensor,
    dummy_logits: &[f64],
    kind: DistanceKind,
    layers: &[usize],
    backend: Backend,
) -> Result<DistanceGradient> {
    check_input(spec, dummy_x)?;
    let obj = Objective::new(spec, params, observed, kind, layers)?;
    let (distance, dx, dl) = obj.gradient(dummy_x.values(), DummyLabel::Logits(dummy_logits), backend)?;
    Ok(DistanceGradient {
        distance,
        d_x: Tensor::new(dummy_x.shape().to_vec(), dx)?,
        d_logits: dl,
    })
}

/// `d(flat gradients of the layer set) / d(flat input)` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub layers: Vec<usize>,
    /// Rows index gradient entries (weights then bias, layer by layer),
    /// columns index input coordinates.
    pub matrix: Matrix,
}

fn lift<S: Scalar>(head: &Head<f64>) -> Head<S> {
    match head {
        Head::CrossEntropy(t) => Head::CrossEntropy(t.iter().map(|&v| S::cst(v)).collect()),
        Head::Squared(t) => Head::Squared(t.iter().map(|&v| S::cst(v)).collect()),
    }
}

pub fn input_gradient_jacobian(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    target: &Target,
    layer: usize,
    backend: Backend,
) -> Result<JacobianMatrix> {
    input_gradient_jacobian_layers(spec, params, x, target, &[layer], backend)
}

/// Jacobian of the stacked gradients of several layers.
pub fn input_gradient_jacobian_layers(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    target: &Target,
    layers: &[usize],
    backend: Backend,
) -> Result<JacobianMatrix> {
    let geo = spec.geometry()?;
    params.check_against(spec)?;
    check_input(spec, x)?;
    if layers.is_empty() {
        return Err(Error::Empty("layer subset"));
    }
    for &l in layers {
        if !geo.get(l).is_some_and(|g| g.kind.has_params()) {
            return Err(Error::NoParameters(l));
        }
    }
    let plan = Gather {
        layers: layers.iter().map(|&l| (l, None)).collect(),
    };
    let head = target.head(spec.num_classes)?;
    let lowest = *layers.iter().min().expect("non-empty");
    let xv = x.values();
    let n = xv.len();

    let columns: Vec<Vec<f64>> = match backend {
        Backend::Analytic => {
            let head = lift::<Dual>(&head);
            (0..n)
                .into_par_iter()
                .map(|c| {
                    let xs: Vec<Dual> = xv
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| Dual::new(v, if i == c { 1.0 } else { 0.0 }))
                        .collect();
                    let g = sample_grads(&geo, params, &xs, &head, lowest);
                    plan.collect(&g.blocks).iter().map(|d| d.d).collect()
                })
                .collect()
        }
        Backend::FiniteDifference => (0..n)
            .into_par_iter()
            .map(|c| {
                let h = fd_step(xv[c]);
                let mut xs = xv.to_vec();
                xs[c] = xv[c] + h;
                let up = plan.collect(&sample_grads(&geo, params, &xs, &head, lowest).blocks);
                xs[c] = xv[c] - h;
                let down = plan.collect(&sample_grads(&geo, params, &xs, &head, lowest).blocks);
                up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect()
            })
            .collect(),
    };
    let rows = columns.first().map_or(0, Vec::len);
    let mut matrix = Matrix::zeros(rows, n);
    for (c, col) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            matrix.set(r, c, v);
        }
    }
    Ok(JacobianMatrix {
        layers: layers.to_vec(),
        matrix,
    })
}
