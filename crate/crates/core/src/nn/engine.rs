//! Forward pass and exact per-sample gradients, generic over [`Scalar`].

use super::params::Params;
use super::spec::{ActShape, LayerGeom, LayerSpec};
use crate::scalar::Scalar;

/// Loss head applied to the logits.
#[derive(Debug, Clone)]
pub(crate) enum Head<S> {
    /// Softmax cross-entropy against a probability vector.
    CrossEntropy(Vec<S>),
    /// `0.5 * ||z - t||^2` on the raw logits.
    Squared(Vec<S>),
}

pub(crate) struct Forward<S> {
    /// `inputs[i]` is the input of layer `i`; the last entry is the logits.
    pub acts: Vec<Vec<S>>,
    /// Flat argmax indices for each pooling layer (empty for other layers).
    pub argmax: Vec<Vec<usize>>,
}

impl<S> Forward<S> {
    pub fn logits(&self) -> &[S] {
        self.acts.last().expect("at least one activation")
    }
}

/// Gradients of one sample, per layer `(weight, bias)`.
pub(crate) struct SampleGrads<S> {
    pub loss: S,
    pub blocks: Vec<Option<(Vec<S>, Vec<S>)>>,
}

pub(crate) fn forward<S: Scalar>(geo: &[LayerGeom], params: &Params, x: &[S]) -> Forward<S> {
    let mut acts: Vec<Vec<S>> = Vec::with_capacity(geo.len() + 1);
    let mut argmax = Vec::with_capacity(geo.len());
    acts.push(x.to_vec());
    for (i, g) in geo.iter().enumerate() {
        let input = &acts[i];
        let (out, am) = match g.kind {
            LayerSpec::Conv2d {
                out_channels,
                kernel_size,
            } => {
                let b = params.block(i).expect("conv params");
                (
                    conv_forward(
                        input,
                        g.input,
                        b.weight.values(),
                        b.bias.values(),
                        out_channels,
                        kernel_size,
                    ),
                    Vec::new(),
                )
            }
            LayerSpec::MaxPool { window } => pool_forward(input, g.input, window),
            LayerSpec::FullyConnected { .. } | LayerSpec::SoftmaxOutput { .. } => {
                let b = params.block(i).expect("dense params");
                (dense_forward(input, b.weight.values(), b.bias.values()), Vec::new())
            }
            LayerSpec::ReLU => (
                input
                    .iter()
                    .map(|&v| if v.value() > 0.0 { v } else { S::zero() })
                    .collect(),
                Vec::new(),
            ),
        };
        acts.push(out);
        argmax.push(am);
    }
    Forward { acts, argmax }
}

/// Loss and gradient of the logits.
pub(crate) fn head_loss<S: Scalar>(logits: &[S], head: &Head<S>) -> (S, Vec<S>) {
    match head {
        Head::CrossEntropy(t) => {
            let m = logits.iter().map(|z| z.value()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<S> = logits.iter().map(|&z| (z - S::cst(m)).exp()).collect();
            let s = sum(&e);
            let mut tz = S::zero();
            for (&tk, &zk) in t.iter().zip(logits) {
                tz = tz + tk * zk;
            }
            let loss = s.ln() + S::cst(m) - tz;
            let dz = e.iter().zip(t).map(|(&ek, &tk)| ek / s - tk).collect();
            (loss, dz)
        }
        Head::Squared(t) => {
            let r: Vec<S> = logits.iter().zip(t).map(|(&z, &tk)| z - tk).collect();
            let loss = sum(&r.iter().map(|&v| v * v).collect::<Vec<_>>()).scale(0.5);
            (loss, r)
        }
    }
}

/// Exact gradients of the loss with respect to every parameter block of
/// layers `lowest..`; blocks below `lowest` are left empty.
pub(crate) fn sample_grads<S: Scalar>(
    geo: &[LayerGeom],
    params: &Params,
    x: &[S],
    head: &Head<S>,
    lowest: usize,
) -> SampleGrads<S> {
    let fwd = forward(geo, params, x);
    let (loss, mut delta) = head_loss(fwd.logits(), head);
    let mut blocks: Vec<Option<(Vec<S>, Vec<S>)>> = vec![None; geo.len()];
    for i in (lowest..geo.len()).rev() {
        let g = &geo[i];
        let input = &fwd.acts[i];
        let need_dx = i > lowest;
        match g.kind {
            LayerSpec::Conv2d {
                out_channels,
                kernel_size,
            } => {
                let b = params.block(i).expect("conv params");
                let (dw, db, dx) = conv_backward(
                    input,
                    g.input,
                    b.weight.values(),
                    &delta,
                    out_channels,
                    kernel_size,
                    need_dx,
                );
                blocks[i] = Some((dw, db));
                delta = dx;
            }
            LayerSpec::FullyConnected { .. } | LayerSpec::SoftmaxOutput { .. } => {
                let b = params.block(i).expect("dense params");
                let (dw, dx) = dense_backward(input, b.weight.values(), &delta, need_dx);
                blocks[i] = Some((dw, delta));
                delta = dx;
            }
            LayerSpec::MaxPool { .. } => {
                if need_dx {
                    let mut dx = vec![S::zero(); input.len()];
                    for (k, &src) in fwd.argmax[i].iter().enumerate() {
                        dx[src] = dx[src] + delta[k];
                    }
                    delta = dx;
                }
            }
            LayerSpec::ReLU => {
                if need_dx {
                    delta = input
                        .iter()
                        .zip(&delta)
                        .map(|(&v, &d)| if v.value() > 0.0 { d } else { S::zero() })
                        .collect();
                }
            }
        }
    }
    SampleGrads { loss, blocks }
}

fn sum<S: Scalar>(v: &[S]) -> S {
    let mut it = v.iter().copied();
    let first = it.next().unwrap_or_else(S::zero);
    it.fold(first, |a, b| a + b)
}

fn spatial(s: ActShape) -> (usize, usize, usize) {
    match s {
        ActShape::Spatial { c, h, w } => (c, h, w),
        ActShape::Flat(_) => unreachable!("validated spatial input"),
    }
}

#[allow(clippy::needless_range_loop)]
fn conv_forward<S: Scalar>(x: &[S], shape: ActShape, w: &[f64], b: &[f64], oc: usize, k: usize) -> Vec<S> {
    let (c, h, wd) = spatial(shape);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut out = Vec::with_capacity(oc * oh * ow);
    for o in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = S::cst(b[o]);
                for ci in 0..c {
                    for ki in 0..k {
                        let xrow = (ci * h + i + ki) * wd + j;
                        let wrow = ((o * c + ci) * k + ki) * k;
                        for kj in 0..k {
                            acc = acc + x[xrow + kj].scale(w[wrow + kj]);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv_backward<S: Scalar>(
    x: &[S],
    shape: ActShape,
    w: &[f64],
    dout: &[S],
    oc: usize,
    k: usize,
    need_dx: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (c, h, wd) = spatial(shape);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut dw = Vec::with_capacity(oc * c * k * k);
    let mut db = Vec::with_capacity(oc);
    for o in 0..oc {
        let d = &dout[o * oh * ow..(o + 1) * oh * ow];
        db.push(sum(d));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let mut acc = d[0] * x[(ci * h + ki) * wd + kj];
                    for i in 0..oh {
                        for j in 0..ow {
                            if i == 0 && j == 0 {
                                continue;
                            }
                            acc = acc + d[i * ow + j] * x[(ci * h + i + ki) * wd + j + kj];
                        }
                    }
                    dw.push(acc);
                }
            }
        }
    }
    let mut dx = Vec::new();
    if need_dx {
        dx = vec![S::zero(); c * h * wd];
        for o in 0..oc {
            for i in 0..oh {
                for j in 0..ow {
                    let d = dout[(o * oh + i) * ow + j];
                    for ci in 0..c {
                        for ki in 0..k {
                            let xrow = (ci * h + i + ki) * wd + j;
                            let wrow = ((o * c + ci) * k + ki) * k;
                            for kj in 0..k {
                                dx[xrow + kj] = dx[xrow + kj] + d.scale(w[wrow + kj]);
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

fn pool_forward<S: Scalar>(x: &[S], shape: ActShape, win: usize) -> (Vec<S>, Vec<usize>) {
    let (c, h, w) = spatial(shape);
    let (oh, ow) = (h.div_ceil(win), w.div_ceil(win));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (ci * h + i * win) * w + j * win;
                for r in i * win..((i + 1) * win).min(h) {
                    for s in j * win..((j + 1) * win).min(w) {
                        let at = (ci * h + r) * w + s;
                        if x[at].value() > x[best].value() {
                            best = at;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

fn dense_forward<S: Scalar>(x: &[S], w: &[f64], b: &[f64]) -> Vec<S> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = S::cst(bo);
            for (xi, &wi) in x.iter().zip(row) {
                acc = acc + xi.scale(wi);
            }
            acc
        })
        .collect()
}

fn dense_backward<S: Scalar>(x: &[S], w: &[f64], dout: &[S], need_dx: bool) -> (Vec<S>, Vec<S>) {
    let n_in = x.len();
    let mut dw = Vec::with_capacity(dout.len() * n_in);
    for &d in dout {
        for &xi in x {
            dw.push(d * xi);
        }
    }
    let mut dx = Vec::new();
    if need_dx {
        dx = (0..n_in)
            .map(|i| {
                let mut acc = dout[0].scale(w[i]);
                for (o, &d) in dout.iter().enumerate().skip(1) {
                    acc = acc + d.scale(w[o * n_in + i]);
                }
                acc
            })
            .collect();
    }
    (dw, dx)
}
