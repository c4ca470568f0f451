//! Minimal deterministic network engine: model specs, parameters, forward
//! pass, exact batch-mean gradients and mini-batch SGD.

mod engine;
pub mod params;
pub mod spec;

use rand::seq::SliceRandom;

pub(crate) use engine::{sample_grads, Head};
pub use params::{init_params, sgd_step, GradientSet, ParamBlock, Params};
pub use spec::{ActShape, LayerGeom, LayerSpec, ModelSpec};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A labelled input sample.
pub type Sample = (Tensor, usize);

/// Supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Hard class label, cross-entropy loss.
    Class(usize),
    /// Soft label (a probability vector), cross-entropy loss.
    Distribution(Vec<f64>),
    /// Square-loss head `0.5 * ||logits - t||^2`; used for closed-form checks.
    Regression(Vec<f64>),
}

impl From<usize> for Target {
    fn from(y: usize) -> Self {
        Target::Class(y)
    }
}

impl Target {
    pub(crate) fn head(&self, num_classes: usize) -> Result<Head<f64>> {
        match self {
            Target::Class(y) => {
                if *y >= num_classes {
                    return Err(Error::Index {
                        index: *y,
                        size: num_classes,
                    });
                }
                let mut t = vec![0.0; num_classes];
                t[*y] = 1.0;
                Ok(Head::CrossEntropy(t))
            }
            Target::Distribution(t) | Target::Regression(t) if t.len() != num_classes => Err(Error::Shape {
                expected: vec![num_classes],
                actual: vec![t.len()],
            }),
            Target::Distribution(t) => Ok(Head::CrossEntropy(t.clone())),
            Target::Regression(t) => Ok(Head::Squared(t.clone())),
        }
    }
}

pub(crate) fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    let (c, h, w) = spec.input_shape;
    if x.shape() == [c, h, w] {
        Ok(())
    } else {
        Err(Error::Shape {
            expected: vec![c, h, w],
            actual: x.shape().to_vec(),
        })
    }
}

fn act_tensor(shape: ActShape, v: Vec<f64>) -> Tensor {
    match shape {
        ActShape::Spatial { c, h, w } => Tensor::from_parts(vec![c, h, w], v),
        ActShape::Flat(n) => Tensor::from_parts(vec![n], v),
    }
}

/// Runs the network; returns the logits and the output of every layer.
pub fn forward(spec: &ModelSpec, params: &Params, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let geo = spec.geometry()?;
    params.check_against(spec)?;
    check_input(spec, x)?;
    let fwd = engine::forward::<f64>(&geo, params, x.values());
    let acts: Vec<Tensor> = fwd.acts[1..]
        .iter()
        .zip(&geo)
        .map(|(a, g)| act_tensor(g.output, a.clone()))
        .collect();
    let logits = acts.last().cloned().expect("non-empty model");
    Ok((logits, acts))
}

/// `-ln softmax(logits)[y]`.
pub fn cross_entropy(logits: &Tensor, y: usize) -> Result<f64> {
    let z = logits.values();
    if y >= z.len() {
        return Err(Error::Index {
            index: y,
            size: z.len(),
        });
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    Ok((m - z[y]) + s.ln())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Batch-mean loss and gradients for class-labelled samples.
pub fn backward(spec: &ModelSpec, params: &Params, batch: &[Sample]) -> Result<(f64, GradientSet)> {
    let batch: Vec<(&Tensor, Target)> = batch.iter().map(|(x, y)| (x, Target::Class(*y))).collect();
    backward_targets(spec, params, &batch)
}

/// Flat weight and bias gradients of one layer.
type Block = (Vec<f64>, Vec<f64>);

/// Batch-mean loss and gradients for arbitrary targets.
pub fn backward_targets(spec: &ModelSpec, params: &Params, batch: &[(&Tensor, Target)]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let geo = spec.geometry()?;
    params.check_against(spec)?;
    let mut total_loss = 0.0;
    let mut acc: Option<Vec<Option<Block>>> = None;
    for (x, t) in batch {
        check_input(spec, x)?;
        let head = t.head(spec.num_classes)?;
        let g = sample_grads::<f64>(&geo, params, x.values(), &head, 0);
        total_loss += g.loss;
        match acc.as_mut() {
            None => acc = Some(g.blocks),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g.blocks) {
                    if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b) {
                        aw.iter_mut().zip(bw).for_each(|(u, v)| *u += v);
                        ab.iter_mut().zip(bb).for_each(|(u, v)| *u += v);
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let grads = blocks_to_set(&geo, acc.expect("non-empty"), n, batch.len());
    Ok((total_loss / n, grads))
}

pub(crate) fn blocks_to_set(
    geo: &[LayerGeom],
    blocks: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    divisor: f64,
    batch_size: usize,
) -> GradientSet {
    let blocks = geo
        .iter()
        .zip(blocks)
        .map(|(g, b)| {
            b.map(|(w, bias)| ParamBlock {
                weight: Tensor::from_parts(g.weight_shape().unwrap(), w.into_iter().map(|v| v / divisor).collect()),
                bias: Tensor::from_parts(vec![bias.len()], bias.into_iter().map(|v| v / divisor).collect()),
            })
        })
        .collect();
    GradientSet {
        blocks,
        batch_size,
        epochs: 1,
    }
}

/// Mean cross-entropy over a dataset.
pub fn mean_loss(spec: &ModelSpec, params: &Params, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut total = 0.0;
    for (x, y) in data {
        let (logits, _) = forward(spec, params, x)?;
        total += cross_entropy(&logits, *y)?;
    }
    Ok(total / data.len() as f64)
}

pub fn accuracy(spec: &ModelSpec, params: &Params, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut hits = 0usize;
    for (x, y) in data {
        let (logits, _) = forward(spec, params, x)?;
        let pred = argmax(logits.values());
        hits += usize::from(pred == *y);
    }
    Ok(hits as f64 / data.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Training outcome: final parameters and the accumulated update
/// `sum_i (-lr * g_i)`, which equals `final - initial` up to rounding.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub delta: GradientSet,
    pub steps: usize,
}

/// Mini-batch SGD over `epochs` seeded shuffles of `data`.
pub fn train(
    spec: &ModelSpec,
    params: &Params,
    data: &[Sample],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Params> {
    Ok(train_tracked(spec, params, data, epochs, batch_size, lr, seed)?.params)
}

pub fn train_tracked(
    spec: &ModelSpec,
    params: &Params,
    data: &[Sample],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if epochs == 0 || batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be at least 1"));
    }
    params.check_against(spec)?;
    let mut current = params.clone();
    let mut delta = GradientSet::zeros_like(params);
    let mut steps = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(seed, epoch as u64));
        for chunk in order.chunks(batch_size) {
            // Summation order inside a batch follows dataset order, so a
            // full-batch epoch reproduces `backward` on the dataset exactly.
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let batch: Vec<Sample> = idx.iter().map(|&i| data[i].clone()).collect();
            let (_, g) = backward(spec, &current, &batch)?;
            let step = g.scale(-lr);
            current = sgd_step(&current, &g, lr)?;
            delta = delta.add(&step)?;
            steps += 1;
        }
    }
    delta.batch_size = batch_size;
    delta.epochs = epochs;
    Ok(TrainOutcome {
        params: current,
        delta,
        steps,
    })
}
