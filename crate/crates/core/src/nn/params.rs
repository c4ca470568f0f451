use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Weight and bias of one parameterised layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights followed by bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(self.weight.values());
        v.extend_from_slice(self.bias.values());
        v
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        let nw = self.weight.len();
        if i < nw {
            self.weight.values()[i]
        } else {
            self.bias.values()[i - nw]
        }
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        let nw = self.weight.len();
        if i < nw {
            self.weight.values_mut()[i] = v;
        } else {
            self.bias.values_mut()[i - nw] = v;
        }
    }

    fn congruent(&self, other: &ParamBlock) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.shape() == other.bias.shape()
    }

    fn zip_with(&self, other: &ParamBlock, f: impl Fn(f64, f64) -> f64 + Copy) -> ParamBlock {
        ParamBlock {
            weight: self.weight.zip_map(&other.weight, f).expect("congruent"),
            bias: self.bias.zip_map(&other.bias, f).expect("congruent"),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> ParamBlock {
        ParamBlock {
            weight: self.weight.map(f),
            bias: self.bias.map(f),
        }
    }
}

fn check_congruent(a: &[Option<ParamBlock>], b: &[Option<ParamBlock>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("layer count {} vs {}", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) if x.congruent(y) => {}
            _ => {
                return Err(Error::LayerShape {
                    layer: i,
                    detail: "parameter blocks are not shape-congruent".into(),
                })
            }
        }
    }
    Ok(())
}

fn zip_blocks(
    a: &[Option<ParamBlock>],
    b: &[Option<ParamBlock>],
    f: impl Fn(f64, f64) -> f64 + Copy,
) -> Result<Vec<Option<ParamBlock>>> {
    check_congruent(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| x.as_ref().zip(y.as_ref()).map(|(x, y)| x.zip_with(y, f)))
        .collect())
}

/// Model parameters, one optional block per layer (parameterless layers hold `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub blocks: Vec<Option<ParamBlock>>,
}

impl Params {
    pub fn block(&self, layer: usize) -> Option<&ParamBlock> {
        self.blocks.get(layer).and_then(Option::as_ref)
    }

    /// Checks that block shapes match those implied by `spec`.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let geo = spec.geometry()?;
        if geo.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "params have {} layers, spec has {}",
                self.blocks.len(),
                geo.len()
            )));
        }
        for (i, (g, b)) in geo.iter().zip(&self.blocks).enumerate() {
            let ok = match (g.weight_shape(), b) {
                (None, None) => true,
                (Some(ws), Some(b)) => b.weight.shape() == ws.as_slice() && b.bias.shape() == [ws[0]],
                _ => false,
            };
            if !ok {
                return Err(Error::LayerShape {
                    layer: i,
                    detail: "parameter shape disagrees with the model spec".into(),
                });
            }
        }
        Ok(())
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases; each
/// layer draws from its own stream of `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Params> {
    let geo = spec.geometry()?;
    let blocks = geo
        .iter()
        .enumerate()
        .map(|(i, g)| {
            g.weight_shape().map(|ws| {
                let bound = 1.0 / (g.fan_in().unwrap() as f64).sqrt();
                let mut r = rng::stream(seed, i as u64);
                let n: usize = ws.iter().product();
                let w = (0..n).map(|_| r.random_range(-bound..=bound)).collect();
                ParamBlock {
                    bias: Tensor::zeros(vec![ws[0]]),
                    weight: Tensor::from_parts(ws, w),
                }
            })
        })
        .collect();
    Ok(Params { blocks })
}

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step(params: &Params, grads: &GradientSet, lr: f64) -> Result<Params> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate {lr} must be finite and non-negative"
        )));
    }
    Ok(Params {
        blocks: zip_blocks(&params.blocks, &grads.blocks, |p, g| p - lr * g)?,
    })
}

/// Per-layer gradient tensors, shape-congruent with [`Params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub blocks: Vec<Option<ParamBlock>>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl GradientSet {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            blocks: params
                .blocks
                .iter()
                .map(|b| b.as_ref().map(|b| b.map(|_| 0.0)))
                .collect(),
            batch_size: 0,
            epochs: 0,
        }
    }

    pub fn block(&self, layer: usize) -> Option<&ParamBlock> {
        self.blocks.get(layer).and_then(Option::as_ref)
    }

    /// Flattened gradient of one layer, weights then bias.
    pub fn layer_flat(&self, layer: usize) -> Result<Vec<f64>> {
        self.block(layer)
            .map(ParamBlock::flatten)
            .ok_or(Error::NoParameters(layer))
    }

    /// Elementwise sum; metadata is taken from `self`.
    pub fn add(&self, other: &GradientSet) -> Result<GradientSet> {
        Ok(GradientSet {
            blocks: zip_blocks(&self.blocks, &other.blocks, |a, b| a + b)?,
            ..*self
        })
    }

    pub fn sub(&self, other: &GradientSet) -> Result<GradientSet> {
        Ok(GradientSet {
            blocks: zip_blocks(&self.blocks, &other.blocks, |a, b| a - b)?,
            ..*self
        })
    }

    pub fn scale(&self, c: f64) -> GradientSet {
        GradientSet {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.as_ref().map(|b| b.map(|v| c * v)))
                .collect(),
            ..*self
        }
    }

    pub fn is_congruent(&self, other: &GradientSet) -> bool {
        check_congruent(&self.blocks, &other.blocks).is_ok()
    }

    /// Every gradient entry in layer order, weights before bias.
    pub fn flat_values(&self) -> Vec<f64> {
        self.blocks.iter().flatten().flat_map(|b| b.flatten()).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.flat_values().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `params_after - params_before`, the shape a FedAvg delta takes.
    pub fn delta(before: &Params, after: &Params) -> Result<GradientSet> {
        Ok(GradientSet {
            blocks: zip_blocks(&after.blocks, &before.blocks, |a, b| a - b)?,
            batch_size: 0,
            epochs: 0,
        })
    }
}
