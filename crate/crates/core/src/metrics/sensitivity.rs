//! Gradient sensitivity to the input: Jacobian matrix norms and the Grassmann
//! distance between attribute-conditioned mean gradients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward, ModelSpec, Params, Sample};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PNorm {
    Frobenius,
    One,
    Inf,
}

impl PNorm {
    pub const ALL: [PNorm; 3] = [PNorm::Frobenius, PNorm::One, PNorm::Inf];

    pub fn of(self, m: &Matrix) -> f64 {
        match self {
            PNorm::Frobenius => m.values.iter().map(|v| v * v).sum::<f64>().sqrt(),
            PNorm::One => (0..m.cols)
                .map(|c| (0..m.rows).map(|r| m.get(r, c).abs()).sum::<f64>())
                .fold(0.0, f64::max),
            PNorm::Inf => m
                .values
                .chunks(m.cols.max(1))
                .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMetric {
    Jacobian(PNorm),
    Grassmann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityValue {
    pub metric: SensitivityMetric,
    pub value: f64,
    /// Matrices averaged (Jacobian) or principal angles used (Grassmann).
    pub count: usize,
}

/// Mean matrix norm over per-sample Jacobians.
pub fn jacobian_pnorm_risk(jacobians: &[Matrix], p: PNorm) -> Result<SensitivityValue> {
    let first = jacobians.first().ok_or(Error::Empty("jacobians"))?;
    for j in jacobians {
        if (j.rows, j.cols) != (first.rows, first.cols) {
            return Err(Error::Shape {
                expected: vec![first.rows, first.cols],
                actual: vec![j.rows, j.cols],
            });
        }
    }
    let value = jacobians.iter().map(|j| p.of(j)).sum::<f64>() / jacobians.len() as f64;
    Ok(SensitivityValue {
        metric: SensitivityMetric::Jacobian(p),
        value,
        count: jacobians.len(),
    })
}

/// Mean layer-`layer` weight gradient over each attribute subset, as matrices
/// (`out x in` for dense layers, `out_channels x in_channels*k*k` for convolutions).
pub fn mean_gradients_by_attribute(
    spec: &ModelSpec,
    params: &Params,
    s0: &[Sample],
    s1: &[Sample],
    layer: usize,
) -> Result<(Matrix, Matrix)> {
    if s0.is_empty() || s1.is_empty() {
        return Err(Error::Empty("attribute subset"));
    }
    let geo = spec.geometry()?;
    let shape = geo
        .get(layer)
        .and_then(|g| g.weight_shape())
        .ok_or(Error::NoParameters(layer))?;
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let mean = |set: &[Sample]| -> Result<Matrix> {
        let (_, g) = backward(spec, params, set)?;
        let w = g.block(layer).expect("parameterised layer").weight.values().to_vec();
        Matrix::new(rows, cols, w)
    };
    Ok((mean(s0)?, mean(s1)?))
}

/// Orthonormal basis of the column span, directions ordered by singular value.
fn column_basis(m: &Matrix, rank_tol: f64) -> Result<DMatrix<f64>> {
    let a = m.to_nalgebra();
    let svd = a.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let smax = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    if !(smax > 0.0) || !smax.is_finite() {
        return Err(Error::VanishingGradient(format!(
            "{}x{} matrix has no span",
            m.rows, m.cols
        )));
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] > rank_tol * smax)
        .collect();
    Ok(DMatrix::from_fn(m.rows, keep.len(), |r, c| u[(r, keep[c])]))
}

/// Principal angles between the column spans of two matrices; there are as
/// many as the smaller rank.
pub fn principal_angles(g0: &Matrix, g1: &Matrix, rank_tol: f64) -> Result<Vec<f64>> {
    if (g0.rows, g0.cols) != (g1.rows, g1.cols) {
        return Err(Error::Shape {
            expected: vec![g0.rows, g0.cols],
            actual: vec![g1.rows, g1.cols],
        });
    }
    let q0 = column_basis(g0, rank_tol)?;
    let q1 = column_basis(g1, rank_tol)?;
    let cross = q0.transpose() * q1;
    let mut cosines: Vec<f64> = cross.singular_values().iter().copied().collect();
    cosines.sort_by(|a, b| b.total_cmp(a));
    Ok(cosines.into_iter().map(|c| c.clamp(0.0, 1.0).acos()).collect())
}

/// Geodesic distance `sqrt(sum theta_i^2)` on the Grassmannian.
pub fn grassmann_distance(g0: &Matrix, g1: &Matrix, rank_tol: f64) -> Result<SensitivityValue> {
    let angles = principal_angles(g0, g1, rank_tol)?;
    Ok(SensitivityValue {
        metric: SensitivityMetric::Grassmann,
        value: angles.iter().map(|t| t * t).sum::<f64>().sqrt(),
        count: angles.len(),
    })
}

pub const DEFAULT_RANK_TOL: f64 = 1e-10;
