use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Global-statistics SSIM over whole images with dynamic range `range`,
/// clamped below at 0.
///
/// Contrast and structure are combined as `(2 cov + C2) / (var_x + var_y + C2)`,
/// which equals their product when `C3 = C2 / 2` and is exactly symmetric.
pub fn ssim(x: &Tensor, x_hat: &Tensor, range: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            actual: x_hat.shape().to_vec(),
        });
    }
    if x.is_empty() {
        return Err(Error::Empty("image"));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::invalid(format!("dynamic range {range} must be positive")));
    }
    Ok(ssim_raw(x.values(), x_hat.values(), range).max(0.0))
}

/// Unclamped SSIM.
pub fn ssim_raw(a: &[f64], b: &[f64], range: f64) -> f64 {
    let n = a.len() as f64;
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&u, &v) in a.iter().zip(b) {
        let (du, dv) = (u - ma, v - mb);
        va += du * du;
        vb += dv * dv;
        cov += du * dv;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    let cs = (2.0 * cov + c2) / (va + vb + c2);
    lum * cs
}
