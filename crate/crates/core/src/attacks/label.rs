use crate::error::{Error, Result};
use crate::grad::SharedUpdate;

/// Index of the last parameterised layer present in the update.
pub(crate) fn output_layer(update: &SharedUpdate) -> Result<usize> {
    update
        .grads
        .blocks
        .iter()
        .rposition(Option::is_some)
        .ok_or(Error::Empty("gradient set"))
}

/// Recovers the class of a single-sample update from the sign pattern of the
/// output-layer bias gradient (`softmax - onehot` has exactly one negative entry).
pub fn infer_label(update: &SharedUpdate) -> Result<usize> {
    let out = output_layer(update)?;
    if update.retained_indices(out).is_some() {
        return Err(Error::invalid("output layer is masked"));
    }
    let bias = update.grads.block(out).expect("present").bias.values();
    infer_from_bias(bias)
}

pub(crate) fn infer_from_bias(bias: &[f64]) -> Result<usize> {
    let neg: Vec<usize> = (0..bias.len()).filter(|&i| bias[i] < 0.0).collect();
    match neg.as_slice() {
        [y] => Ok(*y),
        _ => Err(Error::AmbiguousLabel(neg.len())),
    }
}
