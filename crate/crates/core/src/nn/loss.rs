//! Scale-invariant log loss on depth maps.

use crate::error::Result;
use crate::image::{ensure_same_dims, DepthMap};
use crate::nn::tape::silog_with_grad;

/// `mean(d²) − λ·mean(d)²` with `d = ln pred − ln gt` over jointly valid pixels.
pub fn silog_loss(pred: &DepthMap, gt: &DepthMap, lambda: f64) -> Result<f64> {
    ensure_same_dims("silog prediction vs ground truth", gt.dims(), pred.dims())?;
    let mask: Vec<bool> = pred
        .valid_mask()
        .iter()
        .zip(gt.valid_mask())
        .map(|(a, b)| *a && *b)
        .collect();
    silog_with_grad(pred.values(), gt.values(), &mask, lambda).map(|(l, _)| l)
}
