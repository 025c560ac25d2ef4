//! Central finite-difference verification of the analytic gradients of
//! `silog ∘ decode ∘ encoder_forward`.

use rand::seq::index::sample;

use crate::correspondence::TokenMatchMap;
use crate::error::{RadError, Result};
use crate::image::{DepthMap, ImageBuffer};
use crate::nn::model::DualStreamModel;
use crate::nn::params::{Gradients, ParamGroup};
use crate::nn::tape::Tape;
use crate::retrieval::ContextSample;
use crate::rng::SeededRng;

/// Gradients below this magnitude are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckExample {
    pub input: ImageBuffer,
    pub contexts: Vec<ContextSample>,
    pub map: TokenMatchMap,
    pub gt: DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub frozen: bool,
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Largest |analytic gradient| over the sampled coordinates.
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    /// Largest relative error over the unfrozen groups.
    pub fn max_relative_error(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| !g.frozen)
            .map(|g| g.max_relative_error)
            .fold(0.0, f64::max)
    }

    /// True iff every frozen group's sampled analytic gradients are exactly 0.
    pub fn frozen_exact_zero(&self) -> bool {
        self.groups.iter().filter(|g| g.frozen).all(|g| g.max_abs_analytic == 0.0)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Mean loss over `batch`.
pub fn batch_loss(model: &DualStreamModel, batch: &[GradCheckExample], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::new(&model.params, false);
        let l = model.forward_loss(&mut tape, &ex.input, &ex.contexts, &ex.map, &ex.gt, lambda)?;
        total += tape.value(l).data[0];
    }
    Ok(total / batch.len() as f64)
}

pub fn batch_gradients(model: &DualStreamModel, batch: &[GradCheckExample], lambda: f64) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::empty(model.params.len());
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let (l, g) = model.loss_and_grad(&ex.input, &ex.contexts, &ex.map, &ex.gt, lambda)?;
        total += l;
        grads.accumulate(&g, scale);
    }
    Ok((total * scale, grads))
}

/// Compares analytic and central-difference gradients on `coords_per_group`
/// randomly sampled scalars of each requested group (fewer if the group is
/// smaller). Frozen groups are not perturbed; their analytic gradients are
/// reported instead.
pub fn grad_check(
    model: &DualStreamModel,
    batch: &[GradCheckExample],
    groups: &[ParamGroup],
    coords_per_group: usize,
    epsilon: f64,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(RadError::input("gradient check needs at least one example"));
    }
    let (_, grads) = batch_gradients(model, batch, lambda)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport { groups: Vec::new() };
    for &group in groups {
        let ids = model.params.group_ids(group);
        let coords: Vec<(usize, usize)> = ids
            .iter()
            .flat_map(|&id| (0..model.params.entry(id).value.len()).map(move |f| (id, f)))
            .collect();
        if coords.is_empty() {
            return Err(RadError::input(format!("parameter group {} is empty", group.name())));
        }
        let chosen = sample(rng, coords.len(), coords_per_group.min(coords.len()));
        let frozen = model.params.group_frozen(group);
        let mut check = GroupCheck {
            group,
            frozen,
            coordinates: chosen.len(),
            max_relative_error: 0.0,
            max_abs_analytic: 0.0,
        };
        for k in chosen.iter() {
            let (id, flat) = coords[k];
            let analytic = grads.coordinate(id, flat);
            check.max_abs_analytic = check.max_abs_analytic.max(analytic.abs());
            if frozen {
                continue;
            }
            let original = model.params.entry(id).value.data[flat];
            probe.params.value_mut(id).data[flat] = original + epsilon;
            let plus = batch_loss(&probe, batch, lambda)?;
            probe.params.value_mut(id).data[flat] = original - epsilon;
            let minus = batch_loss(&probe, batch, lambda)?;
            probe.params.value_mut(id).data[flat] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            check.max_relative_error = check.max_relative_error.max(relative_error(analytic, numeric));
        }
        report.groups.push(check);
    }
    Ok(report)
}
