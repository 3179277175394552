//! Central finite-difference check of the analytic gradients.

use super::tape::{backprop_pretrain_segment, backprop_segment, segment_loss};
use super::{CarriedState, Segment, TrainConfig};
use crate::error::Result;
use crate::neural::MaskModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub max_abs_grad: f64,
}

/// `|g - g_fd| / max(|g|, |g_fd|, floor)` where `floor` is `rel_floor`
/// times the largest gradient magnitude, so parameters with negligible
/// gradients are compared on the scale of the whole vector.
fn compare(analytic: &[f64], numeric: &[f64], rel_floor: f64) -> GradCheckReport {
    let max_abs_grad = analytic.iter().chain(numeric).fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (rel_floor * max_abs_grad).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        max_abs_grad,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = i;
        }
    }
    report
}

fn central_differences(model: &MaskModel<f64>, step: f64, mut loss: impl FnMut(&MaskModel<f64>) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params().len());
    for i in 0..model.params().len() {
        let p0 = model.params()[i];
        probe.params_mut()[i] = p0 + step;
        let up = loss(&probe)?;
        probe.params_mut()[i] = p0 - step;
        let down = loss(&probe)?;
        probe.params_mut()[i] = p0;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Checks the end-to-end gradient on one segment.
pub fn check_e2e_gradient(
    model: &MaskModel<f64>,
    seg: Segment<'_, f64>,
    carried: &CarriedState<f64>,
    cfg: &TrainConfig,
    step: f64,
    rel_floor: f64,
) -> Result<GradCheckReport> {
    let (_, analytic, _) = backprop_segment(model, seg, carried, cfg)?;
    let numeric = central_differences(model, step, |m| {
        let mut st = carried.clone();
        segment_loss(m, seg, &mut st, cfg)
    })?;
    Ok(compare(&analytic, &numeric, rel_floor))
}

/// Checks the mask-domain gradient on one segment.
pub fn check_pretrain_gradient(
    model: &MaskModel<f64>,
    seg: Segment<'_, f64>,
    cfg: &TrainConfig,
    step: f64,
    rel_floor: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = backprop_pretrain_segment(model, seg, &mut model.zero_state(), cfg)?;
    let numeric = central_differences(model, step, |m| {
        backprop_pretrain_segment(m, seg, &mut m.zero_state(), cfg).map(|(l, _)| l)
    })?;
    Ok(compare(&analytic, &numeric, rel_floor))
}
