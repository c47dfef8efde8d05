use super::{forward_loss, loss_and_grads, ModelError, ModelParams, TokenSequence};
use crate::gradient::Projection;

/// Worst disagreement between analytic and central-difference projection
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(layer, projection, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, Projection, usize, f64, f64)>,
    pub entries_checked: usize,
}

/// Compares every Q/K/V/O weight gradient with a central difference of
/// width `2 * step`.
///
/// The error of one entry is `|a - c| / (|a| + |c| + 1e-8)`.
pub fn finite_diff_check(
    params: &ModelParams,
    sample: &TokenSequence,
    step: f64,
) -> Result<GradCheckReport, ModelError> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(ModelError::InvalidStep(step));
    }
    let (_, grads) = loss_and_grads(params, sample)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for layer in 0..params.config.num_layers {
        for p in Projection::ALL {
            let analytic = grads.layers[layer].projection(p);
            for (idx, &a) in analytic.iter().enumerate() {
                let orig = params.layers[layer].projection(p)[idx];
                probe.layers[layer].projection_mut(p)[idx] = orig + step;
                let up = forward_loss(&probe, sample)?;
                probe.layers[layer].projection_mut(p)[idx] = orig - step;
                let down = forward_loss(&probe, sample)?;
                probe.layers[layer].projection_mut(p)[idx] = orig;

                let c = (up - down) / (2.0 * step);
                let err = (a - c).abs() / (a.abs() + c.abs() + 1e-8);
                report.entries_checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((layer, p, idx, a, c));
                }
            }
        }
    }
    Ok(report)
}
