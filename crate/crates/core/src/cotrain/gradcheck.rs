use crate::error::Result;
use crate::model::MultiHeadModel;
use crate::nn::FeatureMap;

use super::pseudo::PseudoLabelDecision;
use super::trainer::{co_training_losses, BatchLayout};

/// Worst agreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    /// `(flat parameter index, analytic, numeric)` of every entry outside tolerance.
    pub failures: Vec<(usize, f64, f64)>,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

/// Compares every parameter gradient of the total co-training loss with a
/// central difference of step `h`. An entry passes when
/// `|a − n| ≤ max(abs_floor, rel_tol·max(|a|, |n|))`.
///
/// Pseudo-labels are frozen at `decision` (or at the decision of the
/// unperturbed model) so that both sides see the same targets.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &MultiHeadModel,
    batch: &FeatureMap,
    layout: BatchLayout,
    labels: &[usize],
    lambda_u: f64,
    decision: Option<&PseudoLabelDecision>,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradientCheck> {
    let mut base = model.clone();
    base.zero_grad();
    let reference = co_training_losses(&mut base, batch, layout, labels, lambda_u, 0.95, decision, true)?;
    let frozen = reference.decision;
    let analytic: Vec<f64> = base.gradients().into_iter().flatten().collect();

    let loss_at = |index: usize, delta: f64| -> Result<f64> {
        let mut m = model.clone();
        let mut seen = 0;
        m.for_each_param_mut(|p| {
            if (seen..seen + p.len()).contains(&index) {
                p.value[index - seen] += delta;
            }
            seen += p.len();
        });
        Ok(co_training_losses(&mut m, batch, layout, labels, lambda_u, 0.95, frozen.as_ref(), false)?.loss)
    };

    let mut out = GradientCheck {
        checked: analytic.len(),
        failures: Vec::new(),
        max_abs_error: 0.0,
        max_rel_error: 0.0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let n = (loss_at(i, h)? - loss_at(i, -h)?) / (2.0 * h);
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        out.max_abs_error = out.max_abs_error.max(abs);
        if scale > abs_floor {
            out.max_rel_error = out.max_rel_error.max(abs / scale);
        }
        if abs > abs_floor.max(rel_tol * scale) {
            out.failures.push((i, a, n));
        }
    }
    Ok(out)
}
