use crate::error::{Error, Result};
use crate::math::{cross_entropy, softmax};
use crate::model::Logits;

use super::pseudo::PseudoLabelDecision;

/// A scalar loss with its gradient with respect to the logits it was computed from.
#[derive(Clone, Debug)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: Logits,
}

/// `(1/B) Σ_b Σ_m H(y_b, softmax(logits[b, m]))`.
pub fn supervised_loss(logits: &Logits, labels: &[usize]) -> Result<LossWithGrad> {
    if labels.len() != logits.batch {
        return Err(Error::contract("one label per example required"));
    }
    if !logits.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            reason: "non-finite logits in the supervised branch".into(),
        });
    }
    let scale = 1.0 / logits.batch as f64;
    let mut grad = Logits::zeros(logits.batch, logits.heads, logits.classes);
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= logits.classes {
            return Err(Error::contract(format!("label {y} out of range")));
        }
        for m in 0..logits.heads {
            let z = logits.get(b, m);
            total += cross_entropy(z, y);
            let g = grad.get_mut(b, m);
            for (gi, p) in g.iter_mut().zip(softmax(z)) {
                *gi = p * scale;
            }
            g[y] -= scale;
        }
    }
    Ok(LossWithGrad {
        value: total * scale,
        grad,
    })
}

/// Masked mean-of-means over heads:
/// `(1/M) Σ_m Σ_b 1[b,m]·H(q̄[b,m], softmax(logits[b,m])) / Σ_b 1[b,m]`.
///
/// A head with no selected example contributes zero. Gradients of
/// unselected entries are exactly `0.0`.
pub fn unsupervised_loss(logits: &Logits, decision: &PseudoLabelDecision) -> Result<LossWithGrad> {
    if decision.batch() != logits.batch || decision.heads() != logits.heads {
        return Err(Error::contract(format!(
            "decision is {}x{} but logits are {}x{}",
            decision.batch(),
            decision.heads(),
            logits.batch,
            logits.heads
        )));
    }
    let mut grad = Logits::zeros(logits.batch, logits.heads, logits.classes);
    let heads = logits.heads as f64;
    let mut total = 0.0;
    for m in 0..logits.heads {
        let count = (0..logits.batch).filter(|&b| decision.selected[b][m]).count();
        if count == 0 {
            continue;
        }
        let scale = 1.0 / (heads * count as f64);
        let mut head_sum = 0.0;
        for b in (0..logits.batch).filter(|&b| decision.selected[b][m]) {
            let target = decision.pseudo_class[b][m];
            let z = logits.get(b, m);
            head_sum += cross_entropy(z, target);
            let g = grad.get_mut(b, m);
            for (gi, p) in g.iter_mut().zip(softmax(z)) {
                *gi = p * scale;
            }
            g[target] -= scale;
        }
        total += head_sum / count as f64;
    }
    Ok(LossWithGrad {
        value: total / heads,
        grad,
    })
}

pub fn total_loss(supervised: f64, unsupervised: f64, lambda_u: f64) -> f64 {
    supervised + lambda_u * unsupervised
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(batch: usize, heads: usize, classes: usize, f: impl Fn(usize) -> f64) -> Logits {
        Logits {
            batch,
            heads,
            classes,
            data: (0..batch * heads * classes).map(f).collect(),
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let l = logits(1, 1, 3, |i| if i == 2 { 800.0 } else { 0.0 });
        assert!(supervised_loss(&l, &[2]).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn uniform_prediction_costs_ln_c_per_head() {
        let l = logits(1, 2, 10, |_| 0.3);
        let v = supervised_loss(&l, &[4]).unwrap().value;
        assert!((v - 2.0 * 10f64.ln()).abs() < 1e-12);
        assert!((v - 4.605170185988091).abs() < 1e-12);
    }

    #[test]
    fn head_permutation_invariance() {
        let l = logits(3, 3, 4, |i| ((i * 37) % 11) as f64 * 0.3);
        let mut p = l.clone();
        for b in 0..3 {
            let rows: Vec<Vec<f64>> = (0..3).map(|m| l.get(b, m).to_vec()).collect();
            for (m, src) in [2, 0, 1].into_iter().enumerate() {
                p.get_mut(b, m).copy_from_slice(&rows[src]);
            }
        }
        let a = supervised_loss(&l, &[0, 1, 3]).unwrap().value;
        let b = supervised_loss(&p, &[0, 1, 3]).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_diverge() {
        let l = logits(1, 1, 2, |i| if i == 0 { f64::NAN } else { 0.0 });
        assert!(matches!(supervised_loss(&l, &[0]), Err(Error::Diverged { .. })));
    }

    fn decision(sel: Vec<Vec<bool>>, cls: Vec<Vec<usize>>) -> PseudoLabelDecision {
        PseudoLabelDecision {
            pseudo_class: cls,
            selected: sel,
        }
    }

    #[test]
    fn empty_selection_is_zero() {
        let l = logits(2, 3, 4, |i| i as f64 * 0.1);
        let d = decision(vec![vec![false; 3]; 2], vec![vec![0; 3]; 2]);
        let out = unsupervised_loss(&l, &d).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn masked_mean_of_means() {
        // head 0 selects b0, b1; head 1 selects b2.
        let l = logits(3, 2, 3, |i| ((i * 13) % 7) as f64 * 0.4 - 1.0);
        let d = decision(
            vec![vec![true, false], vec![true, false], vec![false, true]],
            vec![vec![1, 0], vec![2, 0], vec![0, 2]],
        );
        let ce = |b, m, t| cross_entropy(l.get(b, m), t);
        let (a, b, c) = (ce(0, 0, 1), ce(1, 0, 2), ce(2, 1, 2));
        let expected = ((a + b) / 2.0 + c) / 2.0;
        let got = unsupervised_loss(&l, &d).unwrap().value;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.5, 0.25, 1.0), 0.75);
        assert_eq!(total_loss(0.5, 9.0, 0.0), 0.5);
    }
}
