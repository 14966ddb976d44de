use crate::error::{Error, Result};
use crate::math::{argmax, softmax};
use crate::model::{predict_classes, Logits};

/// Per-example, per-head pseudo-label and selection indicator (`[batch][head]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelDecision {
    pub pseudo_class: Vec<Vec<usize>>,
    pub selected: Vec<Vec<bool>>,
}

impl PseudoLabelDecision {
    pub fn batch(&self) -> usize {
        self.selected.len()
    }

    pub fn heads(&self) -> usize {
        self.selected.first().map_or(0, Vec::len)
    }

    /// Fraction of selected examples per head; zero for an empty batch.
    pub fn selected_fraction(&self) -> Vec<f64> {
        let n = self.batch();
        (0..self.heads())
            .map(|m| {
                if n == 0 {
                    0.0
                } else {
                    self.selected.iter().filter(|row| row[m]).count() as f64 / n as f64
                }
            })
            .collect()
    }
}

/// Agreement rule: head `m`'s pseudo-label is the mode of the other heads'
/// predictions (ties to the smallest class), selected only when that mode is
/// predicted by more than `M/2` of them.
pub fn peer_pseudo_labels(predicted: &[Vec<usize>]) -> Result<PseudoLabelDecision> {
    let heads = predicted.first().map_or(0, Vec::len);
    if predicted.iter().any(|row| row.len() != heads) {
        return Err(Error::contract("ragged prediction matrix"));
    }
    if !predicted.is_empty() && heads < 2 {
        return Err(Error::config(
            "agreement pseudo-labelling needs at least 2 heads; use the confidence threshold",
        ));
    }
    let num_classes = predicted.iter().flatten().max().map_or(0, |c| c + 1);
    let mut counts = vec![0usize; num_classes];
    let mut pseudo_class = Vec::with_capacity(predicted.len());
    let mut selected = Vec::with_capacity(predicted.len());
    for row in predicted {
        counts.fill(0);
        for &c in row {
            counts[c] += 1;
        }
        let mut classes = Vec::with_capacity(heads);
        let mut chosen = Vec::with_capacity(heads);
        for &own in row {
            counts[own] -= 1;
            let mut mode = 0;
            for c in 1..num_classes {
                if counts[c] > counts[mode] {
                    mode = c;
                }
            }
            classes.push(mode);
            chosen.push(2 * counts[mode] > heads);
            counts[own] += 1;
        }
        pseudo_class.push(classes);
        selected.push(chosen);
    }
    Ok(PseudoLabelDecision {
        pseudo_class,
        selected,
    })
}

/// Single-head rule: argmax class, selected when its probability is at least `threshold`.
pub fn threshold_pseudo_labels(probabilities: &[Vec<f64>], threshold: f64) -> Result<PseudoLabelDecision> {
    let mut pseudo_class = Vec::with_capacity(probabilities.len());
    let mut selected = Vec::with_capacity(probabilities.len());
    for (b, row) in probabilities.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.is_empty() || (sum - 1.0).abs() > 1e-5 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract(format!("row {b} is not a probability vector")));
        }
        let c = argmax(row);
        pseudo_class.push(vec![c]);
        selected.push(vec![row[c] >= threshold]);
    }
    Ok(PseudoLabelDecision {
        pseudo_class,
        selected,
    })
}

/// Pseudo-labels for every head from logits on the pseudo-labelling view.
///
/// Three or more heads use the agreement rule. With one head the head labels
/// itself through the confidence threshold; with two, each head takes the
/// thresholded prediction of its peer.
pub fn select_pseudo_labels(logits: &Logits, threshold: f64) -> Result<PseudoLabelDecision> {
    match logits.heads {
        0 => Err(Error::config("no heads")),
        1 | 2 => {
            let mut out = PseudoLabelDecision {
                pseudo_class: vec![Vec::with_capacity(logits.heads); logits.batch],
                selected: vec![Vec::with_capacity(logits.heads); logits.batch],
            };
            for m in 0..logits.heads {
                let source = logits.heads - 1 - m;
                let probs: Vec<Vec<f64>> = (0..logits.batch).map(|b| softmax(logits.get(b, source))).collect();
                let d = threshold_pseudo_labels(&probs, threshold)?;
                for b in 0..logits.batch {
                    out.pseudo_class[b].push(d.pseudo_class[b][0]);
                    out.selected[b].push(d.selected[b][0]);
                }
            }
            Ok(out)
        }
        _ => peer_pseudo_labels(&predict_classes(logits)),
    }
}
