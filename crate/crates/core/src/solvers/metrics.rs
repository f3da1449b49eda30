use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean F1 over classes that occur among the labels or the predictions.
    pub macro_f1: f64,
}

/// `counts[label][pred]`.
pub fn confusion_matrix(
    decisions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if decisions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} decisions for {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in decisions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::input(format!(
                "class index out of range for {num_classes} classes"
            )));
        }
        counts[y][p] += 1;
    }
    Ok(counts)
}

pub fn evaluate(decisions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::input("cannot evaluate an empty prediction set"));
    }
    let num_classes = decisions.iter().chain(labels).max().map_or(0, |m| m + 1);
    let counts = confusion_matrix(decisions, labels, num_classes)?;
    let correct: usize = (0..num_classes).map(|c| counts[c][c]).sum();
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        let tp = counts[c][c] as f64;
        let actual: usize = counts[c].iter().sum();
        let predicted: usize = counts.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        present += 1;
        let denom = (actual + predicted) as f64;
        f1_sum += 2.0 * tp / denom;
    }
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: f1_sum / present as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_correct() {
        let m = evaluate(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn constant_positive_on_balanced_binary() {
        let m = evaluate(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // positive class: precision 1/2, recall 1 → 2/3; negative class: 0
        assert!((m.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(evaluate(&[], &[]), Err(Error::Input(_))));
        assert!(matches!(evaluate(&[0], &[0, 1]), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn agrees_with_brute_force_counts(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (pred, lab): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let m = evaluate(&pred, &lab).unwrap();
            let acc = pairs.iter().filter(|(p, y)| p == y).count() as f64 / pairs.len() as f64;
            prop_assert!((m.accuracy - acc).abs() < 1e-15);
            let mut f1s = Vec::new();
            for c in 0..4 {
                let tp = pairs.iter().filter(|&&(p, y)| p == c && y == c).count() as f64;
                let fp = pairs.iter().filter(|&&(p, y)| p == c && y != c).count() as f64;
                let fneg = pairs.iter().filter(|&&(p, y)| p != c && y == c).count() as f64;
                if tp + fp + fneg > 0.0 {
                    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
                    f1s.push(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 });
                }
            }
            let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
            prop_assert!((m.macro_f1 - macro_f1).abs() < 1e-12);
        }
    }
}
