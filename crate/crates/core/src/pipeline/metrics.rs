use std::fmt::Write as _;

use super::PipelineError;

/// Classification quality against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// One-vs-rest true-positive rate per class.
    pub sensitivity: Vec<f64>,
    /// One-vs-rest true-negative rate per class.
    pub specificity: Vec<f64>,
}

/// Ratio with the vacuous case (no positives, resp. no negatives, to get
/// wrong) scored as 1.
fn rate(hits: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn evaluate(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Metrics, PipelineError> {
    if predicted.len() != truth.len() {
        return Err(PipelineError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let k = num_classes;
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label >= k {
                return Err(PipelineError::LabelOutOfRange { label, classes: k });
            }
        }
        confusion[t][p] += 1;
    }
    let total = truth.len() as u64;
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let mut sensitivity = Vec::with_capacity(k);
    let mut specificity = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c];
        let positives: u64 = confusion[c].iter().sum();
        let predicted_c: u64 = confusion.iter().map(|row| row[c]).sum();
        let fp = predicted_c - tp;
        let negatives = total - positives;
        sensitivity.push(rate(tp, positives));
        specificity.push(rate(negatives - fp, negatives));
    }
    Ok(Metrics {
        accuracy: correct as f64 / total as f64,
        confusion,
        sensitivity,
        specificity,
    })
}

impl Metrics {
    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    /// Line-oriented `key=value` report. Class names default to indices.
    pub fn to_text(&self, class_names: Option<&[String]>) -> String {
        let mut out = String::new();
        writeln!(out, "accuracy={:.6}", self.accuracy).unwrap();
        for c in 0..self.num_classes() {
            let name = class_names
                .and_then(|n| n.get(c))
                .cloned()
                .unwrap_or_else(|| c.to_string());
            writeln!(
                out,
                "class={c} name={name} sensitivity={:.6} specificity={:.6}",
                self.sensitivity[c], self.specificity[c]
            )
            .unwrap();
        }
        for (t, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "confusion_row={t} counts={}", cells.join(",")).unwrap();
        }
        out
    }
}
