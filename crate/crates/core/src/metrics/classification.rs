use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    /// Set when the class was never predicted, so precision is reported as 0.
    pub precision_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// `matrix[true][predicted]`.
    pub matrix: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall and specificity per class, plus accuracy.
pub fn confusion_metrics(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<ConfusionReport> {
    if labels.is_empty() || labels.len() != predictions.len() {
        return Err(GtpError::invalid(format!(
            "need equal, nonzero numbers of labels and predictions, got {} and {}",
            labels.len(),
            predictions.len()
        )));
    }
    let mut matrix = vec![vec![0usize; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= num_classes || p >= num_classes {
            return Err(GtpError::invalid(format!("class id outside 0..{num_classes}")));
        }
        matrix[y][p] += 1;
    }
    let total = labels.len();
    let per_class = (0..num_classes)
        .map(|c| {
            let tp = matrix[c][c];
            let predicted: usize = (0..num_classes).map(|r| matrix[r][c]).sum();
            let actual: usize = matrix[c].iter().sum();
            let fp = predicted - tp;
            let tn = total - actual - fp;
            ClassMetrics {
                precision: ratio(tp, predicted),
                recall: ratio(tp, actual),
                specificity: ratio(tn, total - actual),
                precision_undefined: predicted == 0,
            }
        })
        .collect();
    let correct: usize = (0..num_classes).map(|c| matrix[c][c]).sum();
    Ok(ConfusionReport {
        matrix,
        per_class,
        accuracy: ratio(correct, total),
    })
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}
