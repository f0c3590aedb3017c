use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};

/// Distinct scores in descending order with the cumulative positive and
/// negative counts at or above each.
fn cumulative(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, usize, usize)>> {
    if scores.len() != labels.len() {
        return Err(GtpError::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GtpError::NonFinite("scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = k + 1 == order.len() || scores[order[k + 1]] != scores[i];
        if last_of_tie {
            out.push((scores[i], tp, fp));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// Score threshold for each point; the leading (0, 0) point has none.
    pub thresholds: Vec<Option<f64>>,
    pub auc: f64,
}

/// ROC over every distinct score; tied scores move both rates at once, so
/// the trapezoid area equals the rank-averaged Mann-Whitney statistic.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let cum = cumulative(scores, labels)?;
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(GtpError::invalid("ROC needs both positive and negative samples"));
    }
    let mut curve = RocCurve {
        fpr: vec![0.0],
        tpr: vec![0.0],
        thresholds: vec![None],
        auc: 0.0,
    };
    // Twice the area in units of 1/(P·N), accumulated exactly.
    let mut area2: u128 = 0;
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    for &(s, tp, fp) in &cum {
        area2 += ((fp - prev_fp) * (tp + prev_tp)) as u128;
        curve.fpr.push(fp as f64 / n as f64);
        curve.tpr.push(tp as f64 / p as f64);
        curve.thresholds.push(Some(s));
        (prev_tp, prev_fp) = (tp, fp);
    }
    curve.auc = area2 as f64 / (2 * p * n) as f64;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub average_precision: f64,
}

/// Precision and recall at each distinct score threshold;
/// `AP = Σ (R_i − R_{i−1}) · P_i`.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    let cum = cumulative(scores, labels)?;
    let p = labels.iter().filter(|&&l| l).count();
    if p == 0 {
        return Err(GtpError::invalid("PR curve needs at least one positive sample"));
    }
    let mut curve = PrCurve {
        precision: Vec::new(),
        recall: Vec::new(),
        thresholds: Vec::new(),
        average_precision: 0.0,
    };
    let mut prev_recall = 0.0;
    for &(s, tp, fp) in &cum {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / p as f64;
        curve.average_precision += (recall - prev_recall) * precision;
        prev_recall = recall;
        curve.precision.push(precision);
        curve.recall.push(recall);
        curve.thresholds.push(s);
    }
    Ok(curve)
}
