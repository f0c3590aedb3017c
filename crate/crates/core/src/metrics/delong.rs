use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};

/// `log10(0.05)`, the usual significance line for reported p-values.
pub const LOG10_ALPHA_05: f64 = -1.301_029_995_663_981;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub log10_p: f64,
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Structural components `V10` (one per positive) and `V01` (one per negative).
fn components(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let v10 = pos.iter().map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64).collect();
    let v01 = neg.iter().map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64).collect();
    (v10, v01)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

/// `log10` of the two-sided normal tail probability `2·(1 − Φ(|z|))`.
pub fn log10_two_sided_p(z: f64) -> f64 {
    let x = z.abs() / std::f64::consts::SQRT_2;
    let p = libm::erfc(x);
    if p > 1e-300 {
        return p.log10();
    }
    // erfc(x) ~ exp(−x²) / (x√π) · (1 − 1/(2x²) + 3/(4x⁴))
    let series = 1.0 - 1.0 / (2.0 * x * x) + 3.0 / (4.0 * x.powi(4));
    (-x * x - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()) / std::f64::consts::LN_10
}

/// Paired comparison of two AUCs on the same samples.
///
/// A zero-variance difference (for example identical score vectors) gives
/// `z = 0` and `log10 p = 0` when the AUCs agree.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(GtpError::invalid("paired scores and labels differ in length"));
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p < 2 || n < 2 {
        return Err(GtpError::invalid("DeLong test needs at least two positives and two negatives"));
    }
    let (a10, a01) = components(scores_a, labels);
    let (b10, b01) = components(scores_b, labels);
    let (auc_a, auc_b) = (mean(&a10), mean(&b10));
    let var = (covariance(&a10, &a10) + covariance(&b10, &b10) - 2.0 * covariance(&a10, &b10)) / p as f64
        + (covariance(&a01, &a01) + covariance(&b01, &b01) - 2.0 * covariance(&a01, &b01)) / n as f64;
    let diff = auc_a - auc_b;
    if var <= 1e-15 {
        if diff.abs() < 1e-12 {
            return Ok(DelongResult {
                auc_a,
                auc_b,
                z: 0.0,
                log10_p: 0.0,
            });
        }
        return Err(GtpError::invalid(
            "AUCs differ but the variance of their difference is zero; the test is undefined",
        ));
    }
    let z = diff / var.sqrt();
    Ok(DelongResult {
        auc_a,
        auc_b,
        z,
        log10_p: log10_two_sided_p(z),
    })
}
