use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::io;

use super::classification::{argmax, confusion_metrics, ConfusionReport};
use super::curves::{pr_curve, roc_auc, PrCurve, RocCurve};
use super::delong::DelongResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelongComparison {
    pub class: usize,
    pub model_a: String,
    pub model_b: String,
    pub result: DelongResult,
}

/// Full evaluation of class-probability predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub confusion: ConfusionReport,
    /// One-vs-rest curves; `None` for a class absent from (or filling) the labels.
    pub roc: Vec<Option<RocCurve>>,
    pub pr: Vec<Option<PrCurve>>,
    pub delong: Vec<DelongComparison>,
}

impl MetricsReport {
    pub fn from_probabilities(labels: &[usize], probs: &[Vec<f64>], num_classes: usize) -> Result<Self> {
        if probs.len() != labels.len() || probs.iter().any(|p| p.len() != num_classes) {
            return Err(GtpError::invalid("one probability vector per label is required"));
        }
        let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let confusion = confusion_metrics(labels, &preds, num_classes)?;
        let mut roc = Vec::with_capacity(num_classes);
        let mut pr = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let bin: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            roc.push(roc_auc(&scores, &bin).ok());
            pr.push(pr_curve(&scores, &bin).ok());
        }
        Ok(Self {
            samples: labels.len(),
            confusion,
            roc,
            pr,
            delong: Vec::new(),
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy
    }

    /// Mean one-vs-rest AUC over the classes that have a curve.
    pub fn macro_auc(&self) -> Option<f64> {
        let aucs: Vec<f64> = self.roc.iter().flatten().map(|r| r.auc).collect();
        (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
    }

    /// Rows `class,curve,threshold,x,y` with FPR/TPR for ROC and recall/precision for PR.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("class,curve,threshold,x,y\n");
        for (c, r) in self.roc.iter().enumerate() {
            let Some(r) = r else { continue };
            for i in 0..r.fpr.len() {
                let t = r.thresholds[i].map(|t| t.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{c},roc,{t},{},{}", r.fpr[i], r.tpr[i]);
            }
        }
        for (c, p) in self.pr.iter().enumerate() {
            let Some(p) = p else { continue };
            for i in 0..p.recall.len() {
                let _ = writeln!(out, "{c},pr,{},{},{}", p.thresholds[i], p.recall[i], p.precision[i]);
            }
        }
        out
    }

    /// Writes `metrics_report.json` and `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        io::create_dir(dir)?;
        #[derive(Serialize)]
        struct Doc<'a> {
            config: &'a serde_json::Value,
            accuracy: f64,
            macro_auc: Option<f64>,
            #[serde(flatten)]
            report: &'a MetricsReport,
        }
        let doc = Doc {
            config,
            accuracy: self.accuracy(),
            macro_auc: self.macro_auc(),
            report: self,
        };
        io::write_json(&dir.join("metrics_report.json"), &doc)?;
        let path = dir.join("curves.csv");
        std::fs::write(&path, self.curves_csv()).map_err(|e| GtpError::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(GtpError::invalid("mean of no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

/// Per-fold metrics and their mean ± sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldSummary {
    pub folds: Vec<MetricsReport>,
    pub accuracy: MeanStd,
    pub macro_auc: Option<MeanStd>,
    pub precision: Vec<MeanStd>,
    pub recall: Vec<MeanStd>,
    pub specificity: Vec<MeanStd>,
}

pub fn summarize_folds(folds: Vec<MetricsReport>) -> Result<KFoldSummary> {
    let acc: Vec<f64> = folds.iter().map(|f| f.accuracy()).collect();
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.macro_auc()).collect();
    let classes = folds.first().map(|f| f.confusion.per_class.len()).unwrap_or(0);
    let per = |pick: fn(&super::ClassMetrics) -> f64| -> Result<Vec<MeanStd>> {
        (0..classes)
            .map(|c| mean_std(&folds.iter().map(|f| pick(&f.confusion.per_class[c])).collect::<Vec<_>>()))
            .collect()
    };
    Ok(KFoldSummary {
        accuracy: mean_std(&acc)?,
        macro_auc: if aucs.len() == folds.len() { Some(mean_std(&aucs)?) } else { None },
        precision: per(|m| m.precision)?,
        recall: per(|m| m.recall)?,
        specificity: per(|m| m.specificity)?,
        folds,
    })
}

/// Splits `0..n` into `k` folds after a seeded shuffle; stratified by label
/// so every fold sees each class in proportion.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > labels.len() {
        return Err(GtpError::invalid(format!("cannot split {} samples into {k} folds", labels.len())));
    }
    let mut rng = crate::rng::stream(seed, 0xF01D);
    let order = crate::rng::permutation(&mut rng, labels.len());
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for c in 0..classes {
        for &i in order.iter().filter(|&&i| labels[i] == c) {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}
