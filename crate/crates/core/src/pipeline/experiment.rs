//! Training, evaluation, explanation and ablation over graph containers.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::graph::WsiGraph;
use crate::graphcam::{binarize_and_iou, graphcam, reconstruct_heatmap, write_heatmap, Heatmap, HeatmapSidecar, IouReport};
use crate::io;
use crate::metrics::{delong_test, stratified_folds, summarize_folds, DelongComparison, KFoldSummary, MeanStd, MetricsReport};
use crate::model::{forward, infer, load_model, save_model, train, write_history, GtpConfig, GtpParams, GraphInput, HistoryEntry, TrainExample, NUM_CLASSES};
use crate::synth::{DatasetManifest, Split};

use super::config::{derive_seed, RunConfig};
use super::stages::{load_graphs, GraphIndex, GraphRecord, CONFIG_FILE};

pub fn examples(graphs: &[WsiGraph]) -> Result<Vec<TrainExample>> {
    graphs
        .par_iter()
        .map(|g| {
            let label = g
                .label
                .ok_or_else(|| GtpError::validation(Path::new(&g.slide_id), "graph has no label"))?;
            Ok(TrainExample {
                input: GraphInput::from_graph(g)?,
                label,
            })
        })
        .collect()
}

/// Class probabilities for each input, computed without gradients.
pub fn predict(params: &GtpParams, inputs: &[&GraphInput]) -> Result<Vec<Vec<f64>>> {
    inputs
        .par_iter()
        .map(|input| Ok(forward(params, input, false, None)?.probabilities()))
        .collect()
}

/// One trained fold: its model, loss history and held-out predictions.
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub params: GtpParams,
    pub history: Vec<HistoryEntry>,
    pub probabilities: Vec<Vec<f64>>,
    pub report: MetricsReport,
}

fn fit_and_test(model: &GtpConfig, data: &[TrainExample], fold: usize, train_idx: Vec<usize>, test_idx: Vec<usize>) -> Result<FoldResult> {
    let seed = derive_seed(model.seed, fold as u64);
    let config = GtpConfig { seed, ..model.clone() };
    let train_set: Vec<TrainExample> = train_idx.iter().map(|&i| data[i].clone()).collect();
    let (params, history) = train(&train_set, &config)?;
    let inputs: Vec<&GraphInput> = test_idx.iter().map(|&i| &data[i].input).collect();
    let probabilities = predict(&params, &inputs)?;
    let labels: Vec<usize> = test_idx.iter().map(|&i| data[i].label).collect();
    let report = MetricsReport::from_probabilities(&labels, &probabilities, NUM_CLASSES)?;
    Ok(FoldResult {
        fold,
        seed,
        train: train_idx,
        test: test_idx,
        params,
        history,
        probabilities,
        report,
    })
}

/// Stratified k-fold cross-validation; with `k = 1` the dataset's own
/// train/val split trains the model and its test split evaluates it.
pub fn run_folds(model: &GtpConfig, data: &[TrainExample], splits: &[Split], k: usize) -> Result<Vec<FoldResult>> {
    if k == 1 {
        let train_idx: Vec<usize> = (0..data.len()).filter(|&i| splits[i] != Split::Test).collect();
        let test_idx: Vec<usize> = (0..data.len()).filter(|&i| splits[i] == Split::Test).collect();
        if test_idx.is_empty() {
            return Err(GtpError::invalid("single-split training needs slides tagged test"));
        }
        return Ok(vec![fit_and_test(model, data, 0, train_idx, test_idx)?]);
    }
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let folds = stratified_folds(&labels, k, model.seed)?;
    (0..k)
        .map(|f| {
            let train_idx: Vec<usize> = (0..k).filter(|&g| g != f).flat_map(|g| folds[g].iter().copied()).collect();
            let mut train_idx = train_idx;
            train_idx.sort_unstable();
            fit_and_test(model, data, f, train_idx, folds[f].clone())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldManifest {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: serde_json::Value,
    pub folds: usize,
    pub summary: KFoldSummary,
}

/// Trains and evaluates every fold, writing checkpoints, histories,
/// per-fold reports, out-of-fold predictions and `summary.json`.
pub fn train_stage(cfg: &RunConfig, graphs_dir: &Path, out: &Path) -> Result<TrainSummary> {
    let (index, graphs) = load_graphs(graphs_dir)?;
    let data = examples(&graphs)?;
    let splits: Vec<Split> = index.graphs.iter().map(|g| g.split).collect();
    let results = run_folds(&cfg.model, &data, &splits, cfg.folds)?;
    io::create_dir(out)?;
    let echo = cfg.echo();
    let ids = |idx: &[usize]| idx.iter().map(|&i| index.graphs[i].slide_id.clone()).collect::<Vec<_>>();
    let mut predictions = String::from("slide_id,fold,label");
    for c in 0..NUM_CLASSES {
        let _ = write!(predictions, ",p{c}");
    }
    predictions.push('\n');
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let dir = out.join(format!("fold{}", r.fold));
        save_model(&dir.join("model"), &r.params)?;
        write_history(&dir.join("history.csv"), &r.history)?;
        r.report.write(&dir, &echo)?;
        io::write_json(
            &dir.join("fold.json"),
            &FoldManifest {
                fold: r.fold,
                seed: r.seed,
                train: ids(&r.train),
                test: ids(&r.test),
                config: echo.clone(),
            },
        )?;
        for (&i, p) in r.test.iter().zip(&r.probabilities) {
            let _ = write!(predictions, "{},{},{}", index.graphs[i].slide_id, r.fold, data[i].label);
            for v in p {
                let _ = write!(predictions, ",{v}");
            }
            predictions.push('\n');
        }
        reports.push(r.report);
    }
    let path = out.join("predictions.csv");
    std::fs::write(&path, predictions).map_err(|e| GtpError::io(&path, e))?;
    let summary = TrainSummary {
        config: echo.clone(),
        folds: reports.len(),
        summary: summarize_folds(reports)?,
    };
    io::write_json(&out.join("summary.json"), &summary)?;
    io::write_json(&out.join(CONFIG_FILE), &echo)?;
    Ok(summary)
}

/// Evaluates a checkpoint on the listed slides, or on the held-out slides
/// recorded next to it, or else on every graph.
pub fn eval_stage(cfg: &RunConfig, model_dir: &Path, graphs_dir: &Path, slides: Option<Vec<String>>, out: &Path) -> Result<MetricsReport> {
    let params = load_model(model_dir)?;
    let (index, graphs) = load_graphs(graphs_dir)?;
    let fold_file = model_dir.parent().map(|p| p.join("fold.json"));
    let wanted: Option<Vec<String>> = match (slides, fold_file) {
        (Some(s), _) => Some(s),
        (None, Some(f)) if f.exists() => Some(io::read_json::<FoldManifest>(&f)?.test),
        _ => None,
    };
    let picked: Vec<usize> = match &wanted {
        Some(ids) => ids
            .iter()
            .map(|id| {
                index
                    .graphs
                    .iter()
                    .position(|g| &g.slide_id == id)
                    .ok_or_else(|| GtpError::validation(graphs_dir, format!("slide {id} not in graph index")))
            })
            .collect::<Result<_>>()?,
        None => (0..graphs.len()).collect(),
    };
    let inputs: Vec<GraphInput> = picked.iter().map(|&i| GraphInput::from_graph(&graphs[i])).collect::<Result<_>>()?;
    let probs = predict(&params, &inputs.iter().collect::<Vec<_>>())?;
    let labels: Vec<usize> = picked.iter().map(|&i| index.graphs[i].label).collect();
    let report = MetricsReport::from_probabilities(&labels, &probs, NUM_CLASSES)?;
    report.write(out, &cfg.echo())?;
    Ok(report)
}

/// A GraphCAM rendered at slide resolution.
pub struct Explanation {
    pub heatmap: Heatmap,
    /// Row-major, one value per slide pixel.
    pub pixels: Vec<f64>,
    pub iou: Option<IouReport>,
    pub sidecar: HeatmapSidecar,
}

/// GraphCAM of `target` (the predicted class when `None`) for one graph.
pub fn explain_graph(
    cfg: &RunConfig,
    params: &GtpParams,
    graph: &WsiGraph,
    record: &GraphRecord,
    target: Option<usize>,
    truth: Option<&[bool]>,
) -> Result<Explanation> {
    let input = GraphInput::from_graph(graph)?;
    let (probs, mut trace) = infer(params, &input)?;
    let target = target.unwrap_or_else(|| crate::metrics::argmax(&probs));
    let map = graphcam(&mut trace, params, target, cfg.explain.clamp)?;
    let heatmap = reconstruct_heatmap(&map.c_g, &graph.coords, record.grid_rows, record.grid_cols)?;
    let pixels = heatmap.upsample(record.stride, record.patch_size, record.height, record.width);
    let iou = truth.map(|t| binarize_and_iou(&pixels, t, &cfg.explain.thresholds)).transpose()?;
    let sidecar = HeatmapSidecar {
        slide_id: graph.slide_id.clone(),
        target_class: target,
        class_probability: map.class_probability,
        max_iou: iou.as_ref().map(|r| r.max_iou),
        argmax_threshold: iou.as_ref().map(|r| r.argmax_threshold),
        config: cfg.echo(),
    };
    Ok(Explanation {
        heatmap,
        pixels,
        iou,
        sidecar,
    })
}

/// Writes `<slide>_class<c>.{pgm,png,json}`; the slide image and mask are
/// taken from `data` when given.
pub fn explain_stage(
    cfg: &RunConfig,
    model_dir: &Path,
    graphs_dir: &Path,
    data: Option<&Path>,
    slide_id: &str,
    target: Option<usize>,
    out: &Path,
) -> Result<HeatmapSidecar> {
    if let Some(t) = target {
        if t >= NUM_CLASSES {
            return Err(GtpError::invalid(format!("class {t} outside 0..{NUM_CLASSES}")));
        }
    }
    let params = load_model(model_dir)?;
    let index: GraphIndex = io::read_json(&graphs_dir.join(super::stages::INDEX_FILE))?;
    let record = index
        .find(slide_id)
        .ok_or_else(|| GtpError::validation(graphs_dir, format!("slide {slide_id} not in graph index")))?;
    let graph = WsiGraph::load(&graphs_dir.join(&record.dir))?;
    let slide = match data {
        Some(d) => {
            let (manifest, dir) = DatasetManifest::load(d)?;
            let entry = manifest
                .find(slide_id)
                .ok_or_else(|| GtpError::validation(d, format!("slide {slide_id} not in dataset manifest")))?;
            Some(entry.read_slide(&dir)?)
        }
        None => None,
    };
    let truth = slide.as_ref().map(|s| s.truth_mask.as_slice());
    let ex = explain_graph(cfg, &params, &graph, record, target, truth)?;
    let stem = format!("{slide_id}_class{}", ex.sidecar.target_class);
    write_heatmap(
        out,
        &stem,
        &ex.pixels,
        record.height,
        record.width,
        slide.as_ref().map(|s| s.pixels.as_slice()),
        &ex.sidecar,
    )?;
    Ok(ex.sidecar)
}

/// One grid point of the hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pooled_nodes: usize,
    pub gc_layers: usize,
    pub blocks: usize,
    pub accuracy: MeanStd,
    pub macro_auc: Option<MeanStd>,
    /// Per-class DeLong comparison of pooled out-of-fold scores against the first row.
    pub delong_vs_first: Vec<DelongComparison>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: serde_json::Value,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pooled_nodes,gc_layers,blocks,accuracy_mean,accuracy_std,auc_mean,auc_std\n");
        for r in &self.rows {
            let (am, asd) = r.macro_auc.map_or((String::new(), String::new()), |m| (m.mean.to_string(), m.std.to_string()));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{am},{asd}",
                r.pooled_nodes, r.gc_layers, r.blocks, r.accuracy.mean, r.accuracy.std
            );
        }
        out
    }

    /// Fixed-width text table, accuracies as `mean(std)` in percent.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:>6} {:>3} {:>3}  {:>12}  {:>12}\n", "N_t", "M", "L", "accuracy", "macro AUC");
        for r in &self.rows {
            let pct = |m: &MeanStd| format!("{:.1}({:.1})", 100.0 * m.mean, 100.0 * m.std);
            let auc = r.macro_auc.as_ref().map(pct).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:>6} {:>3} {:>3}  {:>12}  {:>12}",
                r.pooled_nodes,
                r.gc_layers,
                r.blocks,
                pct(&r.accuracy),
                auc
            );
        }
        out
    }
}

/// Out-of-fold probabilities in dataset order.
fn out_of_fold(results: &[FoldResult], n: usize) -> Vec<Vec<f64>> {
    let mut probs = vec![Vec::new(); n];
    for r in results {
        for (&i, p) in r.test.iter().zip(&r.probabilities) {
            probs[i] = p.clone();
        }
    }
    probs
}

/// Cross-validates every point of the configured grid.
pub fn ablate_stage(cfg: &RunConfig, graphs_dir: &Path, out: &Path) -> Result<AblationTable> {
    let (index, graphs) = load_graphs(graphs_dir)?;
    let data = examples(&graphs)?;
    let splits: Vec<Split> = index.graphs.iter().map(|g| g.split).collect();
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let a = &cfg.ablation;
    let mut grid = Vec::new();
    for &n_t in &a.pooled_nodes {
        for &m in &a.gc_layers {
            for &l in &a.blocks {
                grid.push((n_t, m, l));
            }
        }
    }
    if grid.is_empty() {
        return Err(GtpError::invalid("ablation grid is empty"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut first: Option<Vec<Vec<f64>>> = None;
    for &(n_t, m, l) in &grid {
        let model = GtpConfig {
            pooled_nodes: n_t,
            gc_layers: m,
            blocks: l,
            steps: a.steps.unwrap_or(cfg.model.steps),
            ..cfg.model.clone()
        };
        let results = run_folds(&model, &data, &splits, a.folds)?;
        let oof = out_of_fold(&results, data.len());
        let covered: Vec<usize> = (0..data.len()).filter(|&i| !oof[i].is_empty()).collect();
        let summary = summarize_folds(results.into_iter().map(|r| r.report).collect())?;
        let mut delong = Vec::new();
        if let Some(base) = &first {
            for c in 0..NUM_CLASSES {
                let sa: Vec<f64> = covered.iter().map(|&i| base[i][c]).collect();
                let sb: Vec<f64> = covered.iter().map(|&i| oof[i][c]).collect();
                let y: Vec<bool> = covered.iter().map(|&i| labels[i] == c).collect();
                if let Ok(result) = delong_test(&sa, &sb, &y) {
                    delong.push(DelongComparison {
                        class: c,
                        model_a: format!("N_t={},M={},L={}", grid[0].0, grid[0].1, grid[0].2),
                        model_b: format!("N_t={n_t},M={m},L={l}"),
                        result,
                    });
                }
            }
        } else {
            first = Some(oof);
        }
        rows.push(AblationRow {
            pooled_nodes: n_t,
            gc_layers: m,
            blocks: l,
            accuracy: summary.accuracy,
            macro_auc: summary.macro_auc,
            delong_vs_first: delong,
        });
    }
    let table = AblationTable {
        config: cfg.echo(),
        rows,
    };
    io::create_dir(out)?;
    io::write_json(&out.join("ablation.json"), &table)?;
    let csv = out.join("ablation.csv");
    std::fs::write(&csv, table.to_csv()).map_err(|e| GtpError::io(&csv, e))?;
    let txt = out.join("ablation.txt");
    std::fs::write(&txt, table.to_text()).map_err(|e| GtpError::io(&txt, e))?;
    Ok(table)
}
