use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedParams};
use crate::error::{GtpError, Result};
use crate::numerics::Tensor;
use crate::optim::{step_decay_lr, Adam};
use crate::rng;

use super::config::{GtpConfig, NUM_CLASSES};
use super::forward::{forward, ForwardTrace, GraphInput};
use super::params::GtpParams;

pub const MODEL_KIND: &str = "gtp";

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub input: GraphInput,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub total_loss: f64,
    pub ce_loss: f64,
    pub cut_loss: f64,
    pub ortho_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub cut: f64,
    pub ortho: f64,
}

/// Appends `CE + λ(L_cut + L_ortho)` to the trace's tape.
pub fn attach_loss(trace: &mut ForwardTrace, label: usize, lambda: f64) -> Result<(crate::Var, LossParts)> {
    if label >= NUM_CLASSES {
        return Err(GtpError::invalid(format!("label {label} outside 0..{NUM_CLASSES}")));
    }
    let tape = &mut trace.tape;
    let ce = tape.cross_entropy_rows(trace.transformer.logits, &[label], false)?;
    let pool_sum = tape.add(trace.pool.cut_loss, trace.pool.ortho_loss)?;
    let weighted = tape.scale(pool_sum, lambda)?;
    let total = tape.add(ce, weighted)?;
    let v = |x| tape.value(x).data()[0];
    let parts = LossParts {
        total: v(total),
        ce: v(ce),
        cut: v(trace.pool.cut_loss),
        ortho: v(trace.pool.ortho_loss),
    };
    Ok((total, parts))
}

/// Loss and parameter gradients (in `named()` order) for one graph.
pub fn sample_gradients(params: &GtpParams, example: &TrainExample) -> Result<(LossParts, Vec<Tensor>)> {
    let mut trace = forward(params, &example.input, true, None)?;
    let (total, parts) = attach_loss(&mut trace, example.label, params.config.lambda_cut)?;
    let grads = trace.tape.backward(total)?;
    Ok((parts, trace.vars.ordered.iter().map(|&v| grads.get_or_zeros(v)).collect()))
}

/// Cycles through shuffled epochs, one batch at a time.
struct BatchSampler {
    rng: rng::Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(seed: u64, n: usize) -> Self {
        let mut rng = rng::stream(seed, 0xBA7C);
        let order = rng::permutation(&mut rng, n);
        Self { rng, order, cursor: 0 }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = rng::permutation(&mut self.rng, self.order.len());
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Adam on per-sample gradients averaged over each batch, with step decay.
///
/// Samples in a batch are processed in parallel; their gradients are summed
/// in batch order, so results do not depend on the thread count.
pub fn train(examples: &[TrainExample], config: &GtpConfig) -> Result<(GtpParams, Vec<HistoryEntry>)> {
    train_from(GtpParams::init(config.clone())?, examples)
}

/// Continues training from existing parameters under their own config.
pub fn train_from(mut params: GtpParams, examples: &[TrainExample]) -> Result<(GtpParams, Vec<HistoryEntry>)> {
    let config = params.config.clone();
    config.validate()?;
    if examples.is_empty() {
        return Err(GtpError::invalid("empty training set"));
    }
    if let Some(e) = examples.iter().find(|e| e.label >= NUM_CLASSES) {
        return Err(GtpError::invalid(format!("label {} outside 0..{NUM_CLASSES}", e.label)));
    }
    let batch = config.batch_size.min(examples.len());
    let mut sampler = BatchSampler::new(config.seed, examples.len());
    let mut adam = Adam::for_params(&params.tensors());
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let picks = sampler.next(batch);
        let results: Vec<(LossParts, Vec<Tensor>)> = picks
            .par_iter()
            .map(|&i| sample_gradients(&params, &examples[i]))
            .collect::<Result<_>>()?;
        let mut sum: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut mean = LossParts {
            total: 0.0,
            ce: 0.0,
            cut: 0.0,
            ortho: 0.0,
        };
        let inv = 1.0 / batch as f64;
        for (parts, grads) in &results {
            for (acc, g) in sum.iter_mut().zip(grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * inv);
            }
            mean.total += parts.total * inv;
            mean.ce += parts.ce * inv;
            mean.cut += parts.cut * inv;
            mean.ortho += parts.ortho * inv;
        }
        let lr = step_decay_lr(config.lr, step, &config.milestones, config.lr_decay);
        adam.step(&mut params.tensors_mut(), &sum, lr)?;
        history.push(HistoryEntry {
            step,
            total_loss: mean.total,
            ce_loss: mean.ce,
            cut_loss: mean.cut,
            ortho_loss: mean.ortho,
            lr,
        });
    }
    Ok((params, history))
}

pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("step,total_loss,ce_loss,cut_loss,ortho_loss,lr\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            h.step, h.total_loss, h.ce_loss, h.cut_loss, h.ortho_loss, h.lr
        );
    }
    out
}

pub fn write_history(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| GtpError::io(path, e))
}

pub fn save_model(dir: &Path, params: &GtpParams) -> Result<()> {
    let config = serde_json::to_value(&params.config).map_err(|e| GtpError::invalid(e.to_string()))?;
    checkpoint::save(dir, MODEL_KIND, params.config.seed, config, params)
}

pub fn load_model(dir: &Path) -> Result<GtpParams> {
    let (manifest, values) = checkpoint::load(dir, MODEL_KIND)?;
    let config: GtpConfig = serde_json::from_value(manifest.config)
        .map_err(|e| GtpError::validation(dir, format!("bad model config: {e}")))?;
    let mut params = GtpParams::init(config)?;
    params.assign(&values)?;
    Ok(params)
}
