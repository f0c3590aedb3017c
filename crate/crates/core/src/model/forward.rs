use std::sync::Arc;

use crate::error::{GtpError, Result};
use crate::graph::{sparse_normalized, sparse_self_loop, WsiGraph};
use crate::numerics::{softmax_rows, SparseMatrix, Tape, Tensor, Var};

use super::params::{BlockVars, GtpParams, ModelVars};

/// Constant graph operators for one slide, computed once and reused.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub features: Tensor,
    /// `Â`, the normalized self-looped adjacency used by graph convolution.
    pub a_hat: Arc<SparseMatrix>,
    /// `Ã = A + I`, used by the pooling losses.
    pub a_tilde: Arc<SparseMatrix>,
    /// `D̃` as a diagonal operator.
    pub degree: Arc<SparseMatrix>,
}

impl GraphInput {
    pub fn new(features: Tensor, edges: &[(usize, usize)]) -> Result<Self> {
        let n = features.rows();
        let (a_tilde, degrees) = sparse_self_loop(edges, n)?;
        Ok(Self {
            a_hat: Arc::new(sparse_normalized(edges, n)?),
            a_tilde: Arc::new(a_tilde),
            degree: Arc::new(SparseMatrix::diagonal(&degrees)),
            features,
        })
    }

    pub fn from_graph(graph: &WsiGraph) -> Result<Self> {
        Self::new(graph.features.clone(), &graph.edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// `H' = ReLU(Â H W)`.
pub fn gcn_layer(tape: &mut Tape, h: Var, a_hat: &Arc<SparseMatrix>, w: Var) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let ahw = tape.spmm(a_hat, hw)?;
    tape.relu(ahw)
}

/// Value-level [`gcn_layer`].
pub fn gcn_forward(h: &Tensor, a_hat: &SparseMatrix, w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (hv, wv) = (tape.constant(h.clone()), tape.constant(w.clone()));
    let out = gcn_layer(&mut tape, hv, &Arc::new(a_hat.clone()), wv)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    /// Row-stochastic assignment `S`, `N_g × N_t`.
    pub assignment: Var,
    /// `Sᵀ H`.
    pub pooled: Var,
    pub cut_loss: Var,
    pub ortho_loss: Var,
    /// `Sᵀ Ã S`, before the diagonal is removed.
    pub coarse_adjacency: Var,
}

/// Min-cut pooling from assignment logits `h·W + b`.
pub fn mincut_pool(
    tape: &mut Tape,
    h: Var,
    assign_logits: Var,
    a_tilde: &Arc<SparseMatrix>,
    degree: &Arc<SparseMatrix>,
) -> Result<PoolVars> {
    let (ng, nt) = (tape.value(assign_logits).rows(), tape.value(assign_logits).cols());
    if nt > ng {
        return Err(GtpError::invalid(format!("cannot pool {ng} nodes into {nt} clusters")));
    }
    let s = tape.softmax_rows(assign_logits)?;
    let st = tape.transpose(s)?;
    let pooled = tape.matmul(st, h)?;

    let a_s = tape.spmm(a_tilde, s)?;
    let coarse = tape.matmul(st, a_s)?;
    let num = tape.trace(coarse)?;
    let d_s = tape.spmm(degree, s)?;
    let vol = tape.matmul(st, d_s)?;
    let den = tape.trace(vol)?;
    let ratio = tape.div_by_scalar(num, den)?;
    let cut_loss = tape.scale(ratio, -1.0)?;

    let gram = tape.matmul(st, s)?;
    let gram_norm = tape.frobenius_norm(gram)?;
    let unit = tape.div_by_scalar(gram, gram_norm)?;
    let target = tape.constant(Tensor::eye(nt).map(|v| v / (nt as f64).sqrt()));
    let diff = tape.sub(unit, target)?;
    let ortho_loss = tape.frobenius_norm(diff)?;
    Ok(PoolVars {
        assignment: s,
        pooled,
        cut_loss,
        ortho_loss,
        coarse_adjacency: coarse,
    })
}

/// `Sᵀ Ã S` with its diagonal zeroed, then symmetrically degree-normalized.
pub fn pooled_adjacency(coarse: &Tensor) -> Tensor {
    let n = coarse.rows();
    let mut a = coarse.clone();
    for i in 0..n {
        a.set(i, i, 0.0);
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>().sqrt() + 1e-15).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            a.set(i, j, v / d[i] / d[j]);
        }
    }
    a
}

/// Value-level pooling outputs.
#[derive(Debug, Clone)]
pub struct PoolResult {
    pub pooled: Tensor,
    pub adjacency: Tensor,
    pub assignment: Tensor,
    pub cut_loss: f64,
    pub ortho_loss: f64,
}

/// Pools `h` under the assignment `softmax(logits)`.
pub fn mincut_pool_values(h: &Tensor, logits: &Tensor, a_tilde: &SparseMatrix, degrees: &[f64]) -> Result<PoolResult> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let lv = tape.constant(logits.clone());
    let p = mincut_pool(
        &mut tape,
        hv,
        lv,
        &Arc::new(a_tilde.clone()),
        &Arc::new(SparseMatrix::diagonal(degrees)),
    )?;
    Ok(PoolResult {
        pooled: tape.value(p.pooled).clone(),
        adjacency: pooled_adjacency(tape.value(p.coarse_adjacency)),
        assignment: tape.value(p.assignment).clone(),
        cut_loss: tape.value(p.cut_loss).data()[0],
        ortho_loss: tape.value(p.ortho_loss).data()[0],
    })
}

/// Replaces one head's attention matrix with a fixed tensor; used to probe
/// the logit as a function of attention entries.
#[derive(Debug, Clone)]
pub struct AttentionOverride {
    pub block: usize,
    pub head: usize,
    pub attention: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Softmax attention `A`, `(N_t+1) × (N_t+1)`.
    pub attention: Var,
    /// `A · v`.
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: Var,
    pub ln1: Var,
    pub heads: Vec<HeadTrace>,
    pub concat: Var,
    pub msa: Var,
    /// `t' = t + MSA(LN(t))`.
    pub mid: Var,
    pub ln2: Var,
    pub fc1: Var,
    pub act: Var,
    pub fc2: Var,
    pub output: Var,
}

/// Multi-head self-attention without biases.
pub fn msa(
    tape: &mut Tape,
    x: Var,
    qkv_w: Var,
    msa_w: Var,
    heads: usize,
    fixed: Option<(usize, &Tensor)>,
) -> Result<(Var, Var, Vec<HeadTrace>)> {
    let d = tape.value(msa_w).rows();
    if heads == 0 || d % heads != 0 {
        return Err(GtpError::invalid(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qkv = tape.matmul(x, qkv_w)?;
    let mut traces = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let attention = match fixed {
            Some((fh, a)) if fh == h => tape.constant(a.clone()),
            _ => {
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                tape.softmax_rows(scaled)?
            }
        };
        let output = tape.matmul(attention, v)?;
        traces.push(HeadTrace {
            q,
            k,
            v,
            attention,
            output,
        });
    }
    let outs: Vec<Var> = traces.iter().map(|t| t.output).collect();
    let concat = tape.concat_cols(&outs)?;
    let out = tape.matmul(concat, msa_w)?;
    Ok((out, concat, traces))
}

/// Value-level [`msa`]: output and per-head attention.
pub fn msa_values(x: &Tensor, qkv_w: &Tensor, msa_w: &Tensor, heads: usize) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let qv = tape.constant(qkv_w.clone());
    let mv = tape.constant(msa_w.clone());
    let (out, _, traces) = msa(&mut tape, xv, qv, mv, heads, None)?;
    let attn = traces.iter().map(|t| tape.value(t.attention).clone()).collect();
    Ok((tape.value(out).clone(), attn))
}

fn block(tape: &mut Tape, t: Var, b: &BlockVars, heads: usize, fixed: Option<(usize, &Tensor)>) -> Result<BlockTrace> {
    let ln1 = tape.layernorm(t, b.ln1_gain, b.ln1_bias)?;
    let (msa_out, concat, head_traces) = msa(tape, ln1, b.qkv, b.msa, heads, fixed)?;
    let mid = tape.add(t, msa_out)?;
    let ln2 = tape.layernorm(mid, b.ln2_gain, b.ln2_bias)?;
    let h1 = tape.matmul(ln2, b.fc1_w)?;
    let fc1 = tape.add_row(h1, b.fc1_b)?;
    let act = tape.gelu(fc1)?;
    let h2 = tape.matmul(act, b.fc2_w)?;
    let fc2 = tape.add_row(h2, b.fc2_b)?;
    let output = tape.add(mid, fc2)?;
    Ok(BlockTrace {
        input: t,
        ln1,
        heads: head_traces,
        concat,
        msa: msa_out,
        mid,
        ln2,
        fc1,
        act,
        fc2,
        output,
    })
}

/// Transformer part of a forward pass.
#[derive(Debug, Clone)]
pub struct TransformerVars {
    /// `[x_class; h_1; …; h_Nt]`.
    pub tokens: Var,
    pub blocks: Vec<BlockTrace>,
    /// Layer-normed class-token row.
    pub readout: Var,
    /// `1 × 3`.
    pub logits: Var,
}

/// Class token, `L` pre-norm blocks and the class-token readout.
pub fn transformer(
    tape: &mut Tape,
    x: Var,
    vars: &ModelVars,
    heads: usize,
    attention_override: Option<&AttentionOverride>,
) -> Result<TransformerVars> {
    let tokens = tape.concat_rows(&[vars.cls_token, x])?;
    let mut t = tokens;
    let mut blocks = Vec::with_capacity(vars.blocks.len());
    for (l, b) in vars.blocks.iter().enumerate() {
        let fixed = attention_override
            .filter(|o| o.block == l)
            .map(|o| (o.head, &o.attention));
        let trace = block(tape, t, b, heads, fixed)?;
        t = trace.output;
        blocks.push(trace);
    }
    let cls = tape.slice_rows(t, 0, 1)?;
    let readout = tape.layernorm(cls, vars.norm_gain, vars.norm_bias)?;
    let h = tape.matmul(readout, vars.head_w)?;
    let logits = tape.add_row(h, vars.head_b)?;
    Ok(TransformerVars {
        tokens,
        blocks,
        readout,
        logits,
    })
}

/// Logits for already-pooled tokens of width `D_t`.
pub fn transformer_forward(x_pool: &Tensor, params: &GtpParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = ModelVars::bind(params, &mut tape, false);
    let x = tape.constant(x_pool.clone());
    let out = transformer(&mut tape, x, &vars, params.config.heads, None)?;
    Ok(tape.value(out.logits).data().to_vec())
}

/// Everything a forward pass produced, with the tape kept alive for
/// gradient and relevance queries.
pub struct ForwardTrace {
    pub tape: Tape,
    pub vars: ModelVars,
    pub gcn: Vec<Var>,
    pub pool: PoolVars,
    /// Pooled tokens after the width bridge.
    pub pooled_tokens: Var,
    pub transformer: TransformerVars,
}

impl ForwardTrace {
    pub fn logits(&self) -> Vec<f64> {
        self.tape.value(self.transformer.logits).data().to_vec()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax_rows(self.tape.value(self.transformer.logits)).into_data()
    }

    pub fn assignment(&self) -> &Tensor {
        self.tape.value(self.pool.assignment)
    }

    pub fn pooled_adjacency(&self) -> Tensor {
        pooled_adjacency(self.tape.value(self.pool.coarse_adjacency))
    }

    pub fn attention(&self, block: usize, head: usize) -> &Tensor {
        self.tape.value(self.transformer.blocks[block].heads[head].attention)
    }

    pub fn cut_loss(&self) -> f64 {
        self.tape.value(self.pool.cut_loss).data()[0]
    }

    pub fn ortho_loss(&self) -> f64 {
        self.tape.value(self.pool.ortho_loss).data()[0]
    }
}

/// Graph-side and transformer-side handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardParts {
    pub gcn: Vec<Var>,
    pub pool: PoolVars,
    pub pooled_tokens: Var,
    pub transformer: TransformerVars,
}

/// Runs the whole model on `vars` already placed on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    input: &GraphInput,
    heads: usize,
    attention_override: Option<&AttentionOverride>,
) -> Result<ForwardParts> {
    let mut h = tape.constant(input.features.clone());
    let mut gcn = Vec::with_capacity(vars.gc.len());
    for &w in &vars.gc {
        h = gcn_layer(tape, h, &input.a_hat, w)?;
        gcn.push(h);
    }
    let hw = tape.matmul(h, vars.pool_w)?;
    let logits = tape.add_row(hw, vars.pool_b)?;
    let pool = mincut_pool(tape, h, logits, &input.a_tilde, &input.degree)?;
    let pooled_tokens = match vars.proj {
        Some((w, b)) => {
            let x = tape.matmul(pool.pooled, w)?;
            tape.add_row(x, b)?
        }
        None => pool.pooled,
    };
    let transformer = transformer(tape, pooled_tokens, vars, heads, attention_override)?;
    Ok(ForwardParts {
        gcn,
        pool,
        pooled_tokens,
        transformer,
    })
}

/// Forward pass; `trainable` puts parameters on the tape as leaves so that
/// gradients (of the loss or of a logit) can be taken afterwards.
pub fn forward(
    params: &GtpParams,
    input: &GraphInput,
    trainable: bool,
    attention_override: Option<&AttentionOverride>,
) -> Result<ForwardTrace> {
    if input.features.cols() != params.config.feature_dim {
        return Err(GtpError::invalid(format!(
            "graph features have width {}, model expects {}",
            input.features.cols(),
            params.config.feature_dim
        )));
    }
    let mut tape = Tape::new();
    let vars = ModelVars::bind(params, &mut tape, trainable);
    let parts = forward_on_tape(&mut tape, &vars, input, params.config.heads, attention_override)?;
    Ok(ForwardTrace {
        tape,
        vars,
        gcn: parts.gcn,
        pool: parts.pool,
        pooled_tokens: parts.pooled_tokens,
        transformer: parts.transformer,
    })
}

/// Class probabilities and the retained trace.
pub fn infer(params: &GtpParams, input: &GraphInput) -> Result<(Vec<f64>, ForwardTrace)> {
    let trace = forward(params, input, true, None)?;
    Ok((trace.probabilities(), trace))
}
