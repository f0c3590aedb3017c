use crate::error::{GtpError, Result};
use crate::model::{ForwardTrace, GtpParams, NUM_CLASSES};
use crate::numerics::Tensor;

use super::lrp;

/// Gradient of the target logit and propagated relevance at every head's
/// attention matrix of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRelevance {
    pub grad: Vec<Tensor>,
    pub relevance: Vec<Tensor>,
}

/// Per-block `(∇A, R)` for the target class, blocks in forward order.
///
/// The trace must come from a forward pass with trainable parameters so the
/// attention nodes carry gradients.
pub fn attention_relevance(trace: &mut ForwardTrace, params: &GtpParams, target: usize) -> Result<Vec<BlockRelevance>> {
    if target >= NUM_CLASSES {
        return Err(GtpError::invalid(format!("target class {target} outside 0..{NUM_CLASSES}")));
    }
    let logit = trace.tape.slice_cols(trace.transformer.logits, target, 1)?;
    let grads = trace.tape.backward(logit)?;
    let relevance = propagate(trace, params, target)?;
    Ok(trace
        .transformer
        .blocks
        .iter()
        .zip(relevance)
        .map(|(b, rel)| BlockRelevance {
            grad: b.heads.iter().map(|h| grads.get_or_zeros(h.attention)).collect(),
            relevance: rel,
        })
        .collect())
}

/// One-hot relevance at the logits.
pub fn output_relevance(target: usize) -> Tensor {
    let mut r = Tensor::zeros(&[1, NUM_CLASSES]);
    r.set(0, target, 1.0);
    r
}

/// Relevance at each head's attention matrix, from a one-hot at the target logit.
fn propagate(trace: &ForwardTrace, params: &GtpParams, target: usize) -> Result<Vec<Vec<Tensor>>> {
    let val = |v| trace.tape.value(v);
    let tr = &trace.transformer;
    let d = params.config.transformer_dim;
    let heads = params.config.heads;
    let dh = d / heads;

    let r_readout = lrp::linear(val(tr.readout), &params.head_w, &output_relevance(target));
    let last = tr.blocks.last().map(|b| b.output).unwrap_or(tr.tokens);
    let mut r = Tensor::zeros(val(last).shape());
    for c in 0..d {
        r.set(0, c, r_readout.get(0, c));
    }

    let mut per_block = vec![Vec::new(); tr.blocks.len()];
    for (l, bt) in tr.blocks.iter().enumerate().rev() {
        let bp = &params.blocks[l];
        let (r_mid_res, r_fc2) = lrp::add(val(bt.mid), val(bt.fc2), &r);
        let r_act = lrp::linear(val(bt.act), &bp.fc2_w, &r_fc2);
        let r_ln2 = lrp::linear(val(bt.ln2), &bp.fc1_w, &r_act);
        let r_mid = lrp::clone(val(bt.mid), &[&r_mid_res, &r_ln2]);

        let (r_t_res, r_msa) = lrp::add(val(bt.input), val(bt.msa), &r_mid);
        let r_concat = lrp::linear(val(bt.concat), &bp.msa, &r_msa);
        let n = r_concat.rows();
        let mut r_qkv = Tensor::zeros(&[n, 3 * d]);
        for (h, ht) in bt.heads.iter().enumerate() {
            let r_out = slice_cols(&r_concat, h * dh, dh);
            let (mut r_attn, mut r_v) = lrp::matmul(val(ht.attention), val(ht.v), &r_out);
            halve(&mut r_attn);
            halve(&mut r_v);
            let k_t = val(ht.k).transpose();
            let (mut r_q, r_kt) = lrp::matmul(val(ht.q), &k_t, &r_attn);
            let mut r_k = r_kt.transpose();
            halve(&mut r_q);
            halve(&mut r_k);
            for (block, src) in [(0, &r_q), (1, &r_k), (2, &r_v)] {
                for i in 0..n {
                    for c in 0..dh {
                        r_qkv.set(i, block * d + h * dh + c, src.get(i, c));
                    }
                }
            }
            per_block[l].push(r_attn);
        }
        let r_ln1 = lrp::linear(val(bt.ln1), &bp.qkv, &r_qkv);
        r = lrp::clone(val(bt.input), &[&r_t_res, &r_ln1]);
    }
    Ok(per_block)
}

fn halve(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
}

fn slice_cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r)[start..start + len].to_vec()).collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

/// `Ā = mean_h(clamp₊(∇A ⊙ R)) + I` for one block; `clamp = false` drops
/// the positive part.
pub fn weighted_attention(block: &BlockRelevance, clamp: bool) -> Tensor {
    let n = block.grad[0].rows();
    let k = block.grad.len() as f64;
    let mut out = Tensor::eye(n);
    for (g, r) in block.grad.iter().zip(&block.relevance) {
        for (o, (a, b)) in out.data_mut().iter_mut().zip(g.data().iter().zip(r.data())) {
            let v = a * b;
            *o += if clamp { v.max(0.0) } else { v } / k;
        }
    }
    out
}

/// Ordered product `Ā_1 · Ā_2 · … · Ā_L`.
pub fn relevance_product(weighted: &[Tensor]) -> Result<Tensor> {
    let mut it = weighted.iter();
    let first = it.next().ok_or_else(|| GtpError::invalid("no transformer blocks"))?.clone();
    it.try_fold(first, |acc, a| acc.matmul(a))
}

/// Transformer relevance `C_t` from per-block gradients and relevances.
pub fn transformer_relevance(blocks: &[BlockRelevance], clamp: bool) -> Result<(Tensor, Vec<Tensor>)> {
    let weighted: Vec<Tensor> = blocks.iter().map(|b| weighted_attention(b, clamp)).collect();
    Ok((relevance_product(&weighted)?, weighted))
}

/// Node relevance `C_g = S · r`, with `r` the class-token row of `C_t`
/// restricted to the pooled tokens.
pub fn reverse_pool(c_t: &Tensor, assignment: &Tensor) -> Result<Vec<f64>> {
    let nt = assignment.cols();
    if c_t.rows() != nt + 1 || c_t.cols() != nt + 1 {
        return Err(GtpError::Shape {
            op: "reverse_pool",
            left: c_t.shape().to_vec(),
            right: assignment.shape().to_vec(),
        });
    }
    let r = Tensor::matrix(nt, 1, c_t.row(0)[1..].to_vec())?;
    Ok(assignment.matmul(&r)?.into_data())
}

/// Everything GraphCAM derives for one slide and class.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    pub target_class: usize,
    pub class_probability: f64,
    pub c_t: Tensor,
    pub c_g: Vec<f64>,
    pub weighted: Vec<Tensor>,
}

pub fn graphcam(trace: &mut ForwardTrace, params: &GtpParams, target: usize, clamp: bool) -> Result<RelevanceMap> {
    let blocks = attention_relevance(trace, params, target)?;
    let (c_t, weighted) = transformer_relevance(&blocks, clamp)?;
    let c_g = reverse_pool(&c_t, trace.assignment())?;
    Ok(RelevanceMap {
        target_class: target,
        class_probability: trace.probabilities()[target],
        c_t,
        c_g,
        weighted,
    })
}
