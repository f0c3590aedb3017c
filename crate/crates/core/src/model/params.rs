use crate::checkpoint::NamedParams;
use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

use super::config::{GtpConfig, NUM_CLASSES};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[D_t, 3·D_t]`: query, key and value columns, each split evenly across heads.
    pub qkv: Tensor,
    pub msa: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtpParams {
    pub config: GtpConfig,
    pub gc: Vec<Tensor>,
    pub pool_w: Tensor,
    pub pool_b: Tensor,
    /// Bridge from the GC width to the transformer width, absent when they match.
    pub proj: Option<(Tensor, Tensor)>,
    pub cls_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl GtpParams {
    /// Transformer weights and the class token from N(0, 0.02²), layer-norm
    /// gains 1, biases 0. Graph-side weights are scaled by fan-in instead
    /// (He for the ReLU convolutions, LeCun for pooling and the bridge),
    /// since small patch embeddings would otherwise vanish after a few layers.
    pub fn init(config: GtpConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, 0x6770);
        let mut normal = |shape: &[usize], std: f64| rng::normal_tensor(&mut r, shape, std);
        let fan_in = |n: usize, gain: f64| (gain / n as f64).sqrt();
        let (f, h, d, m, nt) = (
            config.feature_dim,
            config.hidden_dim,
            config.transformer_dim,
            config.mlp_dim,
            config.pooled_nodes,
        );
        let gc = (0..config.gc_layers)
            .map(|i| {
                let rows = if i == 0 { f } else { h };
                normal(&[rows, h], fan_in(rows, 2.0))
            })
            .collect();
        let pool_w = normal(&[h, nt], fan_in(h, 1.0));
        let proj = (h != d).then(|| (normal(&[h, d], fan_in(h, 1.0)), Tensor::zeros(&[1, d])));
        let cls_token = normal(&[1, d], INIT_STD);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                qkv: normal(&[d, 3 * d], INIT_STD),
                msa: normal(&[d, d], INIT_STD),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                fc1_w: normal(&[d, m], INIT_STD),
                fc1_b: Tensor::zeros(&[1, m]),
                fc2_w: normal(&[m, d], INIT_STD),
                fc2_b: Tensor::zeros(&[1, d]),
            })
            .collect();
        let head_w = normal(&[d, NUM_CLASSES], INIT_STD);
        Ok(Self {
            gc,
            pool_w,
            pool_b: Tensor::zeros(&[1, nt]),
            proj,
            cls_token,
            blocks,
            norm_gain: Tensor::full(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[1, NUM_CLASSES]),
            config,
        })
    }
}

impl BlockParams {
    fn named(&self, l: usize) -> Vec<(String, &Tensor)> {
        vec![
            (format!("blocks.{l}.ln1.gain"), &self.ln1_gain),
            (format!("blocks.{l}.ln1.bias"), &self.ln1_bias),
            (format!("blocks.{l}.qkv.weight"), &self.qkv),
            (format!("blocks.{l}.msa.weight"), &self.msa),
            (format!("blocks.{l}.ln2.gain"), &self.ln2_gain),
            (format!("blocks.{l}.ln2.bias"), &self.ln2_bias),
            (format!("blocks.{l}.mlp.0.weight"), &self.fc1_w),
            (format!("blocks.{l}.mlp.0.bias"), &self.fc1_b),
            (format!("blocks.{l}.mlp.1.weight"), &self.fc2_w),
            (format!("blocks.{l}.mlp.1.bias"), &self.fc2_b),
        ]
    }

    fn named_mut(&mut self, l: usize) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("blocks.{l}.ln1.gain"), &mut self.ln1_gain),
            (format!("blocks.{l}.ln1.bias"), &mut self.ln1_bias),
            (format!("blocks.{l}.qkv.weight"), &mut self.qkv),
            (format!("blocks.{l}.msa.weight"), &mut self.msa),
            (format!("blocks.{l}.ln2.gain"), &mut self.ln2_gain),
            (format!("blocks.{l}.ln2.bias"), &mut self.ln2_bias),
            (format!("blocks.{l}.mlp.0.weight"), &mut self.fc1_w),
            (format!("blocks.{l}.mlp.0.bias"), &mut self.fc1_b),
            (format!("blocks.{l}.mlp.1.weight"), &mut self.fc2_w),
            (format!("blocks.{l}.mlp.1.bias"), &mut self.fc2_b),
        ]
    }
}

impl NamedParams for GtpParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.gc.iter().enumerate().map(|(i, w)| (format!("gc.{i}.weight"), w)).collect();
        out.push(("pool.weight".into(), &self.pool_w));
        out.push(("pool.bias".into(), &self.pool_b));
        if let Some((w, b)) = &self.proj {
            out.push(("proj.weight".into(), w));
            out.push(("proj.bias".into(), b));
        }
        out.push(("cls_token".into(), &self.cls_token));
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(l));
        }
        out.push(("norm.gain".into(), &self.norm_gain));
        out.push(("norm.bias".into(), &self.norm_bias));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            self.gc.iter_mut().enumerate().map(|(i, w)| (format!("gc.{i}.weight"), w)).collect();
        out.push(("pool.weight".into(), &mut self.pool_w));
        out.push(("pool.bias".into(), &mut self.pool_b));
        if let Some((w, b)) = &mut self.proj {
            out.push(("proj.weight".into(), w));
            out.push(("proj.bias".into(), b));
        }
        out.push(("cls_token".into(), &mut self.cls_token));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(l));
        }
        out.push(("norm.gain".into(), &mut self.norm_gain));
        out.push(("norm.bias".into(), &mut self.norm_bias));
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub qkv: Var,
    pub msa: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Tape handles for every parameter, mirroring [`GtpParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub gc: Vec<Var>,
    pub pool_w: Var,
    pub pool_b: Var,
    pub proj: Option<(Var, Var)>,
    pub cls_token: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub head_w: Var,
    pub head_b: Var,
    /// All handles in `named()` order.
    pub ordered: Vec<Var>,
}

impl ModelVars {
    /// Puts every parameter on the tape, as leaves when `trainable`.
    pub fn bind(params: &GtpParams, tape: &mut Tape, trainable: bool) -> Self {
        let vars: Vec<Var> = params
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self::unpack(&params.config, params.proj.is_some(), &vars)
    }

    /// Interprets handles given in `named()` order.
    pub fn unpack(config: &GtpConfig, has_proj: bool, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("one handle per parameter");
        let gc = (0..config.gc_layers).map(|_| next()).collect();
        let pool_w = next();
        let pool_b = next();
        let proj = has_proj.then(|| (next(), next()));
        let cls_token = next();
        let blocks = (0..config.blocks)
            .map(|_| BlockVars {
                ln1_gain: next(),
                ln1_bias: next(),
                qkv: next(),
                msa: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        Self {
            gc,
            pool_w,
            pool_b,
            proj,
            cls_token,
            blocks,
            norm_gain: next(),
            norm_bias: next(),
            head_w: next(),
            head_b: next(),
            ordered: vars.to_vec(),
        }
    }
}
