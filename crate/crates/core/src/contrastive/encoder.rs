use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedParams;
use crate::error::{GtpError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

use super::augment::RgbImage;

/// Strided-conv patch encoder plus a two-layer projection head.
///
/// Each stage is a 3×3 stride-2 convolution followed by ReLU. The last
/// stage has `embed_dim` channels, and a global average pool turns it into
/// the embedding `f`. The head `Linear → ReLU → Linear` maps `f` to `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Patches are resampled to `input_size × input_size` before encoding.
    pub input_size: usize,
    /// Channel widths of the stages before the last one.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: vec![16, 32],
            embed_dim: 64,
            proj_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.embed_dim == 0 || self.proj_dim == 0 || self.channels.iter().any(|&c| c == 0) {
            return Err(GtpError::invalid("encoder sizes must be positive"));
        }
        if self.channels.len() < 2 || self.channels.len() > 3 {
            return Err(GtpError::invalid("encoder needs 3 or 4 conv stages"));
        }
        Ok(())
    }

    fn stage_channels(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![3];
        widths.extend(&self.channels);
        widths.push(self.embed_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
}

pub(crate) struct EncoderVars {
    conv_w: Vec<Var>,
    conv_b: Vec<Var>,
    head: [Var; 4],
}

impl EncoderParams {
    /// He-normal weights, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, 0xE4C0);
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for (cin, cout) in config.stage_channels() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            conv_w.push(rng::normal_tensor(&mut r, &[cout, cin, 3, 3], std));
            conv_b.push(Tensor::zeros(&[cout]));
        }
        let (d, dz) = (config.embed_dim, config.proj_dim);
        let head_w1 = rng::normal_tensor(&mut r, &[d, d], (2.0 / d as f64).sqrt());
        let head_w2 = rng::normal_tensor(&mut r, &[d, dz], (1.0 / d as f64).sqrt());
        Ok(Self {
            config,
            conv_w,
            conv_b,
            head_w1,
            head_b1: Tensor::zeros(&[1, d]),
            head_w2,
            head_b2: Tensor::zeros(&[1, dz]),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        EncoderVars {
            conv_w: self.conv_w.iter().map(&mut put).collect(),
            conv_b: self.conv_b.iter().map(&mut put).collect(),
            head: [
                put(&self.head_w1),
                put(&self.head_b1),
                put(&self.head_w2),
                put(&self.head_b2),
            ],
        }
    }

    /// Variables in the same order as `named()`.
    pub(crate) fn var_order(vars: &EncoderVars) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in vars.conv_w.iter().zip(&vars.conv_b) {
            out.push(*w);
            out.push(*b);
        }
        out.extend(vars.head);
        out
    }

    /// `[B, 3, S, S]` batch from images already at the input size, centered at 0.
    pub fn batch_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.height != s || img.width != s {
                return Err(GtpError::invalid(format!(
                    "encoder expects {s}×{s} input, got {}×{}",
                    img.height, img.width
                )));
            }
            data.extend(img.to_chw().into_iter().map(|v| v - 0.5));
        }
        Tensor::new(vec![images.len(), 3, s, s], data)
    }

    pub(crate) fn embed_vars(&self, tape: &mut Tape, vars: &EncoderVars, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b) in vars.conv_w.iter().zip(&vars.conv_b) {
            let c = tape.conv2d(h, *w, *b, 2, 1)?;
            h = tape.relu(c)?;
        }
        tape.global_avg_pool(h)
    }

    pub(crate) fn project_vars(&self, tape: &mut Tape, vars: &EncoderVars, f: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = vars.head;
        let h = tape.matmul(f, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, w2)?;
        tape.add_row(z, b2)
    }

    /// Embeddings `f` for a batch of images, `[B, D]`.
    pub fn embed(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(self.batch_tensor(images)?);
        let f = self.embed_vars(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }

    /// Projections `z` for a batch of images, `[B, D_z]`.
    pub fn project(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(self.batch_tensor(images)?);
        let f = self.embed_vars(&mut tape, &vars, x)?;
        let z = self.project_vars(&mut tape, &vars, f)?;
        Ok(tape.value(z).clone())
    }
}

impl NamedParams for EncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            out.push((format!("conv{i}.weight"), w));
            out.push((format!("conv{i}.bias"), b));
        }
        out.push(("head.0.weight".into(), &self.head_w1));
        out.push(("head.0.bias".into(), &self.head_b1));
        out.push(("head.1.weight".into(), &self.head_w2));
        out.push(("head.1.bias".into(), &self.head_b2));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()).enumerate() {
            out.push((format!("conv{i}.weight"), w));
            out.push((format!("conv{i}.bias"), b));
        }
        out.push(("head.0.weight".into(), &mut self.head_w1));
        out.push(("head.0.bias".into(), &mut self.head_b1));
        out.push(("head.1.weight".into(), &mut self.head_w2));
        out.push(("head.1.bias".into(), &mut self.head_b2));
        out
    }
}
