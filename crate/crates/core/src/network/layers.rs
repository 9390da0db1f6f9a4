//! Parameterized building blocks shared by the conditioner and the denoiser.

use crate::error::Result;
use crate::ndcore::{Rng, Tape, Tensor, Var};
use crate::network::params::{ParamId, ParameterStore};

/// Fan-in scaled normal initialization, `N(0, 1/fan_in)`.
fn scaled_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, rng).scale(1.0 / (fan_in as f64).sqrt())
}

/// `y = x·W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.insert(format!("{name}.weight"), scaled_normal(&[fan_in, fan_out], fan_in, rng))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

/// Layer normalization over the last axis with a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.insert(format!("{name}.gain"), Tensor::ones(&[width]))?,
            shift: store.insert(format!("{name}.shift"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let y = tape.layer_norm(x, axis)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.shift);
        let y = tape.bias_mul(y, g, axis)?;
        tape.bias_add(y, b, axis)
    }
}

/// 3D convolution `[Cin, X, Y, Z] → [Cout, X', Y', Z']` with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel.pow(3);
        Ok(Conv3d {
            weight: store.insert(
                format!("{name}.weight"),
                scaled_normal(&[cout, cin, kernel, kernel, kernel], fan_in, rng),
            )?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv3d(x, w, [self.stride; 3], [self.pad; 3])?;
        tape.bias_add(y, b, 0)
    }
}

/// Pre-norm transformer block: multi-head self-attention over axis 1 of a
/// `[batch, seq, dim]` stack, then a GELU MLP, each with a residual path.
/// Distinct batch rows never interact.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    heads: usize,
    norm1: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(AttentionBlock {
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp_ratio * dim, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * dim, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let (b, n, dim) = match *tape.shape(x) {
            [b, n, dim] => (b, n, dim),
            ref s => {
                return Err(crate::Error::invalid(
                    "attention",
                    format!("expected [batch, seq, dim], got {s:?}"),
                ))
            }
        };
        let hd = dim / self.heads;
        let h = self.norm1.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, h)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, self.heads, hd])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let s = tape.narrow(qkv, 0, i, 1)?;
            *p = tape.reshape(s, &[b, self.heads, n, hd])?;
        }
        let [q, k, v] = parts;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let att = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(att, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, dim])?;
        let a = self.out.forward(tape, store, ctx)?;
        let x = tape.add(x, a)?;

        let h = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
