//! Parameterised building blocks. Each layer owns only its parameter names
//! and shapes; values live in a [`ParamSet`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::params::ParamSet;
use super::session::Session;
use super::tape::Var;
use super::tensor::Tensor;
use crate::backbone::lora::LoraAdapter;
use crate::error::{bail, Result};
use crate::math;

/// `y = x·W + b` with `W: [d_in × d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear { prefix: prefix.into(), d_in, d_out, bias: true }
    }

    pub fn without_bias(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear { bias: false, ..Linear::new(prefix, d_in, d_out) }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let bound = 1.0 / math::sqrt(self.d_in as f64);
        params.insert(self.weight_name(), Tensor::uniform([self.d_in, self.d_out], bound, rng));
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros([self.d_out]));
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let cols = s.value(x).shape().last().copied().unwrap_or(0);
        if cols != self.d_in {
            bail!(Dimension, "{}: expected trailing dim {}, got {cols}", self.prefix, self.d_in);
        }
        let w = s.param(&self.weight_name())?;
        let y = s.tape.matmul(x, w)?;
        if !self.bias {
            return Ok(y);
        }
        let b = s.param(&self.bias_name())?;
        s.tape.add_row(y, b)
    }
}

/// Temporal convolution over a `[C × L]` feature map.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    /// Stride 1 with `(k - 1) / 2` padding, so odd kernels keep the length.
    pub fn same(prefix: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            bail!(Config, "length-preserving conv needs an odd kernel, got {kernel}");
        }
        Ok(Conv1d { prefix: prefix.into(), c_in, c_out, kernel, stride: 1, padding: (kernel - 1) / 2 })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let bound = 1.0 / math::sqrt((self.c_in * self.kernel) as f64);
        params.insert(self.weight_name(), Tensor::uniform([self.c_out, self.c_in, self.kernel], bound, rng));
        params.insert(self.bias_name(), Tensor::zeros([self.c_out]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = s.param(&self.bias_name())?;
        let y = s.tape.conv1d(x, w, self.stride, self.padding)?;
        s.tape.add_col(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        LayerNorm { prefix: prefix.into(), dim, eps: 1e-5 }
    }

    pub fn init(&self, params: &mut ParamSet) {
        params.insert(format!("{}.gamma", self.prefix), Tensor::full([self.dim], 1.0));
        params.insert(format!("{}.beta", self.prefix), Tensor::zeros([self.dim]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(&format!("{}.gamma", self.prefix))?;
        let b = s.param(&format!("{}.beta", self.prefix))?;
        s.tape.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head scaled dot-product self-attention over `[P × d]` tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub q_lora: Option<LoraAdapter>,
    pub v_lora: Option<LoraAdapter>,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `[P × P]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            bail!(Config, "attention width {dim} is not divisible by {heads} heads");
        }
        Ok(MultiHeadAttention {
            dim,
            heads,
            q: Linear::new(format!("{prefix}.q"), dim, dim),
            // A key bias shifts every score in a row equally, which softmax ignores.
            k: Linear::without_bias(format!("{prefix}.k"), dim, dim),
            v: Linear::new(format!("{prefix}.v"), dim, dim),
            o: Linear::new(format!("{prefix}.o"), dim, dim),
            q_lora: None,
            v_lora: None,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(params, rng);
        }
        for a in [&self.q_lora, &self.v_lora].into_iter().flatten() {
            a.init(params, rng);
        }
    }

    fn project(s: &mut Session, base: &Linear, lora: &Option<LoraAdapter>, x: Var) -> Result<Var> {
        let y = base.forward(s, x)?;
        match lora {
            Some(a) => {
                let delta = a.delta(s, x)?;
                s.tape.add(y, delta)
            }
            None => Ok(y),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<AttentionOutput> {
        let q = Self::project(s, &self.q, &self.q_lora, x)?;
        let k = self.k.forward(s, x)?;
        let v = Self::project(s, &self.v, &self.v_lora, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let r = (h * dh, (h + 1) * dh);
                (
                    s.tape.slice_cols(q, r.0, r.1)?,
                    s.tape.slice_cols(k, r.0, r.1)?,
                    s.tape.slice_cols(v, r.0, r.1)?,
                )
            };
            let scores = s.tape.matmul_bt(qh, kh)?;
            let scores = s.tape.scale(scores, scale);
            let a = s.tape.softmax(scores)?;
            outs.push(s.tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { s.tape.concat(&outs, 1)? };
        let out = self.o.forward(s, cat)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(format!("{prefix}.fc1"), dim, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        self.fc1.init(params, rng);
        self.fc2.init(params, rng);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Attention + feed-forward with residuals and layer norm.
///
/// `norm_first` selects the pre-norm arrangement; otherwise the norm is
/// applied after each residual sum.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub norm_first: bool,
}

impl TransformerLayer {
    pub fn new(prefix: &str, dim: usize, heads: usize, ff_hidden: usize, norm_first: bool) -> Result<Self> {
        Ok(TransformerLayer {
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), dim, heads)?,
            ff: FeedForward::new(&format!("{prefix}.ff"), dim, ff_hidden),
            ln1: LayerNorm::new(format!("{prefix}.ln1"), dim),
            ln2: LayerNorm::new(format!("{prefix}.ln2"), dim),
            norm_first,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        self.attn.init(params, rng);
        self.ff.init(params, rng);
        self.ln1.init(params);
        self.ln2.init(params);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        if self.norm_first {
            let h = self.ln1.forward(s, x)?;
            let a = self.attn.forward(s, h)?.out;
            let x = s.tape.add(x, a)?;
            let h = self.ln2.forward(s, x)?;
            let f = self.ff.forward(s, h)?;
            s.tape.add(x, f)
        } else {
            let a = self.attn.forward(s, x)?.out;
            let x = s.tape.add(x, a)?;
            let x = self.ln1.forward(s, x)?;
            let f = self.ff.forward(s, x)?;
            let x = s.tape.add(x, f)?;
            self.ln2.forward(s, x)
        }
    }
}

/// Fixed sinusoidal position codes for the given position ids: `[P × dim]`.
pub fn sinusoidal_positions(positions: &[usize], dim: usize) -> Tensor {
    let mut data = vec![0.0; positions.len() * dim];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = math::powf(10_000.0, -2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            data[r * dim + i] = if i % 2 == 0 { math::sin(angle) } else { math::cos(angle) };
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("sized")
}
