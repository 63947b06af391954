use alloc::format;
use alloc::string::String;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::substrate::layers::Linear;
use crate::substrate::{ParamSet, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 32.0, dropout: 0.1 }
    }
}

/// Low-rank update `ΔW = (α/r)·A·B` with `A: [d_in × r]`, `B: [r × d_out]`.
///
/// `B` starts at zero, so a freshly wrapped layer reproduces its base.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize, cfg: &LoraConfig) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank >= d_in.min(d_out) {
            bail!(Config, "LoRA rank {} must be in 1..{}", cfg.rank, d_in.min(d_out));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            bail!(Config, "LoRA dropout {} outside [0, 1)", cfg.dropout);
        }
        Ok(LoraAdapter { prefix: prefix.into(), d_in, d_out, rank: cfg.rank, alpha: cfg.alpha, dropout: cfg.dropout })
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.prefix)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.prefix)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let bound = 1.0 / math::sqrt(self.d_in as f64);
        params.insert(self.a_name(), Tensor::uniform([self.d_in, self.rank], bound, rng));
        params.insert(self.b_name(), Tensor::zeros([self.rank, self.d_out]));
    }

    /// `(α/r)·dropout(x)·A·B`
    pub fn delta(&self, s: &mut Session, x: Var) -> Result<Var> {
        let a = s.param(&self.a_name())?;
        let b = s.param(&self.b_name())?;
        let x = s.dropout(x, self.dropout)?;
        let h = s.tape.matmul(x, a)?;
        let h = s.tape.matmul(h, b)?;
        Ok(s.tape.scale(h, self.scale()))
    }
}

/// A frozen linear layer plus a trainable low-rank adapter.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: LoraAdapter,
}

/// Wraps `base` with an adapter named `<base prefix>.lora_{a,b}`.
pub fn lora_wrap(base: Linear, cfg: &LoraConfig) -> Result<LoraLinear> {
    let adapter = LoraAdapter::new(base.prefix.clone(), base.d_in, base.d_out, cfg)?;
    Ok(LoraLinear { base, adapter })
}

impl LoraLinear {
    /// Adds adapter parameters and freezes the base weight and bias.
    pub fn attach<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        self.adapter.init(params, rng);
        params.freeze(&self.base.weight_name())?;
        params.freeze(&self.base.bias_name())
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.base.forward(s, x)?;
        let d = self.adapter.delta(s, x)?;
        s.tape.add(y, d)
    }
}
