//! Frozen transformer stack with LoRA adapters on its attention
//! projections, plus the token projection feeding it and the forecast
//! head reading from it.

pub mod lora;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::substrate::layers::{sinusoidal_positions, LayerNorm, Linear, TransformerLayer};
use crate::substrate::{ParamSet, Session, Var};
use lora::{LoraAdapter, LoraConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub frozen: bool,
    pub lora_targets: Vec<LoraTarget>,
    pub lora: LoraConfig,
    /// Time steps of `F_MS` folded into one token.
    pub token_chunk: usize,
    pub positional: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            ff_hidden: 256,
            frozen: true,
            lora_targets: vec![LoraTarget::Query, LoraTarget::Value],
            lora: LoraConfig::default(),
            token_chunk: 8,
            positional: true,
        }
    }
}

/// Pre-norm transformer with a final layer norm.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub layers: Vec<TransformerLayer>,
    pub ln_f: LayerNorm,
    prefix: alloc::string::String,
}

impl Backbone {
    pub fn new(prefix: &str, cfg: BackboneConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut layer =
                TransformerLayer::new(&format!("{prefix}.layer{i}"), cfg.d_model, cfg.heads, cfg.ff_hidden, true)?;
            if cfg.lora_targets.contains(&LoraTarget::Key) {
                bail!(Config, "LoRA on key projections is not supported; use query/value");
            }
            if cfg.lora_targets.contains(&LoraTarget::Query) {
                let q = &layer.attn.q;
                layer.attn.q_lora = Some(LoraAdapter::new(q.prefix.clone(), q.d_in, q.d_out, &cfg.lora)?);
            }
            if cfg.lora_targets.contains(&LoraTarget::Value) {
                let v = &layer.attn.v;
                layer.attn.v_lora = Some(LoraAdapter::new(v.prefix.clone(), v.d_in, v.d_out, &cfg.lora)?);
            }
            layers.push(layer);
        }
        Ok(Backbone { ln_f: LayerNorm::new(format!("{prefix}.ln_f"), cfg.d_model), layers, cfg, prefix: prefix.into() })
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.layers.iter().flat_map(|l| [&l.attn.q_lora, &l.attn.v_lora]).flatten()
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        for l in &self.layers {
            l.init(params, rng);
        }
        self.ln_f.init(params);
    }

    /// Freezes every base weight (everything but the adapters) when configured.
    pub fn apply_freeze(&self, params: &mut ParamSet) {
        if !self.cfg.frozen {
            return;
        }
        params.freeze_prefix(&format!("{}.", self.prefix));
        for a in self.adapters() {
            params.unfreeze_prefix(&a.a_name());
            params.unfreeze_prefix(&a.b_name());
        }
    }

    /// `[N_tok × d] → [N_tok × d]`, full (non-causal) attention.
    pub fn forward(&self, s: &mut Session, tokens: Var) -> Result<Var> {
        let shape = s.value(tokens).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.d_model {
            bail!(Dimension, "backbone expects [N × {}] tokens, got {:?}", self.cfg.d_model, shape);
        }
        let mut x = tokens;
        if self.cfg.positional {
            let pos: Vec<usize> = (0..shape[0]).collect();
            let pe = s.constant(sinusoidal_positions(&pos, self.cfg.d_model));
            x = s.tape.add(x, pe)?;
        }
        for l in &self.layers {
            x = l.forward(s, x)?;
        }
        self.ln_f.forward(s, x)
    }
}

/// Folds a `[C × L]` feature map into `L / chunk` tokens of width `d`.
#[derive(Clone, Debug)]
pub struct FeatureProjection {
    pub channels: usize,
    pub chunk: usize,
    pub linear: Linear,
}

impl FeatureProjection {
    pub fn new(prefix: &str, channels: usize, chunk: usize, d_model: usize) -> Result<Self> {
        if chunk == 0 {
            bail!(Config, "token chunk must be positive");
        }
        Ok(FeatureProjection { channels, chunk, linear: Linear::new(prefix, channels * chunk, d_model) })
    }

    pub fn tokens_for(&self, len: usize) -> Result<usize> {
        if !len.is_multiple_of(self.chunk) {
            bail!(Config, "feature length {len} is not a multiple of token chunk {}", self.chunk);
        }
        Ok(len / self.chunk)
    }

    /// Token `i` holds `F[c, i·chunk + j]` at position `c·chunk + j`.
    pub fn integrate(&self, s: &mut Session, f_ms: Var) -> Result<Var> {
        let shape = s.value(f_ms).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.channels {
            bail!(Config, "expected [{} × L] features, got {:?}", self.channels, shape);
        }
        let len = shape[1];
        let n_tok = self.tokens_for(len)?;
        let width = self.channels * self.chunk;
        let mut index = Vec::with_capacity(n_tok * width);
        for i in 0..n_tok {
            for c in 0..self.channels {
                for j in 0..self.chunk {
                    index.push(c * len + i * self.chunk + j);
                }
            }
        }
        let tokens = s.tape.gather(f_ms, index, vec![n_tok, width])?;
        self.linear.forward(s, tokens)
    }
}

/// Flattens the hidden tokens of one variable and maps them to `T` values.
#[derive(Clone, Debug)]
pub struct ForecastHead {
    pub horizon: usize,
    pub linear: Linear,
}

impl ForecastHead {
    pub fn new(prefix: &str, n_tokens: usize, d_model: usize, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            bail!(Config, "forecast horizon must be at least 1");
        }
        Ok(ForecastHead { horizon, linear: Linear::new(prefix, n_tokens * d_model, horizon) })
    }

    /// `[N_tok × d] → [1 × T]`
    pub fn forward(&self, s: &mut Session, hidden: Var) -> Result<Var> {
        let n = s.value(hidden).len();
        let flat = s.tape.reshape(hidden, vec![1, n])?;
        self.linear.forward(s, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: BackboneConfig) -> (Backbone, ParamSet) {
        let b = Backbone::new("bb", cfg).unwrap();
        let mut p = ParamSet::new();
        b.init(&mut p, &mut ChaCha8Rng::seed_from_u64(7));
        b.apply_freeze(&mut p);
        (b, p)
    }

    #[test]
    fn only_adapters_train() {
        let (b, p) = build(BackboneConfig::default());
        let expected: usize = b.adapters().map(LoraAdapter::param_count).sum();
        assert_eq!(expected, 2 * 2 * 8 * (64 + 64));
        assert_eq!(p.trainable_count(), expected);
        assert!(p.trainable_names().all(|n| n.contains(".lora_")));
    }

    #[test]
    fn zero_b_matches_adapter_free_backbone() {
        let (b, p) = build(BackboneConfig::default());
        // Same base weights; the plain backbone never reads the adapters.
        let plain = Backbone::new("bb", BackboneConfig { lora_targets: vec![], ..BackboneConfig::default() }).unwrap();
        let pp = p.clone();
        let x = Tensor::randn([6, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut s = Session::training(&p, 3);
        let xv = s.constant(x.clone());
        let y = b.forward(&mut s, xv).unwrap();
        let mut s2 = Session::eval(&pp);
        let xv2 = s2.constant(x);
        let y2 = plain.forward(&mut s2, xv2).unwrap();
        assert!(s.value(y).max_abs_diff(s2.value(y2)) < 1e-12);
    }

    #[test]
    fn single_token_and_determinism() {
        let (b, p) = build(BackboneConfig::default());
        let x = Tensor::randn([1, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let run = || {
            let mut s = Session::eval(&p);
            let xv = s.constant(x.clone());
            let y = b.forward(&mut s, xv).unwrap();
            s.value(y).clone()
        };
        assert_eq!(run(), run());
        assert!(run().all_finite());
    }

    #[test]
    fn integrate_shapes_and_bias() {
        let proj = FeatureProjection::new("proj", 16, 8, 64).unwrap();
        let mut p = ParamSet::new();
        proj.linear.init(&mut p, &mut ChaCha8Rng::seed_from_u64(5));
        p.get_mut("proj.bias").unwrap().data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = i as f64);
        let mut s = Session::eval(&p);
        let f = s.constant(Tensor::zeros([16, 96]));
        let t = proj.integrate(&mut s, f).unwrap();
        assert_eq!(s.value(t).shape(), [12, 64]);
        for r in 0..12 {
            assert!(s.value(t).row(r).iter().enumerate().all(|(i, &v)| v == i as f64));
        }
        let bad = s.constant(Tensor::zeros([8, 96]));
        assert!(proj.integrate(&mut s, bad).is_err());
    }

    #[test]
    fn head_shape_and_zero() {
        let head = ForecastHead::new("head", 12, 64, 96).unwrap();
        let mut p = ParamSet::new();
        head.linear.init(&mut p, &mut ChaCha8Rng::seed_from_u64(5));
        let mut s = Session::eval(&p);
        let h = s.constant(Tensor::zeros([12, 64]));
        let y = head.forward(&mut s, h).unwrap();
        assert_eq!(s.value(y).shape(), [1, 96]);
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }
}
