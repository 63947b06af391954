//! The complete forecaster: multi-scale extractor, token projection,
//! adapted backbone, forecast head, and the semantic extractor whose
//! features guide training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureProjection, ForecastHead};
use crate::error::{bail, Result};
use crate::mscnn::{MscnnConfig, MultiScaleExtractor};
use crate::substrate::{ParamSet, Session, Tensor, Var};
use crate::t2t::{EmbeddingTable, T2tConfig, T2tModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub mscnn: MscnnConfig,
    pub t2t: T2tConfig,
    pub backbone: BackboneConfig,
    pub vocab_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 96,
            horizon: 96,
            mscnn: MscnnConfig::default(),
            t2t: T2tConfig::default(),
            backbone: BackboneConfig::default(),
            vocab_seed: 7,
        }
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

impl ModelConfig {
    /// Same architecture resized for another input length and horizon:
    /// token chunk, patch count and wavelet depth shrink to fit.
    pub fn adapted(&self, input_len: usize, horizon: usize) -> ModelConfig {
        let mut c = self.clone();
        c.input_len = input_len;
        c.horizon = horizon;
        c.backbone.token_chunk = largest_divisor_at_most(input_len, self.backbone.token_chunk);
        if input_len != self.input_len {
            let ratio = self.t2t.mask_ratio;
            let masks_ok = |d: usize| {
                let m = crate::math::round(ratio * d as f64) as usize;
                m > 0 && m < d
            };
            let p = (1..=input_len)
                .filter(|&d| input_len.is_multiple_of(d) && masks_ok(d))
                .min_by_key(|&d| (d.abs_diff(self.t2t.patches), d))
                .unwrap_or(self.t2t.patches);
            c.t2t.patches = p;
            c.t2t.overlap = 0;
            c.t2t.patch_size = input_len / p;
            c.t2t.output = c.t2t.patch_size;
            let mut levels = self.mscnn.block.wavelet_levels;
            while levels > 1 && input_len < (1 << levels) {
                levels -= 1;
            }
            c.mscnn.block.wavelet_levels = levels;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.horizon == 0 {
            bail!(Config, "input length and horizon must be positive");
        }
        self.mscnn.block.validate()?;
        self.t2t.validate()?;
        let l_p = (self.input_len + self.t2t.overlap) / self.t2t.patches;
        if !(self.input_len + self.t2t.overlap).is_multiple_of(self.t2t.patches) || l_p != self.t2t.patch_size {
            bail!(
                Config,
                "input length {} with {} patches and overlap {} does not give patches of {}",
                self.input_len,
                self.t2t.patches,
                self.t2t.overlap,
                self.t2t.patch_size
            );
        }
        if self.t2t.hidden < self.mscnn.block.channels {
            bail!(Config, "semantic hidden width {} is narrower than {} feature channels", self.t2t.hidden, self.mscnn.block.channels);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Only the semantic extractor trains.
    Pretrain,
    /// Extractor, projection, adapters and head train; semantic branch and
    /// backbone base weights stay fixed.
    Main,
}

#[derive(Clone, Debug)]
pub struct Forecaster {
    pub cfg: ModelConfig,
    pub mscnn: MultiScaleExtractor,
    pub proj: FeatureProjection,
    pub backbone: Backbone,
    pub head: ForecastHead,
    pub t2t: T2tModel,
}

pub struct ForecastOutput {
    /// `[T × V]` normalized forecast.
    pub y_hat: Var,
    /// Per variable `[C × H]` multi-scale features.
    pub f_ms: Vec<Var>,
}

impl Forecaster {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut mscnn = MultiScaleExtractor::new("mscnn", cfg.mscnn.clone())?;
        mscnn.prepare(cfg.input_len)?;
        let c = cfg.mscnn.block.channels;
        let proj = FeatureProjection::new("proj", c, cfg.backbone.token_chunk, cfg.backbone.d_model)?;
        let n_tok = proj.tokens_for(cfg.input_len)?;
        Ok(Forecaster {
            mscnn,
            proj,
            backbone: Backbone::new("backbone", cfg.backbone.clone())?,
            head: ForecastHead::new("head", n_tok, cfg.backbone.d_model, cfg.horizon)?,
            t2t: T2tModel::new("t2t", cfg.t2t.clone())?,
            cfg,
        })
    }

    /// Fresh parameters for every component, staged for pretraining.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.init_with_vocab(seed, &self.t2t.build_vocabulary(self.cfg.vocab_seed)?)
    }

    /// Like [`Forecaster::init`] with an already filtered vocabulary.
    pub fn init_with_vocab(&self, seed: u64, vocab: &EmbeddingTable) -> Result<ParamSet> {
        if vocab.rows() != self.cfg.t2t.top_k {
            bail!(Config, "vocabulary has {} rows, expected top_k = {}", vocab.rows(), self.cfg.t2t.top_k);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        self.mscnn.init(&mut p, &mut rng);
        self.proj.linear.init(&mut p, &mut rng);
        self.backbone.init(&mut p, &mut rng);
        self.head.linear.init(&mut p, &mut rng);
        self.t2t.init(&mut p, &mut rng, vocab)?;
        self.set_stage(&mut p, Stage::Pretrain)?;
        Ok(p)
    }

    pub fn set_stage(&self, p: &mut ParamSet, stage: Stage) -> Result<()> {
        p.freeze_all();
        match stage {
            Stage::Pretrain => {
                p.unfreeze_prefix("t2t.");
                self.t2t.apply_freeze(p)?;
            }
            Stage::Main => {
                for prefix in ["mscnn.", "proj.", "head.", "backbone."] {
                    p.unfreeze_prefix(prefix);
                }
                self.backbone.apply_freeze(p);
            }
        }
        Ok(())
    }

    pub fn check_window(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[0] != self.cfg.input_len {
            bail!(Config, "model expects [{} × V] inputs, got {:?}", self.cfg.input_len, x.shape());
        }
        Ok(())
    }

    /// Normalized `[H × V]` window to a `[T × V]` forecast.
    pub fn forward(&self, s: &mut Session, x: &Tensor) -> Result<ForecastOutput> {
        self.check_window(x)?;
        let v = x.shape()[1];
        let f_ms = self.mscnn.extract(s, x)?;
        let mut rows = Vec::with_capacity(v);
        for &f in &f_ms {
            let tokens = self.proj.integrate(s, f)?;
            let hidden = self.backbone.forward(s, tokens)?;
            rows.push(self.head.forward(s, hidden)?);
        }
        let stacked = s.tape.concat(&rows, 0)?;
        let t = self.cfg.horizon;
        let index = (0..t).flat_map(|i| (0..v).map(move |j| j * t + i)).collect();
        let y_hat = s.tape.gather(stacked, index, vec![t, v])?;
        Ok(ForecastOutput { y_hat, f_ms })
    }

    pub fn predict(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::eval(params);
        let out = self.forward(&mut s, x)?;
        Ok(s.value(out.y_hat).clone())
    }

    /// Pooled semantic features matched to the extractor's channel count.
    pub fn semantic_features(&self, params: &ParamSet, x: &Tensor) -> Result<Vec<Tensor>> {
        self.t2t.features(params, x, self.cfg.mscnn.block.channels)
    }

    pub fn describe(&self) -> alloc::string::String {
        format!(
            "H={} T={} C={} B={} depth={} d={} layers={}",
            self.cfg.input_len,
            self.cfg.horizon,
            self.cfg.mscnn.block.channels,
            self.cfg.mscnn.block.branches,
            self.cfg.mscnn.depth,
            self.cfg.backbone.d_model,
            self.cfg.backbone.layers
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.horizon = 24;
        c
    }

    #[test]
    fn forecast_shape_and_stage_partition() {
        let m = Forecaster::new(small()).unwrap();
        let mut p = m.init(1).unwrap();
        assert!(p.trainable_names().all(|n| n.starts_with("t2t.")));
        assert!(p.is_frozen("t2t.vocab") && p.is_frozen("t2t.label_proj.weight"));
        m.set_stage(&mut p, Stage::Main).unwrap();
        assert!(p.trainable_names().all(|n| !n.starts_with("t2t.")));
        assert!(p.is_frozen("backbone.layer0.attn.q.weight"));
        assert!(!p.is_frozen("backbone.layer0.attn.q.lora_a"));
        let x = Tensor::full([96, 3], 0.5);
        let y = m.predict(&p, &x).unwrap();
        assert_eq!(y.shape(), [24, 3]);
        assert!(y.all_finite());
        assert!(m.predict(&p, &Tensor::zeros([95, 1])).is_err());
    }

    #[test]
    fn variables_are_forecast_independently() {
        let m = Forecaster::new(small()).unwrap();
        let p = m.init(2).unwrap();
        let a: Vec<f64> = (0..96).map(|t| (t as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..96).map(|t| (t as f64 * 0.1).cos()).collect();
        let both = Tensor::new([96, 2], a.iter().zip(&b).flat_map(|(x, y)| [*x, *y]).collect()).unwrap();
        let ya = m.predict(&p, &Tensor::new([96, 1], a).unwrap()).unwrap();
        let yab = m.predict(&p, &both).unwrap();
        for t in 0..24 {
            assert_eq!(yab.data()[t * 2], ya.data()[t]);
        }
    }

    #[test]
    fn adapted_configs_validate() {
        let base = ModelConfig::default();
        for h in [6, 8, 13, 14, 18, 48] {
            let c = base.adapted(2 * h, h);
            c.validate().unwrap();
            Forecaster::new(c).unwrap();
        }
    }
}
