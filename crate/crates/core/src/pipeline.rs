//! Staged training, evaluation and experiment reports.
//!
//! Stage one pretrains the semantic extractor on masked-patch
//! reconstruction. Stage two freezes it and fits the forecaster on
//! `L_TIME + λ·L_FEAT`, stopping early on validation `L_TIME`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{add_noise_with, normalize, NormStats, WindowedSample};
use crate::error::{bail, Error, Result};
use crate::metrics::{self, MetricReport};
use crate::model::{Forecaster, Stage};
use crate::substrate::{Adam, ParamSet, Session, Tensor, Var};
use crate::t2t::{mask_patches, masked_mse, patchify};

pub const LONG_HORIZONS: [usize; 4] = [96, 192, 336, 720];
pub const SHORT_HORIZONS: [usize; 6] = [6, 8, 13, 14, 18, 48];
pub const NOISE_FACTORS: [f64; 4] = [0.0, 0.1, 0.3, 0.5];
pub const FEW_SHOT_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub lr_t2t: f64,
    pub t2t_steps: usize,
    pub t2t_batch: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_steps: Option<usize>,
    /// Validation windows used per epoch, evenly spaced; `None` keeps all.
    pub max_val_windows: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            lr: 0.0005,
            lr_t2t: 0.001,
            t2t_steps: 500,
            t2t_batch: 16,
            patience: 5,
            batch_size: 32,
            max_epochs: 50,
            max_steps: None,
            max_val_windows: Some(256),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            bail!(Config, "lambda must be a finite non-negative number, got {}", self.lambda);
        }
        if self.patience == 0 {
            bail!(Config, "patience must be at least 1");
        }
        if self.batch_size == 0 || self.t2t_batch == 0 {
            bail!(Config, "batch sizes must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_t2t > 0.0) {
            bail!(Config, "learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    PretrainStep { step: usize, loss: f64 },
    Step { step: usize, loss: f64 },
    Epoch { epoch: usize, train_loss: f64, val_time: f64, improved: bool },
    EarlyStop { epoch: usize, best_epoch: usize },
}

/// Scalar parts of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub time: Var,
    pub feat: Var,
}

/// `L_TIME = (1/T)·Σ_t ‖Y_t − Ŷ_t‖₂` over the rows of `[T × V]`.
pub fn time_loss(s: &mut Session, y: &Tensor, y_hat: Var) -> Result<Var> {
    if s.value(y_hat).shape() != y.shape() {
        bail!(Dimension, "forecast {:?} and target {:?} differ", s.value(y_hat).shape(), y.shape());
    }
    let t = y.rows();
    let target = s.constant(y.clone());
    let diff = s.tape.sub(y_hat, target)?;
    let norms = s.tape.row_norms(diff);
    let sum = s.tape.sum(norms);
    Ok(s.tape.scale(sum, 1.0 / t as f64))
}

/// `L_FEAT = (1/C)·Σ_j ‖F_MS^j − F_T2T^j‖₂`, averaged over variables. The
/// semantic features enter as constants.
pub fn feature_loss(s: &mut Session, f_ms: &[Var], f_t2t: &[Tensor]) -> Result<Var> {
    if f_ms.len() != f_t2t.len() || f_ms.is_empty() {
        bail!(Config, "{} multi-scale maps against {} semantic maps", f_ms.len(), f_t2t.len());
    }
    let mut parts = Vec::with_capacity(f_ms.len());
    for (&f, g) in f_ms.iter().zip(f_t2t) {
        if s.value(f).shape() != g.shape() {
            bail!(Config, "feature maps {:?} and {:?} do not align", s.value(f).shape(), g.shape());
        }
        let c = g.rows();
        let target = s.constant(g.clone());
        let diff = s.tape.sub(f, target)?;
        let norms = s.tape.row_norms(diff);
        let sum = s.tape.sum(norms);
        let per = s.tape.scale(sum, 1.0 / c as f64);
        parts.push(s.tape.reshape(per, vec![1, 1])?);
    }
    let stacked = s.tape.concat(&parts, 0)?;
    Ok(s.tape.mean(stacked))
}

/// `L_OBJ = L_TIME + λ·L_FEAT`
pub fn objective(
    s: &mut Session,
    y: &Tensor,
    y_hat: Var,
    f_ms: &[Var],
    f_t2t: &[Tensor],
    lambda: f64,
) -> Result<ObjectiveTerms> {
    let time = time_loss(s, y, y_hat)?;
    let feat = feature_loss(s, f_ms, f_t2t)?;
    let weighted = s.tape.scale(feat, lambda);
    let total = s.tape.add(time, weighted)?;
    Ok(ObjectiveTerms { total, time, feat })
}

/// The objective on plain tensors.
pub fn objective_value(y: &Tensor, y_hat: &Tensor, f_ms: &[Tensor], f_t2t: &[Tensor], lambda: f64) -> Result<f64> {
    let empty = ParamSet::new();
    let mut s = Session::eval(&empty);
    let yh = s.constant(y_hat.clone());
    let fm: Vec<Var> = f_ms.iter().map(|f| s.constant(f.clone())).collect();
    let terms = objective(&mut s, y, yh, &fm, f_t2t, lambda)?;
    Ok(s.value(terms.total).data()[0])
}

/// A normalized window with its cached semantic features.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub x: Tensor,
    pub y: Tensor,
    pub f_t2t: Vec<Tensor>,
}

pub fn prepare(model: &Forecaster, params: &ParamSet, windows: &[WindowedSample]) -> Result<Vec<Prepared>> {
    windows
        .iter()
        .map(|w| {
            let n = normalize(w);
            let f_t2t = model.semantic_features(params, &n.x)?;
            Ok(Prepared { x: n.x, y: n.y, f_t2t })
        })
        .collect()
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, scale: f64) {
    for (name, g) in grads {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            None => {
                let data = g.data().iter().map(|v| v * scale).collect();
                into.insert(name, Tensor::new(g.shape().to_vec(), data).expect("grad shape"));
            }
        }
    }
}

fn check_finite(loss: f64, what: &str, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("{what} diverged at step {step}: loss = {loss}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub losses: Vec<f64>,
    pub initial_masked_mse: f64,
    pub final_masked_mse: f64,
}

/// Masked-patch reconstruction MSE on fixed masks, eval mode.
pub fn validation_masked_mse(model: &Forecaster, params: &ParamSet, windows: &[Tensor], seed: u64) -> Result<f64> {
    if windows.is_empty() {
        return Ok(0.0);
    }
    let cfg = &model.t2t.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let mut total = 0.0;
    for x in windows {
        let ps = mask_patches(&patchify(x, cfg.patches, cfg.overlap)?, cfg.mask_ratio, &mut rng)?;
        let mut s = Session::eval(params);
        let fwd = model.t2t.forward(&mut s, &ps)?;
        total += masked_mse(&ps, &model.t2t.recon_patches(&s, &fwd));
    }
    Ok(total / windows.len() as f64)
}

/// Stage one: trains only the semantic extractor.
pub fn pretrain_t2t(
    model: &Forecaster,
    mut params: ParamSet,
    windows: &[Tensor],
    val: &[Tensor],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if windows.is_empty() {
        bail!(Config, "semantic pretraining needs at least one window");
    }
    model.set_stage(&mut params, Stage::Pretrain)?;
    let initial = validation_masked_mse(model, &params, val, cfg.seed)?;
    let t2t = &model.t2t;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7432_7470);
    let mut adam = Adam::new(cfg.lr_t2t);
    let mut losses = Vec::with_capacity(cfg.t2t_steps);
    for step in 0..cfg.t2t_steps {
        let mut grads = BTreeMap::new();
        let mut loss = 0.0;
        for b in 0..cfg.t2t_batch {
            let x = &windows[rng.random_range(0..windows.len())];
            let ps = mask_patches(&patchify(x, t2t.cfg.patches, t2t.cfg.overlap)?, t2t.cfg.mask_ratio, &mut rng)?;
            let mut s = Session::training(&params, cfg.seed.wrapping_add((step * cfg.t2t_batch + b) as u64));
            let fwd = t2t.forward(&mut s, &ps)?;
            let l = t2t.loss(&mut s, &ps, &fwd)?;
            loss += s.value(l).data()[0];
            accumulate(&mut grads, s.backward(l)?, 1.0 / cfg.t2t_batch as f64);
        }
        loss /= cfg.t2t_batch as f64;
        check_finite(loss, "semantic pretraining", step)?;
        adam.step(&mut params, &grads)?;
        losses.push(loss);
        observer(&TrainEvent::PretrainStep { step, loss });
    }
    let final_masked_mse = validation_masked_mse(model, &params, val, cfg.seed)?;
    Ok(PretrainOutcome { params, losses, initial_masked_mse: initial, final_masked_mse })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
    pub train_windows: usize,
}

/// Mean `L_TIME` over prepared windows, eval mode.
pub fn mean_time_loss(model: &Forecaster, params: &ParamSet, windows: &[Prepared]) -> Result<f64> {
    if windows.is_empty() {
        bail!(Config, "no windows to score");
    }
    let mut total = 0.0;
    for w in windows {
        let mut s = Session::eval(params);
        let out = model.forward(&mut s, &w.x)?;
        let l = time_loss(&mut s, &w.y, out.y_hat)?;
        total += s.value(l).data()[0];
    }
    Ok(total / windows.len() as f64)
}

fn evenly_spaced<T: Clone>(items: &[T], limit: Option<usize>) -> Vec<T> {
    match limit {
        Some(k) if k > 0 && items.len() > k => (0..k).map(|i| items[i * items.len() / k].clone()).collect(),
        _ => items.to_vec(),
    }
}

/// Stage two. The semantic branch and backbone base weights are frozen;
/// validation falls back to the training windows when `val` is empty.
pub fn train(
    model: &Forecaster,
    mut params: ParamSet,
    train: &[Prepared],
    val: &[Prepared],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Config, "training split produced no windows");
    }
    model.set_stage(&mut params, Stage::Main)?;
    let val = evenly_spaced(if val.is_empty() { train } else { val }, cfg.max_val_windows);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_696e);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut history = Vec::new();
    let mut step = 0usize;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if step >= budget {
                break;
            }
            let mut grads = BTreeMap::new();
            let mut loss = 0.0;
            for (k, &i) in batch.iter().enumerate() {
                let w = &train[i];
                let mut s = Session::training(&params, cfg.seed.wrapping_add((step * cfg.batch_size + k) as u64));
                let out = model.forward(&mut s, &w.x)?;
                let terms = objective(&mut s, &w.y, out.y_hat, &out.f_ms, &w.f_t2t, cfg.lambda)?;
                loss += s.value(terms.total).data()[0];
                accumulate(&mut grads, s.backward(terms.total)?, 1.0 / batch.len() as f64);
            }
            loss /= batch.len() as f64;
            check_finite(loss, "training", step)?;
            adam.step(&mut params, &grads)?;
            observer(&TrainEvent::Step { step, loss });
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        if batches == 0 {
            break;
        }
        let val_time = mean_time_loss(model, &params, &val)?;
        let improved = val_time < best.0;
        let rec = EpochRecord { epoch, train_loss: epoch_loss / batches as f64, val_time };
        observer(&TrainEvent::Epoch { epoch, train_loss: rec.train_loss, val_time, improved });
        history.push(rec);
        if improved {
            best = (val_time, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            observer(&TrainEvent::EarlyStop { epoch, best_epoch: best.1 });
            break 'epochs;
        }
        if step >= budget {
            break;
        }
    }
    Ok(TrainOutcome { params: best.2, history, best_epoch: best.1, steps: step, train_windows: train.len() })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub noise_factor: f64,
    pub noise_seed: u64,
    /// Channel deviations that scale the input noise.
    pub noise_sigma: Vec<f64>,
    /// Adds seasonal-naive MASE and OWA.
    pub season: Option<usize>,
    pub smape_percent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub normalized: MetricReport,
    pub raw: MetricReport,
    pub windows: usize,
}

struct Scored {
    y: Tensor,
    y_hat: Tensor,
    history: Tensor,
}

fn report_from(scored: &[Scored], horizon: usize, opts: &EvalOptions) -> Result<MetricReport> {
    let mut acc = metrics::MetricAccumulator::default();
    for s in scored {
        acc.add(&s.y, &s.y_hat)?;
    }
    let mut r = acc.report(horizon)?;
    if opts.smape_percent {
        r.smape *= 100.0;
    }
    if let Some(m) = opts.season {
        let mut mase = (0.0, 0.0, 0usize);
        let mut naive_smape = 0.0;
        for s in scored {
            let naive = metrics::seasonal_naive(&s.history, m, horizon)?;
            naive_smape += metrics::smape(&s.y, &naive)?;
            if let (Ok(a), Ok(b)) =
                (metrics::mase(&s.y, &s.y_hat, &s.history, m), metrics::mase(&s.y, &naive, &s.history, m))
            {
                mase.0 += a;
                mase.1 += b;
                mase.2 += 1;
            }
        }
        naive_smape /= scored.len() as f64;
        if opts.smape_percent {
            naive_smape *= 100.0;
        }
        if mase.2 > 0 {
            let (m_model, m_naive) = (mase.0 / mase.2 as f64, mase.1 / mase.2 as f64);
            r.mase = Some(m_model);
            r.owa = metrics::owa_relative(r.smape, m_model, naive_smape, m_naive).ok();
        }
    }
    Ok(r)
}

/// Scores a predictor over raw windows. The predictor sees the normalized
/// (and possibly noised) input of window `i`; normalized metrics use the
/// statistics of the clean input so every noise level shares one scale.
pub fn evaluate<F>(windows: &[WindowedSample], horizon: usize, opts: &EvalOptions, predict: F) -> Result<EvalResult>
where
    F: Fn(usize, &Tensor) -> Result<Tensor>,
{
    if windows.is_empty() {
        return Err(Error::UndefinedMetric("evaluation split produced no windows".into()));
    }
    let mut norm = Vec::with_capacity(windows.len());
    let mut raw = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        if w.y.rows() != horizon {
            bail!(Config, "window horizon {} differs from requested {horizon}", w.y.rows());
        }
        let x_in = if opts.noise_factor > 0.0 {
            add_noise_with(&w.x, &opts.noise_sigma, opts.noise_factor, opts.noise_seed.wrapping_add(w.origin as u64))?
        } else {
            w.x.clone()
        };
        let stats_in = NormStats::of(&x_in);
        let y_hat_n = predict(i, &stats_in.apply(&x_in))?;
        if y_hat_n.shape() != w.y.shape() {
            bail!(Config, "forecast shape {:?} does not match target {:?}", y_hat_n.shape(), w.y.shape());
        }
        if !y_hat_n.all_finite() {
            return Err(Error::Numeric(format!("non-finite forecast for window at row {}", w.origin)));
        }
        let y_hat_raw = stats_in.invert(&y_hat_n);
        norm.push(Scored { y: w.stats.apply(&w.y), y_hat: w.stats.apply(&y_hat_raw), history: w.stats.apply(&w.x) });
        raw.push(Scored { y: w.y.clone(), y_hat: y_hat_raw, history: w.x.clone() });
    }
    Ok(EvalResult {
        normalized: report_from(&norm, horizon, opts)?,
        raw: report_from(&raw, horizon, opts)?,
        windows: windows.len(),
    })
}

/// Forecasts with a trained model.
pub fn model_predictor<'a>(model: &'a Forecaster, params: &'a ParamSet) -> impl Fn(usize, &Tensor) -> Result<Tensor> + 'a {
    move |_, x| model.predict(params, x)
}

/// Predicts the input mean (zero in normalized units).
pub fn mean_predictor(horizon: usize) -> impl Fn(usize, &Tensor) -> Result<Tensor> {
    move |_, x| Ok(Tensor::zeros([horizon, x.cols()]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Long,
    Short,
    Few,
    Zero,
    Noise,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Long => "long",
            Protocol::Short => "short",
            Protocol::Few => "few",
            Protocol::Zero => "zero",
            Protocol::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Result<Protocol> {
        Ok(match s {
            "long" => Protocol::Long,
            "short" => Protocol::Short,
            "few" => Protocol::Few,
            "zero" => Protocol::Zero,
            "noise" => Protocol::Noise,
            other => bail!(Config, "unknown protocol {other:?}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseResult {
    pub factor: f64,
    pub horizons: BTreeMap<String, MetricReport>,
}

/// Machine-readable result of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: String,
    pub dataset: String,
    /// Normalized-scale metrics per horizon.
    pub horizons: BTreeMap<String, MetricReport>,
    /// The same forecasts scored in original units.
    pub raw_horizons: BTreeMap<String, MetricReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub noise: Vec<NoiseResult>,
    pub seed: u64,
    pub config_hash: String,
    pub runtime_s: f64,
}

impl ExperimentReport {
    pub fn new(protocol: Protocol, dataset: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        ExperimentReport {
            protocol: protocol.name().into(),
            dataset: dataset.into(),
            horizons: BTreeMap::new(),
            raw_horizons: BTreeMap::new(),
            noise: Vec::new(),
            seed,
            config_hash: config_hash.into(),
            runtime_s: 0.0,
        }
    }

    pub fn insert(&mut self, horizon: usize, result: &EvalResult) {
        self.horizons.insert(format!("{horizon}"), result.normalized.clone());
        self.raw_horizons.insert(format!("{horizon}"), result.raw.clone());
    }

    /// Copy with the wall-clock field cleared, for reproducibility checks.
    pub fn without_runtime(&self) -> ExperimentReport {
        ExperimentReport { runtime_s: 0.0, ..self.clone() }
    }
}
