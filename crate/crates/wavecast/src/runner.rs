//! Experiment orchestration on top of the core pipeline: dataset loading,
//! both training stages, protocol evaluation and forecasting.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use wavecast_core::data::{
    few_shot_prefix, normalize, split_bounds, synth_generate, window, window_train, NormStats, TimeSeries,
};
use wavecast_core::model::{Forecaster, ModelConfig, Stage};
use wavecast_core::pipeline::{
    self, evaluate as score, model_predictor, prepare, EvalOptions, ExperimentReport, NoiseResult, Protocol,
    TrainEvent, FEW_SHOT_FRACTION, NOISE_FACTORS,
};
use wavecast_core::substrate::{ParamSet, Tensor};
use wavecast_core::t2t::filter_vocabulary;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::embedding::read_table;
use crate::error::{AppError, AppResult};
use crate::io::load_csv;

/// Progress lines on stderr unless quiet.
#[derive(Clone, Copy, Debug, Default)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    pub fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn warn(&self, msg: impl AsRef<str>) {
        eprintln!("warning: {}", msg.as_ref());
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub series: TimeSeries,
}

/// `synthetic`, `synthetic:SEED`, or a CSV path.
pub fn load_dataset(cfg: &RunConfig, source: Option<&str>) -> AppResult<Dataset> {
    let src = source.unwrap_or(&cfg.data.source);
    let (name, series) = if let Some(rest) = src.strip_prefix("synthetic") {
        let seed = match rest.strip_prefix(':') {
            Some(s) => s.parse().map_err(|_| AppError::Usage(format!("bad synthetic seed in {src:?}")))?,
            None if rest.is_empty() => cfg.synthetic.seed,
            None => return Err(AppError::Usage(format!("unknown dataset {src:?}"))),
        };
        let s = &cfg.synthetic;
        let name = if rest.is_empty() { "synthetic".to_string() } else { src.to_string() };
        (name, synth_generate(&s.spec(), s.length, s.variables, seed)?)
    } else {
        let path = Path::new(src);
        let stem = path.file_stem().map_or_else(|| src.to_string(), |s| s.to_string_lossy().into_owned());
        let name = if source.is_none() { cfg.data.name.clone().unwrap_or(stem) } else { stem };
        (name, load_csv(path, cfg.data.nan_policy)?)
    };
    let series = if cfg.data.columns.is_empty() {
        series
    } else {
        let idx = cfg
            .data
            .columns
            .iter()
            .map(|c| {
                series
                    .channel_names
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| AppError::Data(format!("column {c:?} not found in {name}")))
            })
            .collect::<AppResult<Vec<_>>>()?;
        series.select(&idx)?
    };
    Ok(Dataset { name, series })
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub bounds: [usize; 4],
    pub train: TimeSeries,
    pub val: TimeSeries,
    pub test: TimeSeries,
}

pub fn split_dataset(cfg: &RunConfig, ds: &Dataset) -> AppResult<Splits> {
    let b = split_bounds(&ds.series, &cfg.data.split)?;
    Ok(Splits {
        bounds: b,
        train: ds.series.slice(b[0], b[1])?,
        val: ds.series.slice(b[1], b[2])?,
        test: ds.series.slice(b[2], b[3])?,
    })
}

/// Input length and horizons a protocol trains and evaluates.
pub fn protocol_shapes(cfg: &RunConfig, protocol: Protocol) -> Vec<(usize, usize)> {
    match protocol {
        Protocol::Short => cfg.eval.short_horizons.iter().map(|&h| (2 * h, h)).collect(),
        _ => cfg.data.horizons.iter().map(|&h| (cfg.data.input_len, h)).collect(),
    }
}

/// Checkpoints of the long, noise and zero-shot protocols are shared.
pub fn checkpoint_tag(protocol: Protocol) -> &'static str {
    match protocol {
        Protocol::Short => "short",
        Protocol::Few => "few",
        _ => "long",
    }
}

pub fn checkpoint_path(dir: &Path, protocol: Protocol, horizon: usize) -> PathBuf {
    dir.join(format!("model_{}_h{horizon}.ckpt", checkpoint_tag(protocol)))
}

pub fn t2t_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("t2t.ckpt")
}

fn init_params(cfg: &RunConfig, model: &Forecaster) -> AppResult<ParamSet> {
    let mut params = fresh_params(cfg, model)?;
    if let Some(path) = &cfg.backbone_weights {
        load_backbone(&mut params, path)?;
    }
    Ok(params)
}

/// Copies base (non-adapter) backbone weights; shapes must match.
fn load_backbone(params: &mut ParamSet, path: &Path) -> AppResult<()> {
    let src = Checkpoint::load(path)?;
    let mut copied = 0;
    for (name, value) in src.params.iter() {
        if !name.starts_with("backbone.") || name.contains(".lora_") {
            continue;
        }
        match params.get(name) {
            Some(t) if t.shape() == value.shape() => {
                params.insert(name.clone(), value.clone());
                copied += 1;
            }
            Some(t) => {
                return Err(AppError::Config(format!(
                    "backbone_weights: {name} is {:?} in {}, the model needs {:?}",
                    value.shape(),
                    path.display(),
                    t.shape()
                )))
            }
            None => return Err(AppError::Config(format!("backbone_weights: model has no {name}"))),
        }
    }
    if copied == 0 {
        return Err(AppError::Config(format!("backbone_weights: {} holds no backbone weights", path.display())));
    }
    Ok(())
}

fn fresh_params(cfg: &RunConfig, model: &Forecaster) -> AppResult<ParamSet> {
    let Some(path) = &cfg.vocab.table else {
        return Ok(model.init(cfg.train.seed)?);
    };
    let table = read_table(path)?;
    let seeds: Vec<usize> =
        cfg.vocab.seed_words.iter().filter_map(|w| table.words.iter().position(|t| t == w)).collect();
    if seeds.is_empty() {
        return Err(AppError::Config(format!("vocab.seed_words: none found in {}", path.display())));
    }
    let filtered = filter_vocabulary(&table, &seeds, model.cfg.t2t.top_k)?;
    Ok(model.init_with_vocab(cfg.train.seed, &filtered)?)
}

fn inputs_only(seg: &TimeSeries, h: usize, stride: usize) -> AppResult<Vec<Tensor>> {
    Ok(window(seg, h, 1, stride)?.iter().map(|w| normalize(w).x).collect())
}

fn evenly(mut v: Vec<Tensor>, k: usize) -> Vec<Tensor> {
    if v.len() > k {
        let n = v.len();
        v = (0..k).map(|i| v[i * n / k].clone()).collect();
    }
    v
}

pub struct PretrainSummary {
    pub checkpoint: Checkpoint,
    pub initial_masked_mse: f64,
    pub final_masked_mse: f64,
    pub windows: usize,
}

/// Stage one for a given input length; the result holds only `t2t.*`.
pub fn pretrain(cfg: &RunConfig, ds: &Dataset, input_len: usize, log: Log) -> AppResult<PretrainSummary> {
    let sp = split_dataset(cfg, ds)?;
    let mcfg = cfg.model(input_len, cfg.data.horizons[0]);
    let model = Forecaster::new(mcfg.clone())?;
    let params = init_params(cfg, &model)?;
    let train = inputs_only(&sp.train, input_len, cfg.data.train_stride)?;
    if train.is_empty() {
        return Err(AppError::Data(format!("training split of {} rows is shorter than H = {input_len}", sp.train.len())));
    }
    let val = evenly(inputs_only(&sp.val, input_len, cfg.data.eval_stride)?, 64);
    log.info(format!("pretraining semantic encoder on {} windows, {} steps", train.len(), cfg.train.t2t_steps));
    let out = pipeline::pretrain_t2t(&model, params, &train, &val, &cfg.train, &mut |e| {
        if let TrainEvent::PretrainStep { step, loss } = e {
            if step % 50 == 0 {
                log.info(format!("  t2t step {step:>5}  loss {loss:.5}"));
            }
        }
    })?;
    log.info(format!("  masked MSE {:.5} -> {:.5}", out.initial_masked_mse, out.final_masked_mse));
    let meta = CheckpointMeta {
        stage: "t2t".into(),
        protocol: "pretrain".into(),
        dataset: ds.name.clone(),
        config_hash: cfg.fingerprint(),
        seed: cfg.train.seed,
        train_windows: train.len(),
        steps: cfg.train.t2t_steps,
        model: mcfg,
    };
    Ok(PretrainSummary {
        checkpoint: Checkpoint { meta, params: out.params.subset("t2t.") },
        initial_masked_mse: out.initial_masked_mse,
        final_masked_mse: out.final_masked_mse,
        windows: train.len(),
    })
}

fn t2t_compatible(ckpt: &Checkpoint, model: &ModelConfig) -> bool {
    ckpt.meta.model.input_len == model.input_len && ckpt.meta.model.t2t == model.t2t
}

pub struct TrainedHorizon {
    pub horizon: usize,
    pub path: PathBuf,
    pub checkpoint: Checkpoint,
    pub best_val_time: f64,
}

/// Stage two for every horizon of the protocol. Semantic parameters come
/// from `t2t` when it matches the input length, otherwise stage one runs
/// first.
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    protocol: Protocol,
    t2t: Option<&Checkpoint>,
    log: Log,
) -> AppResult<Vec<TrainedHorizon>> {
    if matches!(protocol, Protocol::Zero | Protocol::Noise) {
        return Err(AppError::Usage(format!("protocol {} evaluates long-term checkpoints; train with long", protocol.name())));
    }
    let sp = split_dataset(cfg, ds)?;
    let mut out = Vec::new();
    let mut cached: Option<Checkpoint> = t2t.cloned();
    for (h, t) in protocol_shapes(cfg, protocol) {
        let mcfg = cfg.model(h, t);
        let model = Forecaster::new(mcfg.clone())?;
        let mut params = init_params(cfg, &model)?;
        let semantic = match cached.as_ref().filter(|c| t2t_compatible(c, &mcfg)) {
            Some(c) => c.clone(),
            None => {
                let c = pretrain(cfg, ds, h, log)?.checkpoint;
                cached = Some(c.clone());
                c
            }
        };
        for (name, value) in semantic.params.iter() {
            params.insert(name.clone(), value.clone());
        }
        model.set_stage(&mut params, Stage::Main)?;
        let all = window_train(&sp.train, h, t, cfg.data.train_stride)?;
        let train_w = if protocol == Protocol::Few { few_shot_prefix(&all, FEW_SHOT_FRACTION).to_vec() } else { all };
        if train_w.is_empty() {
            return Err(AppError::Data(format!("few-shot prefix of the training windows is empty for T={t}")));
        }
        let val_w = window(&sp.val, h, t, cfg.data.eval_stride)?;
        if val_w.is_empty() {
            log.warn(format!("validation split has no windows for H={h}, T={t}; early stopping uses training windows"));
        }
        log.info(format!("training T={t} on {} windows ({})", train_w.len(), model.describe()));
        let prepared = prepare(&model, &params, &train_w)?;
        let val_p = prepare(&model, &params, &val_w)?;
        let started = Instant::now();
        let res = pipeline::train(&model, params, &prepared, &val_p, &cfg.train, &mut |e| match e {
            TrainEvent::Epoch { epoch, train_loss, val_time, improved } => log.info(format!(
                "  epoch {epoch:>3}  loss {train_loss:.5}  val L_TIME {val_time:.5}{}  {:.1}s",
                if *improved { " *" } else { "" },
                started.elapsed().as_secs_f64()
            )),
            TrainEvent::EarlyStop { epoch, best_epoch } => {
                log.info(format!("  early stop at epoch {epoch}, best epoch {best_epoch}"))
            }
            _ => {}
        })?;
        let best_val_time = res.history.get(res.best_epoch).map_or(f64::NAN, |r| r.val_time);
        let meta = CheckpointMeta {
            stage: "forecast".into(),
            protocol: checkpoint_tag(protocol).into(),
            dataset: ds.name.clone(),
            config_hash: cfg.fingerprint(),
            seed: cfg.train.seed,
            train_windows: res.train_windows,
            steps: res.steps,
            model: mcfg,
        };
        let checkpoint = Checkpoint { meta, params: res.params };
        let path = checkpoint_path(&cfg.output_dir, protocol, t);
        checkpoint.save(&path)?;
        log.info(format!("  saved {}", path.display()));
        out.push(TrainedHorizon { horizon: t, path, checkpoint, best_val_time });
    }
    Ok(out)
}

/// Scores saved checkpoints on the test split of `eval_ds`.
pub fn evaluate(
    cfg: &RunConfig,
    protocol: Protocol,
    ckpt_dir: &Path,
    train_ref: Option<&str>,
    eval_ds: &Dataset,
    log: Log,
) -> AppResult<ExperimentReport> {
    let started = Instant::now();
    let sp = split_dataset(cfg, eval_ds)?;
    let mut trained_on: Option<String> = None;
    let mut report = ExperimentReport::new(protocol, eval_ds.name.clone(), cfg.train.seed, cfg.fingerprint());
    let mut noise: Vec<NoiseResult> =
        NOISE_FACTORS.iter().map(|&factor| NoiseResult { factor, horizons: Default::default() }).collect();
    for (h, t) in protocol_shapes(cfg, protocol) {
        let path = checkpoint_path(ckpt_dir, protocol, t);
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.meta.stage != "forecast" {
            return Err(AppError::Data(format!("{} is not a forecasting checkpoint", path.display())));
        }
        if ckpt.meta.model.horizon != t || ckpt.meta.model.input_len != h {
            return Err(AppError::Config(format!(
                "{} forecasts T={} from H={}, requested T={t} from H={h}",
                path.display(),
                ckpt.meta.model.horizon,
                ckpt.meta.model.input_len
            )));
        }
        let source = &ckpt.meta.dataset;
        if let Some(a) = train_ref {
            if a != source {
                return Err(AppError::Data(format!("{} was trained on {source}, not {a}", path.display())));
            }
        }
        match protocol {
            Protocol::Zero if source == &eval_ds.name => {
                return Err(AppError::Usage(format!(
                    "zero-shot evaluation needs a checkpoint trained on another dataset; {} was trained on {source}",
                    path.display()
                )))
            }
            Protocol::Zero => {}
            _ if source != &eval_ds.name => {
                return Err(AppError::Usage(format!(
                    "{} was trained on {source}; use --protocol zero to evaluate on {}",
                    path.display(),
                    eval_ds.name
                )))
            }
            _ => {}
        }
        trained_on = Some(source.clone());
        let model = Forecaster::new(ckpt.meta.model.clone())?;
        let windows = window(&sp.test, h, t, cfg.data.eval_stride)?;
        if windows.is_empty() {
            log.warn(format!("test split of {} rows has no windows for H={h}, T={t}; skipped", sp.test.len()));
            continue;
        }
        let mut opts = EvalOptions::default();
        if protocol == Protocol::Short {
            opts.season = Some(cfg.eval.season.min(h - 1).max(1));
            opts.smape_percent = true;
        }
        let predictor = model_predictor(&model, &ckpt.params);
        let clean = score(&windows, t, &opts, &predictor)?;
        report.insert(t, &clean);
        if protocol == Protocol::Noise {
            let sigma = sp.test.channel_std();
            for entry in noise.iter_mut() {
                let o = EvalOptions {
                    noise_factor: entry.factor,
                    noise_seed: cfg.eval.noise_seed,
                    noise_sigma: sigma.clone(),
                    ..opts.clone()
                };
                let r = score(&windows, t, &o, &predictor)?;
                entry.horizons.insert(t.to_string(), r.normalized);
            }
        }
        log.info(format!("evaluated T={t} on {} windows", windows.len()));
    }
    if report.horizons.is_empty() {
        return Err(AppError::Data(format!("no horizon had test windows in {}", eval_ds.name)));
    }
    if protocol == Protocol::Zero {
        report.dataset = format!("{}→{}", trained_on.unwrap_or_default(), eval_ds.name);
    }
    if protocol == Protocol::Noise {
        report.noise = noise;
    }
    report.runtime_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Forecast following the last `H` rows of the series, in original units.
pub fn forecast(ckpt: &Checkpoint, ds: &Dataset) -> AppResult<Tensor> {
    let model = Forecaster::new(ckpt.meta.model.clone())?;
    let h = model.cfg.input_len;
    let n = ds.series.len();
    if n < h {
        return Err(AppError::Data(format!("{} has {n} rows, the model needs {h}", ds.name)));
    }
    let x = ds.series.slice(n - h, n)?.values;
    let stats = NormStats::of(&x);
    let y = model.predict(&ckpt.params, &stats.apply(&x))?;
    Ok(stats.invert(&y))
}

#[derive(Serialize)]
struct SplitManifest {
    rows: usize,
    start: usize,
    windows: Vec<(usize, usize, usize)>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    dataset: &'a str,
    source: &'a str,
    rows: usize,
    channels: &'a [String],
    train: SplitManifest,
    val: SplitManifest,
    test: SplitManifest,
    train_mean: Vec<f64>,
    train_std: Vec<f64>,
    config_hash: String,
}

/// Split sizes, window counts per `(H, T)` and training statistics.
pub fn write_manifest(cfg: &RunConfig, ds: &Dataset, protocol: Protocol, path: &Path) -> AppResult<()> {
    let sp = split_dataset(cfg, ds)?;
    let shapes = protocol_shapes(cfg, protocol);
    let seg = |s: &TimeSeries, stride: usize| SplitManifest {
        rows: s.len(),
        start: s.offset,
        windows: shapes
            .iter()
            .map(|&(h, t)| (h, t, wavecast_core::data::window_count(s.len(), h, t, stride)))
            .collect(),
    };
    let stats = NormStats::of(&sp.train.values);
    let m = Manifest {
        dataset: &ds.name,
        source: &cfg.data.source,
        rows: ds.series.len(),
        channels: &ds.series.channel_names,
        train: seg(&sp.train, cfg.data.train_stride),
        val: seg(&sp.val, cfg.data.eval_stride),
        test: seg(&sp.test, cfg.data.eval_stride),
        train_mean: stats.mean,
        train_std: stats.std,
        config_hash: cfg.fingerprint(),
    };
    let json = serde_json::to_string_pretty(&m).map_err(|e| AppError::Data(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| AppError::io(path, e))
}
