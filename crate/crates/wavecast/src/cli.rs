//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use wavecast_core::pipeline::Protocol;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::decompose::{self, Method};
use crate::error::{AppError, AppResult};
use crate::io::write_columns;
use crate::report;
use crate::runner::{self, Log};
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "wavecast", version, about = "Wavelet-decoupled forecasting with a semantic side branch")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lambda=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Where checkpoints and reports go. Beats the config and environment.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Suppress progress on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

fn protocol(s: &str) -> Result<Protocol, String> {
    Protocol::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split one channel into short-term and long-term parts.
    Decompose(DecomposeArgs),
    /// Pretrain the semantic encoder and save `t2t.ckpt`.
    PretrainT2t(DatasetArg),
    /// Train forecasters for every horizon of a protocol.
    Train(TrainArgs),
    /// Score saved checkpoints and write a report.
    Evaluate(EvaluateArgs),
    /// Forecast past the end of a series.
    Forecast(ForecastArgs),
    /// Run the built-in numerical checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// CSV file, or `synthetic[:SEED]`.
    #[arg(long)]
    pub input: String,
    /// Channel to split; the first one when omitted.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, value_enum, default_value_t = Method::Wavelet)]
    pub method: Method,
    /// Moving-average width for the pooling method.
    #[arg(long, default_value_t = 25)]
    pub window: usize,
    /// Highest frequency bin kept as long-term by the Fourier method.
    #[arg(long)]
    pub cutoff: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatasetArg {
    /// CSV file or `synthetic[:SEED]`; defaults to `data.source`.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = protocol, default_value = "long")]
    pub protocol: Protocol,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Pretrained semantic encoder; pretraining runs first when absent or
    /// incompatible with an input length.
    #[arg(long)]
    pub t2t_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_parser = protocol, default_value = "long")]
    pub protocol: Protocol,
    /// Defaults to the output directory.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Dataset the checkpoints must have been trained on.
    #[arg(long)]
    pub train_dataset: Option<String>,
    /// Dataset to score on; defaults to `data.source`.
    #[arg(long)]
    pub eval_dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, hide = true)]
    pub corrupt_filter: bool,
}

fn load_config(cli: &Cli) -> AppResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn decompose_cmd(cfg: &RunConfig, a: &DecomposeArgs, log: Log) -> AppResult<()> {
    let ds = runner::load_dataset(cfg, Some(&a.input))?;
    let col = match &a.column {
        Some(c) => ds
            .series
            .channel_names
            .iter()
            .position(|n| n == c)
            .ok_or_else(|| AppError::Data(format!("column {c:?} not found in {}", a.input)))?,
        None => 0,
    };
    let v = ds.series.variables();
    let x: Vec<f64> = (0..ds.series.len()).map(|r| ds.series.values.data()[r * v + col]).collect();
    let (short, long) = decompose::run(a.method, &x, a.levels, a.window, a.cutoff)?;
    let block = 1usize << a.levels.min(63);
    if a.method == Method::Wavelet && !x.len().is_multiple_of(block) {
        log.info(format!("padded {} samples to {} by repeating the last one", x.len(), x.len().next_multiple_of(block)));
    }
    let cols: [(&str, &[f64]); 3] = [("value", &x), ("short", &short), ("long", &long)];
    match &ds.series.timestamps {
        Some(ts) => write_columns(&a.output, Some(("timestamp", ts)), &cols),
        None => write_columns(&a.output, None, &cols),
    }
}

fn train_cmd(cfg: &RunConfig, a: &TrainArgs, log: Log) -> AppResult<()> {
    let ds = runner::load_dataset(cfg, a.dataset.as_deref())?;
    ensure_dir(&cfg.output_dir)?;
    let tag = runner::checkpoint_tag(a.protocol);
    runner::write_manifest(cfg, &ds, a.protocol, &cfg.output_dir.join(format!("manifest_{tag}.json")))?;
    let t2t = a.t2t_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let done = runner::train(cfg, &ds, a.protocol, t2t.as_ref(), log)?;
    for h in &done {
        println!("T={:<4} val L_TIME {:.5}  {}", h.horizon, h.best_val_time, h.path.display());
    }
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, a: &EvaluateArgs, log: Log) -> AppResult<()> {
    if a.protocol == Protocol::Zero && a.eval_dataset.is_none() {
        return Err(AppError::Usage("zero-shot evaluation needs --eval-dataset".into()));
    }
    let ds = runner::load_dataset(cfg, a.eval_dataset.as_deref())?;
    let dir = a.checkpoint_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let r = runner::evaluate(cfg, a.protocol, &dir, a.train_dataset.as_deref(), &ds, log)?;
    let stem = format!("report_{}_{}", a.protocol.name(), sanitize(&r.dataset));
    report::write(&cfg.output_dir, &stem, &r)?;
    print!("{}", report::summary(&r));
    log.info(format!("wrote {}", cfg.output_dir.join(format!("{stem}.json")).display()));
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn forecast_cmd(cfg: &RunConfig, a: &ForecastArgs) -> AppResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if ckpt.meta.stage != "forecast" {
        return Err(AppError::Data(format!("{} is not a forecasting checkpoint", a.checkpoint.display())));
    }
    let ds = runner::load_dataset(cfg, a.dataset.as_deref())?;
    let y = runner::forecast(&ckpt, &ds)?;
    let (t, v) = (y.rows(), y.cols());
    let labels: Vec<String> = (1..=t).map(|i| format!("t+{i}")).collect();
    let cols: Vec<Vec<f64>> = (0..v).map(|c| (0..t).map(|r| y.data()[r * v + c]).collect()).collect();
    let named: Vec<(&str, &[f64])> =
        ds.series.channel_names.iter().zip(&cols).map(|(n, c)| (n.as_str(), c.as_slice())).collect();
    write_columns(&a.output, Some(("step", &labels)), &named)
}

fn selftest_cmd(a: &SelftestArgs) -> AppResult<()> {
    let results = selftest::run(selftest::Options { corrupt_filter: a.corrupt_filter });
    for r in &results {
        println!("{} {:<20} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(AppError::Numeric(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> AppResult<()> {
    let log = Log { quiet: cli.quiet };
    if let Command::Selftest(a) = &cli.command {
        return selftest_cmd(a);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Decompose(a) => decompose_cmd(&cfg, a, log),
        Command::PretrainT2t(a) => {
            let ds = runner::load_dataset(&cfg, a.dataset.as_deref())?;
            let out = runner::pretrain(&cfg, &ds, cfg.data.input_len, log)?;
            let path = runner::t2t_checkpoint_path(&cfg.output_dir);
            out.checkpoint.save(&path)?;
            println!(
                "masked MSE {:.5} -> {:.5} over {} windows; {}",
                out.initial_masked_mse,
                out.final_masked_mse,
                out.windows,
                path.display()
            );
            Ok(())
        }
        Command::Train(a) => train_cmd(&cfg, a, log),
        Command::Evaluate(a) => evaluate_cmd(&cfg, a, log),
        Command::Forecast(a) => forecast_cmd(&cfg, a),
        Command::Selftest(_) => unreachable!(),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
