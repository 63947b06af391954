//! Run configuration: one TOML file with a section per module, plus
//! `section.key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wavecast_core::backbone::BackboneConfig;
use wavecast_core::data::{NanPolicy, Sinusoid, SplitSpec, SynthSpec};
use wavecast_core::model::ModelConfig;
use wavecast_core::mscnn::MscnnConfig;
use wavecast_core::pipeline::{TrainConfig, LONG_HORIZONS, SHORT_HORIZONS};
use wavecast_core::t2t::T2tConfig;

use crate::error::{AppError, AppResult};

pub const OUTPUT_DIR_ENV: &str = "WAVECAST_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `synthetic` or a CSV path.
    pub source: String,
    /// Dataset reference recorded in checkpoints and reports; defaults to
    /// the file stem or `synthetic`.
    pub name: Option<String>,
    /// Channels to keep; empty keeps all.
    pub columns: Vec<String>,
    pub split: SplitSpec,
    pub nan_policy: NanPolicy,
    pub input_len: usize,
    pub horizons: Vec<usize>,
    pub train_stride: usize,
    pub eval_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            name: None,
            columns: Vec::new(),
            split: SplitSpec::default(),
            nan_policy: NanPolicy::Reject,
            input_len: 96,
            horizons: LONG_HORIZONS.to_vec(),
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub length: usize,
    pub variables: usize,
    pub seed: u64,
    pub sinusoids: Vec<Sinusoid>,
    pub trend: f64,
    pub noise: f64,
    pub channel_phase: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        SyntheticConfig {
            length: 4000,
            variables: 2,
            seed: 1,
            sinusoids: s.sinusoids,
            trend: s.trend,
            noise: s.noise,
            channel_phase: s.channel_phase,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            sinusoids: self.sinusoids.clone(),
            trend: self.trend,
            noise: self.noise,
            channel_phase: self.channel_phase,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    /// External embedding table; a seeded synthetic table is used when unset.
    pub table: Option<PathBuf>,
    /// Words of the external table that seed the similarity filter.
    pub seed_words: Vec<String>,
    pub seed: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            table: None,
            seed_words: ["trend", "rise", "fall", "increase", "decrease", "peak", "cycle", "season", "stable", "spike"]
                .map(String::from)
                .to_vec(),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Seasonal period for MASE and the seasonal-naive baseline.
    pub season: usize,
    pub noise_seed: u64,
    pub short_horizons: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { season: 24, noise_seed: 99, short_horizons: SHORT_HORIZONS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Checkpoint whose `backbone.*` base weights replace the random ones.
    pub backbone_weights: Option<PathBuf>,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub mscnn: MscnnConfig,
    pub t2t: T2tConfig,
    pub backbone: BackboneConfig,
    pub vocab: VocabConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone_weights: None,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            mscnn: MscnnConfig::default(),
            t2t: T2tConfig::default(),
            backbone: BackboneConfig::default(),
            vocab: VocabConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> AppResult<()> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| AppError::Usage(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(AppError::Usage(format!("override key {path:?} is malformed")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| AppError::Config(format!("{path}: {k} is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Keys present in `given` but absent from `known`, as dotted paths.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &path, out),
            _ => {}
        }
    }
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> AppResult<RunConfig> {
        let cfg: RunConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(e.message().to_string()))?;
        let known = toml::Table::try_from(&cfg).map_err(|e| AppError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&table, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(AppError::Config(format!("unknown field(s): {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults), then applies overrides and
    /// the output directory environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> AppResult<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| AppError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg = RunConfig::from_table(table)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> AppResult<()> {
        let field = |name: &str, msg: String| Err(AppError::Config(format!("{name}: {msg}")));
        if self.data.horizons.is_empty() || self.data.horizons.contains(&0) {
            return field("data.horizons", "need at least one positive horizon".into());
        }
        if self.data.train_stride == 0 || self.data.eval_stride == 0 {
            return field("data.train_stride", "strides must be positive".into());
        }
        if self.data.input_len == 0 {
            return field("data.input_len", "must be positive".into());
        }
        if self.eval.season == 0 {
            return field("eval.season", "must be positive".into());
        }
        if self.synthetic.length == 0 || self.synthetic.variables == 0 {
            return field("synthetic.length", "synthetic series need rows and channels".into());
        }
        self.train.validate().map_err(|e| AppError::Config(format!("train: {e}")))?;
        self.model(self.data.input_len, self.data.horizons[0])
            .validate()
            .map_err(|e| AppError::Config(format!("model: {e}")))
    }

    pub fn model(&self, input_len: usize, horizon: usize) -> ModelConfig {
        let base = ModelConfig {
            input_len: self.data.input_len,
            horizon,
            mscnn: self.mscnn.clone(),
            t2t: self.t2t.clone(),
            backbone: self.backbone.clone(),
            vocab_seed: self.vocab.seed,
        };
        if input_len == self.data.input_len {
            base
        } else {
            base.adapted(input_len, horizon)
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
