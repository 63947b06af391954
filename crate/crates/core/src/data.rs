//! Series containers, chronological splits, sliding windows, per-window
//! standardization, synthetic series and noise injection.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::math;
use crate::substrate::Tensor;

/// A multivariate series, `values` laid out `[len × V]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Tensor,
    pub timestamps: Option<Vec<String>>,
    pub channel_names: Vec<String>,
    pub frequency: String,
    /// Row of the first sample within the series this one was cut from.
    pub offset: usize,
}

impl TimeSeries {
    pub fn new(values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[1] != channel_names.len() {
            bail!(Dimension, "series needs [len × V] values with V channel names");
        }
        if !values.all_finite() {
            bail!(Numeric, "series contains non-finite values");
        }
        Ok(TimeSeries { values, timestamps: None, channel_names, frequency: String::from("unknown"), offset: 0 })
    }

    pub fn with_timestamps(mut self, ts: Vec<String>) -> Result<Self> {
        if ts.len() != self.len() {
            bail!(Dimension, "{} timestamps for {} rows", ts.len(), self.len());
        }
        self.timestamps = Some(ts);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variables(&self) -> usize {
        self.values.shape()[1]
    }

    /// Rows `start..end`, keeping metadata and the absolute offset.
    pub fn slice(&self, start: usize, end: usize) -> Result<TimeSeries> {
        if start > end || end > self.len() {
            bail!(Length, "slice {start}..{end} outside series of {}", self.len());
        }
        let v = self.variables();
        Ok(TimeSeries {
            values: Tensor::new([end - start, v], self.values.data()[start * v..end * v].to_vec())?,
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            channel_names: self.channel_names.clone(),
            frequency: self.frequency.clone(),
            offset: self.offset + start,
        })
    }

    /// Keeps the listed channels in the given order.
    pub fn select(&self, channels: &[usize]) -> Result<TimeSeries> {
        let v = self.variables();
        if channels.iter().any(|&c| c >= v) || channels.is_empty() {
            bail!(Config, "channel selection {channels:?} invalid for {v} channels");
        }
        let data = (0..self.len()).flat_map(|r| channels.iter().map(move |&c| (r, c))).map(|(r, c)| {
            self.values.data()[r * v + c]
        });
        Ok(TimeSeries {
            values: Tensor::new([self.len(), channels.len()], data.collect())?,
            channel_names: channels.iter().map(|&c| self.channel_names[c].clone()).collect(),
            ..self.clone()
        })
    }

    /// Population standard deviation of each channel.
    pub fn channel_std(&self) -> Vec<f64> {
        let (n, v) = (self.len(), self.variables());
        (0..v)
            .map(|c| {
                let col: Vec<f64> = (0..n).map(|r| self.values.data()[r * v + c]).collect();
                math::std_dev(&col)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    #[default]
    Reject,
    Interpolate,
}

/// Applies the missing-value policy to parsed rows (`None` marks a missing
/// or non-finite cell). Interpolation is linear between the nearest finite
/// neighbours in each column, holding the edge value at the ends.
pub fn resolve_missing(rows: Vec<Vec<Option<f64>>>, policy: NanPolicy) -> Result<Vec<Vec<f64>>> {
    if policy == NanPolicy::Reject {
        return rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.into_iter()
                    .map(|c| c.filter(|x| x.is_finite()))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or(Error::Ingestion { row: i + 1, message: "missing or non-finite value".into() })
            })
            .collect();
    }
    let n = rows.len();
    let v = rows.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; v]; n];
    for c in 0..v {
        let known: Vec<(usize, f64)> =
            (0..n).filter_map(|r| rows[r][c].filter(|x| x.is_finite()).map(|x| (r, x))).collect();
        if known.is_empty() {
            return Err(Error::Ingestion { row: 1, message: format!("column {c} has no finite values") });
        }
        let mut k = 0;
        for (r, row) in out.iter_mut().enumerate() {
            while k + 1 < known.len() && known[k + 1].0 <= r {
                k += 1;
            }
            let (r0, x0) = known[k];
            row[c] = if r <= r0 {
                x0
            } else if k + 1 < known.len() {
                let (r1, x1) = known[k + 1];
                x0 + (x1 - x0) * (r - r0) as f64 / (r1 - r0) as f64
            } else {
                x0
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    Ratio { train: f64, val: f64, test: f64 },
    Months { train: u32, val: u32, test: u32 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio { train: 0.6, val: 0.2, test: 0.2 }
    }
}

/// `year·12 + month − 1` from a leading `YYYY-MM`.
pub fn month_index(stamp: &str) -> Result<i64> {
    let bad = || Error::Config(format!("timestamp {stamp:?} does not start with YYYY-MM"));
    let year: i64 = stamp.get(0..4).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    if stamp.as_bytes().get(4) != Some(&b'-') {
        return Err(bad());
    }
    let month: i64 = stamp.get(5..7).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    if !(1..=12).contains(&month) {
        return Err(bad());
    }
    Ok(year * 12 + month - 1)
}

/// Row boundaries `[0, b1, b2, b3]` for the chronological split.
pub fn split_bounds(ts: &TimeSeries, spec: &SplitSpec) -> Result<[usize; 4]> {
    let n = ts.len();
    let bounds = match *spec {
        SplitSpec::Ratio { train, val, test } => {
            if train <= 0.0 || val <= 0.0 || test <= 0.0 || train + val + test > 1.0 + 1e-9 {
                bail!(Config, "split ratios {train}/{val}/{test} must be positive and sum to at most 1");
            }
            let b1 = (n as f64 * train + 1e-9) as usize;
            let b2 = (n as f64 * (train + val) + 1e-9) as usize;
            let b3 = ((n as f64 * (train + val + test) + 1e-9) as usize).min(n);
            [0, b1, b2, b3]
        }
        SplitSpec::Months { train, val, test } => {
            let Some(stamps) = &ts.timestamps else {
                bail!(Config, "month-based split needs timestamps");
            };
            let months = stamps.iter().map(|s| month_index(s)).collect::<Result<Vec<_>>>()?;
            let m0 = months.first().copied().unwrap_or(0);
            let cut = |m: i64| months.iter().position(|&x| x >= m0 + m).unwrap_or(n);
            let (t, v, e) = (train as i64, val as i64, test as i64);
            [0, cut(t), cut(t + v), cut(t + v + e)]
        }
    };
    for (i, name) in ["train", "val", "test"].iter().enumerate() {
        if bounds[i + 1] <= bounds[i] {
            bail!(Config, "{name} segment is empty");
        }
    }
    Ok(bounds)
}

pub fn split(ts: &TimeSeries, spec: &SplitSpec) -> Result<(TimeSeries, TimeSeries, TimeSeries)> {
    let b = split_bounds(ts, spec)?;
    Ok((ts.slice(b[0], b[1])?, ts.slice(b[1], b[2])?, ts.slice(b[2], b[3])?))
}

/// Per-channel mean and (clamped) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of a `[rows × V]` block; a zero deviation becomes 1.
    pub fn of(x: &Tensor) -> NormStats {
        let (n, v) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; v];
        let mut std = vec![0.0; v];
        for c in 0..v {
            let col: Vec<f64> = (0..n).map(|r| x.data()[r * v + c]).collect();
            mean[c] = math::mean(&col);
            let s = math::std_dev(&col);
            std[c] = if s > 0.0 { s } else { 1.0 };
        }
        NormStats { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        self.map(x, |v, m, s| v * s + m)
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let v = self.mean.len();
        let data = x.data().iter().enumerate().map(|(i, &val)| f(val, self.mean[i % v], self.std[i % v])).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    /// `[H × V]` input.
    pub x: Tensor,
    /// `[T × V]` target starting right after `x`.
    pub y: Tensor,
    /// Absolute row of the first input sample.
    pub origin: usize,
    /// Computed from `x` alone.
    pub stats: NormStats,
    pub normalized: bool,
}

/// Number of windows `floor((len − H − T)/stride) + 1`, or 0 when too short.
pub fn window_count(len: usize, h: usize, t: usize, stride: usize) -> usize {
    if stride == 0 || len < h + t {
        0
    } else {
        (len - h - t) / stride + 1
    }
}

/// Sliding windows over a segment; a segment shorter than `H + T` yields none.
pub fn window(seg: &TimeSeries, h: usize, t: usize, stride: usize) -> Result<Vec<WindowedSample>> {
    if h == 0 || t == 0 || stride == 0 {
        bail!(Config, "window lengths and stride must be positive (H={h}, T={t}, stride={stride})");
    }
    let v = seg.variables();
    let d = seg.values.data();
    (0..window_count(seg.len(), h, t, stride))
        .map(|k| {
            let s = k * stride;
            let x = Tensor::new([h, v], d[s * v..(s + h) * v].to_vec())?;
            let y = Tensor::new([t, v], d[(s + h) * v..(s + h + t) * v].to_vec())?;
            let stats = NormStats::of(&x);
            Ok(WindowedSample { x, y, origin: seg.offset + s, stats, normalized: false })
        })
        .collect()
}

/// Like [`window`] but an empty result is an error.
pub fn window_train(seg: &TimeSeries, h: usize, t: usize, stride: usize) -> Result<Vec<WindowedSample>> {
    let w = window(seg, h, t, stride)?;
    if w.is_empty() {
        bail!(Config, "training segment of {} rows is shorter than H + T = {}", seg.len(), h + t);
    }
    Ok(w)
}

/// Standardizes `x` and `y` with the statistics of `x`.
pub fn normalize(sample: &WindowedSample) -> WindowedSample {
    if sample.normalized {
        return sample.clone();
    }
    WindowedSample {
        x: sample.stats.apply(&sample.x),
        y: sample.stats.apply(&sample.y),
        origin: sample.origin,
        stats: sample.stats.clone(),
        normalized: true,
    }
}

pub fn denormalize(y_hat: &Tensor, stats: &NormStats) -> Tensor {
    stats.invert(y_hat)
}

/// The first `⌊fraction · N⌋` windows.
pub fn few_shot_prefix<T>(windows: &[T], fraction: f64) -> &[T] {
    let k = (windows.len() as f64 * fraction + 1e-9) as usize;
    &windows[..k.min(windows.len())]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    /// Cycles per sample.
    pub freq: f64,
    pub amp: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub sinusoids: Vec<Sinusoid>,
    pub trend: f64,
    pub noise: f64,
    /// Extra phase added per channel index.
    pub channel_phase: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sinusoids: vec![
                Sinusoid { freq: 1.0 / 24.0, amp: 1.0, phase: 0.0 },
                Sinusoid { freq: 1.0 / 96.0, amp: 0.5, phase: 0.3 },
            ],
            trend: 0.0,
            noise: 0.1,
            channel_phase: 0.7,
        }
    }
}

/// `Σ amp·sin(2π·freq·t + phase + v·channel_phase) + trend·t + noise·ε`.
pub fn synth_generate(spec: &SynthSpec, length: usize, vars: usize, seed: u64) -> Result<TimeSeries> {
    if length == 0 || vars == 0 {
        bail!(Config, "synthetic series needs positive length and channel count");
    }
    if spec.noise < 0.0 {
        bail!(Config, "noise level must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; length * vars];
    for t in 0..length {
        for v in 0..vars {
            let mut x = spec.trend * t as f64;
            for s in &spec.sinusoids {
                x += s.amp
                    * math::sin(2.0 * core::f64::consts::PI * s.freq * t as f64 + s.phase + v as f64 * spec.channel_phase);
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            data[t * vars + v] = x + spec.noise * e;
        }
    }
    let mut ts = TimeSeries::new(Tensor::new([length, vars], data)?, (0..vars).map(|v| format!("ch{v}")).collect())?;
    ts.frequency = String::from("synthetic");
    Ok(ts)
}

/// Adds `factor · σ_channel · ε` with standard normal `ε` to every element.
pub fn add_noise(ts: &TimeSeries, factor: f64, seed: u64) -> Result<TimeSeries> {
    let sigma = ts.channel_std();
    Ok(TimeSeries { values: add_noise_with(&ts.values, &sigma, factor, seed)?, ..ts.clone() })
}

/// Noise on a bare `[rows × V]` block with supplied channel deviations.
pub fn add_noise_with(x: &Tensor, sigma: &[f64], factor: f64, seed: u64) -> Result<Tensor> {
    if !(factor >= 0.0) {
        bail!(Config, "noise factor {factor} must be non-negative");
    }
    if factor == 0.0 {
        return Ok(x.clone());
    }
    let v = sigma.len();
    if x.cols() != v {
        bail!(Dimension, "{} channel deviations for {} channels", v, x.cols());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &val)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            val + factor * sigma[i % v] * e
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
