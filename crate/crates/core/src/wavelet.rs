//! Daubechies-4 (8-tap) discrete wavelet transform with periodic extension,
//! and the short/long-term decoupler built on it.
//!
//! With periodic extension the orthonormal filter bank makes each analysis
//! level an orthogonal map, so the multilevel transform preserves energy and
//! inverts exactly.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::substrate::Tensor;

pub const FILTER_LEN: usize = 8;

/// Scaling (low-pass) filter of the 4-vanishing-moment Daubechies wavelet.
pub const DB4_LOWPASS: [f64; FILTER_LEN] = [
    0.230_377_813_308_896_5,
    0.714_846_570_552_915_7,
    0.630_880_767_929_858_9,
    -0.027_983_769_416_859_854,
    -0.187_034_811_718_893_09,
    0.030_841_381_835_560_764,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_032,
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterBank {
    pub lowpass: [f64; FILTER_LEN],
    pub highpass: [f64; FILTER_LEN],
}

/// Measured deviations from the filter-bank identities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterBankCheck {
    /// `|Σ h² − 1|`
    pub orthonormality: f64,
    /// `|Σ k^p g[k]|` for `p = 0..=3`.
    pub vanishing_moments: [f64; 4],
    /// `g[k] == (−1)^k h[L−1−k]` bit for bit.
    pub qmf_exact: bool,
}

impl FilterBankCheck {
    pub fn passes(&self) -> bool {
        self.orthonormality < 1e-10 && self.vanishing_moments.iter().all(|&m| m < 1e-8) && self.qmf_exact
    }
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::db4()
    }
}

impl FilterBank {
    pub fn db4() -> Self {
        Self::from_lowpass(DB4_LOWPASS)
    }

    /// Completes a low-pass filter with its quadrature-mirror high-pass.
    pub fn from_lowpass(lowpass: [f64; FILTER_LEN]) -> Self {
        let mut highpass = [0.0; FILTER_LEN];
        for (k, g) in highpass.iter_mut().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            *g = sign * lowpass[FILTER_LEN - 1 - k];
        }
        FilterBank { lowpass, highpass }
    }

    /// Time-reversed analysis filters `(low, high)`.
    pub fn reconstruction(&self) -> ([f64; FILTER_LEN], [f64; FILTER_LEN]) {
        let mut lo = self.lowpass;
        let mut hi = self.highpass;
        lo.reverse();
        hi.reverse();
        (lo, hi)
    }

    pub fn check(&self) -> FilterBankCheck {
        let energy: f64 = self.lowpass.iter().map(|h| h * h).sum();
        let mut moments = [0.0; 4];
        for (p, m) in moments.iter_mut().enumerate() {
            let s: f64 = self
                .highpass
                .iter()
                .enumerate()
                .map(|(k, g)| crate::math::powf(k as f64, p as f64) * g)
                .sum();
            *m = s.abs();
        }
        let qmf_exact = (0..FILTER_LEN).all(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            self.highpass[k] == sign * self.lowpass[FILTER_LEN - 1 - k]
        });
        FilterBankCheck { orthonormality: (energy - 1.0).abs(), vanishing_moments: moments, qmf_exact }
    }
}

/// Multilevel coefficients of one channel: `a_w` plus `d_1..d_w` (finest first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveletCoeffs {
    pub levels: usize,
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    pub original_length: usize,
}

impl WaveletCoeffs {
    pub fn total_len(&self) -> usize {
        self.approx.len() + self.details.iter().map(Vec::len).sum::<usize>()
    }

    /// Same structure with the approximation zeroed.
    pub fn without_approx(&self) -> Self {
        let mut c = self.clone();
        c.approx.iter_mut().for_each(|v| *v = 0.0);
        c
    }

    /// Same structure with every detail vector zeroed.
    pub fn without_details(&self) -> Self {
        let mut c = self.clone();
        c.details.iter_mut().flatten().for_each(|v| *v = 0.0);
        c
    }
}

fn analysis_step(x: &[f64], bank: &FilterBank) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    for i in 0..half {
        let mut sa = 0.0;
        let mut sd = 0.0;
        for k in 0..FILTER_LEN {
            let v = x[(2 * i + k) % n];
            sa += bank.lowpass[k] * v;
            sd += bank.highpass[k] * v;
        }
        a[i] = sa;
        d[i] = sd;
    }
    (a, d)
}

fn synthesis_step(a: &[f64], d: &[f64], bank: &FilterBank) -> Vec<f64> {
    let n = 2 * a.len();
    let mut x = vec![0.0; n];
    for i in 0..a.len() {
        for k in 0..FILTER_LEN {
            x[(2 * i + k) % n] += bank.lowpass[k] * a[i] + bank.highpass[k] * d[i];
        }
    }
    x
}

/// Mallat cascade. `x.len()` must be a positive multiple of `2^levels`.
pub fn dwt_multilevel(x: &[f64], levels: usize, bank: &FilterBank) -> Result<WaveletCoeffs> {
    if levels < 1 {
        bail!(Config, "wavelet levels must be at least 1");
    }
    let block = 1usize.checked_shl(levels as u32).unwrap_or(0);
    if block == 0 || x.is_empty() || !x.len().is_multiple_of(block) {
        bail!(Length, "signal length {} is not a positive multiple of 2^{levels}", x.len());
    }
    let mut details = Vec::with_capacity(levels);
    let mut approx = x.to_vec();
    for _ in 0..levels {
        let (a, d) = analysis_step(&approx, bank);
        details.push(d);
        approx = a;
    }
    Ok(WaveletCoeffs { levels, approx, details, original_length: x.len() })
}

pub fn idwt_multilevel(c: &WaveletCoeffs, bank: &FilterBank) -> Result<Vec<f64>> {
    if c.levels < 1 || c.details.len() != c.levels {
        bail!(Structure, "{} detail vectors for {} levels", c.details.len(), c.levels);
    }
    let mut expected = c.original_length;
    for (i, d) in c.details.iter().enumerate() {
        if !expected.is_multiple_of(2) || d.len() != expected / 2 {
            bail!(Structure, "detail level {} has length {}, expected {}", i + 1, d.len(), expected / 2);
        }
        expected /= 2;
    }
    if c.approx.len() != expected || expected == 0 {
        bail!(Structure, "approximation has length {}, expected {expected}", c.approx.len());
    }
    let mut x = c.approx.clone();
    for d in c.details.iter().rev() {
        x = synthesis_step(&x, d, bank);
    }
    Ok(x)
}

/// Right-pads by repeating the last sample up to a multiple of `block`.
pub fn pad_to_multiple(x: &[f64], block: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    if let Some(&last) = x.last() {
        let target = x.len().div_ceil(block) * block;
        out.resize(target, last);
    }
    out
}

/// Short-term (high-frequency) and long-term (low-frequency) parts of a signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoupled {
    pub short: Vec<f64>,
    pub long: Vec<f64>,
    /// Length the signal was edge-padded to before the transform.
    pub padded_length: usize,
}

/// Splits `x` into `P_S = IWT(0, d)` and `P_L = IWT(a, 0)`, padding to a
/// multiple of `2^levels` first and truncating afterwards.
pub fn decouple(x: &[f64], levels: usize, bank: &FilterBank) -> Result<Decoupled> {
    if levels < 1 || levels >= usize::BITS as usize {
        bail!(Config, "wavelet levels must be in 1..{}", usize::BITS);
    }
    let block = 1usize << levels;
    if x.len() < block {
        bail!(Config, "signal of length {} is too short for {levels} wavelet levels", x.len());
    }
    let padded = pad_to_multiple(x, block);
    let coeffs = dwt_multilevel(&padded, levels, bank)?;
    let mut short = idwt_multilevel(&coeffs.without_approx(), bank)?;
    let mut long = idwt_multilevel(&coeffs.without_details(), bank)?;
    short.truncate(x.len());
    long.truncate(x.len());
    Ok(Decoupled { short, long, padded_length: padded.len() })
}

/// The long-term projection as a matrix: row `j` is `P_L(e_j)`, so for a
/// `[C × L]` feature map `X`, `P_L(X) = X · M` row by row.
pub fn long_term_operator(len: usize, levels: usize, bank: &FilterBank) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * len);
    let mut e = vec![0.0; len];
    for j in 0..len {
        e[j] = 1.0;
        data.extend(decouple(&e, levels, bank)?.long);
        e[j] = 0.0;
    }
    Tensor::new(vec![len, len], data)
}
