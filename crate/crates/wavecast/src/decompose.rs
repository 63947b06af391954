//! Short/long-term splits of a single series: the wavelet decoupler and
//! two reference methods for comparison.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use wavecast_core::wavelet::{decouple, FilterBank};

use crate::error::{AppError, AppResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Wavelet,
    Fourier,
    Pooling,
}

/// `(short, long)` with `short + long = x`.
pub type Split = (Vec<f64>, Vec<f64>);

pub fn wavelet(x: &[f64], levels: usize) -> AppResult<Split> {
    let d = decouple(x, levels, &FilterBank::db4())?;
    Ok((d.short, d.long))
}

/// Keeps frequency bins `0..=cutoff` (and their mirrors) as the long-term part.
pub fn fourier(x: &[f64], cutoff: usize) -> AppResult<Split> {
    let n = x.len();
    if n == 0 {
        return Err(AppError::Data("empty series".into()));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        if k.min(n - k) > cutoff {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let long: Vec<f64> = buf.iter().map(|c| c.re / n as f64).collect();
    let short = x.iter().zip(&long).map(|(a, b)| a - b).collect();
    Ok((short, long))
}

/// Centered moving average with edge replication as the long-term part.
pub fn pooling(x: &[f64], window: usize) -> AppResult<Split> {
    if window == 0 {
        return Err(AppError::Usage("--window must be positive".into()));
    }
    if x.is_empty() {
        return Err(AppError::Data("empty series".into()));
    }
    let n = x.len() as isize;
    let left = (window as isize - 1) / 2;
    let at = |i: isize| x[i.clamp(0, n - 1) as usize];
    let long: Vec<f64> = (0..n)
        .map(|t| (t - left..t - left + window as isize).map(at).sum::<f64>() / window as f64)
        .collect();
    let short = x.iter().zip(&long).map(|(a, b)| a - b).collect();
    Ok((short, long))
}

pub fn run(method: Method, x: &[f64], levels: usize, window: usize, cutoff: Option<usize>) -> AppResult<Split> {
    match method {
        Method::Wavelet => wavelet(x, levels),
        Method::Fourier => fourier(x, cutoff.unwrap_or(x.len() >> (levels + 1))),
        Method::Pooling => pooling(x, window),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_tracks_a_line() {
        let x: Vec<f64> = (0..100).map(|t| 0.5 * t as f64 + 3.0).collect();
        let (short, long) = pooling(&x, 25).unwrap();
        for t in 12..88 {
            assert!((long[t] - x[t]).abs() < 1e-9);
            assert!(short[t].abs() < 1e-9);
        }
    }

    #[test]
    fn fourier_split_separates_tones() {
        let n = 128;
        let slow: Vec<f64> = (0..n).map(|t| (2.0 * std::f64::consts::PI * 2.0 * t as f64 / n as f64).sin()).collect();
        let fast: Vec<f64> = (0..n).map(|t| (2.0 * std::f64::consts::PI * 40.0 * t as f64 / n as f64).cos()).collect();
        let x: Vec<f64> = slow.iter().zip(&fast).map(|(a, b)| a + b).collect();
        let (short, long) = fourier(&x, 8).unwrap();
        for t in 0..n {
            assert!((long[t] - slow[t]).abs() < 1e-9);
            assert!((short[t] - fast[t]).abs() < 1e-9);
        }
    }
}
