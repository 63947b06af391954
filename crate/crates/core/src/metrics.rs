//! Point-forecast error metrics.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::substrate::Tensor;

/// Targets with `|y|` below this are left out of the relative error.
pub const RELATIVE_EPS: f64 = 1e-8;

fn pairs<'a>(y: &'a Tensor, y_hat: &'a Tensor) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if y.shape() != y_hat.shape() {
        bail!(Dimension, "target {:?} and forecast {:?} differ in shape", y.shape(), y_hat.shape());
    }
    if y.is_empty() {
        bail!(Dimension, "metrics need at least one element");
    }
    Ok(y.data().iter().copied().zip(y_hat.data().iter().copied()))
}

pub fn mse(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    Ok(pairs(y, y_hat)?.map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    Ok(pairs(y, y_hat)?.map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean of `|y − ŷ| / |y|` over elements with `|y| ≥ 1e-8`.
pub fn msae(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    let kept: Vec<f64> =
        pairs(y, y_hat)?.filter(|(a, _)| a.abs() >= RELATIVE_EPS).map(|(a, b)| (a - b).abs() / a.abs()).collect();
    if kept.is_empty() {
        return Err(Error::UndefinedMetric("every target is zero".into()));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Mean of `2|y − ŷ| / (|y| + |ŷ|)` as a fraction in `[0, 2]`; a pair that
/// is zero on both sides contributes 0.
pub fn smape(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    let total: f64 = pairs(y, y_hat)?
        .map(|(a, b)| {
            let den = a.abs() + b.abs();
            if den < RELATIVE_EPS {
                0.0
            } else {
                2.0 * (a - b).abs() / den
            }
        })
        .sum();
    Ok(total / y.len() as f64)
}

pub fn smape_percent(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    Ok(100.0 * smape(y, y_hat)?)
}

/// Mean absolute error scaled by the in-sample seasonal-naive error
/// `mean |x_t − x_{t−m}|`, per column of `[rows × V]` inputs.
pub fn mase(y: &Tensor, y_hat: &Tensor, insample: &Tensor, season: usize) -> Result<f64> {
    let v = y.cols();
    let n = insample.rows();
    if season == 0 || n <= season || insample.cols() != v {
        bail!(Config, "in-sample history of {n} rows cannot support season {season}");
    }
    let mut scale = 0.0;
    for t in season..n {
        for c in 0..v {
            scale += (insample.data()[t * v + c] - insample.data()[(t - season) * v + c]).abs();
        }
    }
    scale /= ((n - season) * v) as f64;
    if scale < RELATIVE_EPS {
        return Err(Error::UndefinedMetric("in-sample seasonal differences are all zero".into()));
    }
    Ok(mae(y, y_hat)? / scale)
}

/// `Σ wᵢ·vᵢ` with weights summing to 1.
pub fn owa(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() || values.is_empty() {
        bail!(Dimension, "{} values for {} weights", values.len(), weights.len());
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        bail!(Config, "weights must be non-negative and sum to 1, got {s}");
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum())
}

/// Equal-weight average of SMAPE and MASE relative to a baseline.
pub fn owa_relative(smape: f64, mase: f64, smape_base: f64, mase_base: f64) -> Result<f64> {
    if smape_base <= 0.0 || mase_base <= 0.0 {
        return Err(Error::UndefinedMetric("baseline errors must be positive".into()));
    }
    owa(&[smape / smape_base, mase / mase_base], &[0.5, 0.5])
}

/// Repeats the last `season` rows of `[rows × V]` history for `horizon` steps.
pub fn seasonal_naive(history: &Tensor, season: usize, horizon: usize) -> Result<Tensor> {
    let (n, v) = (history.rows(), history.cols());
    if season == 0 || season > n {
        bail!(Config, "season {season} needs at least that many history rows, have {n}");
    }
    let mut data = Vec::with_capacity(horizon * v);
    for t in 0..horizon {
        let src = n - season + t % season;
        data.extend_from_slice(&history.data()[src * v..(src + 1) * v]);
    }
    Tensor::new([horizon, v], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub msae: Option<f64>,
    pub smape: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub owa: Option<f64>,
}

/// Running sums over many windows, reduced to one report.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    n: usize,
    sq: f64,
    abs: f64,
    rel: f64,
    rel_n: usize,
    sym: f64,
}

impl MetricAccumulator {
    pub fn add(&mut self, y: &Tensor, y_hat: &Tensor) -> Result<()> {
        for (a, b) in pairs(y, y_hat)? {
            self.n += 1;
            self.sq += (a - b) * (a - b);
            self.abs += (a - b).abs();
            if a.abs() >= RELATIVE_EPS {
                self.rel += (a - b).abs() / a.abs();
                self.rel_n += 1;
            }
            let den = a.abs() + b.abs();
            if den >= RELATIVE_EPS {
                self.sym += 2.0 * (a - b).abs() / den;
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn report(&self, horizon: usize) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::UndefinedMetric("no forecast windows were evaluated".into()));
        }
        let n = self.n as f64;
        Ok(MetricReport {
            horizon,
            mse: self.sq / n,
            mae: self.abs / n,
            msae: (self.rel_n > 0).then(|| self.rel / self.rel_n as f64),
            smape: self.sym / n,
            mase: None,
            owa: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_values() {
        assert_eq!(mse(&t(&[0.0]), &t(&[2.0])).unwrap(), 4.0);
        assert_eq!(mse(&t(&[1.0, 2.0]), &t(&[2.0, 4.0])).unwrap(), 2.5);
        assert_eq!(mae(&t(&[0.0]), &t(&[-3.0])).unwrap(), 3.0);
        assert_eq!(mae(&t(&[1.0, 2.0]), &t(&[2.0, 4.0])).unwrap(), 1.5);
        assert_eq!(msae(&t(&[2.0]), &t(&[1.0])).unwrap(), 0.5);
        assert_eq!(msae(&t(&[0.0, 2.0]), &t(&[5.0, 1.0])).unwrap(), 0.5);
        assert!(matches!(msae(&t(&[0.0]), &t(&[1.0])), Err(Error::UndefinedMetric(_))));
        assert!((smape(&t(&[100.0]), &t(&[110.0])).unwrap() - 20.0 / 210.0).abs() < 1e-12);
        assert!((smape_percent(&t(&[100.0]), &t(&[110.0])).unwrap() - 2000.0 / 210.0).abs() < 1e-12);
        assert_eq!(smape(&t(&[1.0]), &t(&[-1.0])).unwrap(), 2.0);
        assert_eq!(owa(&[1.0, 2.0], &[0.5, 0.5]).unwrap(), 1.5);
        assert_eq!(owa(&[3.0, 7.0], &[0.0, 1.0]).unwrap(), 7.0);
        assert!(owa(&[1.0, 2.0], &[0.5, 0.6]).is_err());
        assert!(mse(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn naive_and_mase() {
        let h = t(&[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let f = seasonal_naive(&h, 3, 4).unwrap();
        assert_eq!(f.data(), [1.0, 2.0, 3.0, 1.0]);
        let h = t(&[0.0, 1.0, 0.0, 3.0]);
        assert!((mase(&t(&[1.0]), &t(&[3.0]), &h, 1).unwrap() - 1.2).abs() < 1e-12);
        assert!(mase(&t(&[1.0]), &t(&[3.0]), &t(&[2.0, 2.0]), 1).is_err());
        assert_eq!(owa_relative(1.0, 2.0, 2.0, 2.0).unwrap(), 0.75);
    }

    #[test]
    fn accumulator_matches_direct() {
        let y = t(&[1.0, -2.0, 0.0, 4.0]);
        let p = t(&[0.5, -1.0, 1.0, 4.5]);
        let mut acc = MetricAccumulator::default();
        acc.add(&y, &p).unwrap();
        let r = acc.report(4).unwrap();
        assert_eq!(r.mse, mse(&y, &p).unwrap());
        assert_eq!(r.mae, mae(&y, &p).unwrap());
        assert!((r.msae.unwrap() - msae(&y, &p).unwrap()).abs() < 1e-15);
        assert!((r.smape - smape(&y, &p).unwrap()).abs() < 1e-15);
        assert!(MetricAccumulator::default().report(1).is_err());
    }
}
