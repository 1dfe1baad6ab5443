//! PSNR scoring of reconstructions.

use std::fmt;

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::scene::Sample;

/// Largest ground-truth value of the default scene distribution, `0.1·√77`
/// rounded to four places.
pub const DEFAULT_PEAK: f64 = 0.8775;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PsnrConfig {
    Fixed(f64),
    /// Peak = largest ground-truth value in the evaluated set.
    DatasetMax,
}

impl Default for PsnrConfig {
    fn default() -> Self {
        PsnrConfig::Fixed(DEFAULT_PEAK)
    }
}

impl PsnrConfig {
    /// `"max"` or a positive number.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "max" {
            return Ok(PsnrConfig::DatasetMax);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("PSNR peak must be a number or \"max\", got {s:?}")))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!("PSNR peak must be positive, got {v}")));
        }
        Ok(PsnrConfig::Fixed(v))
    }

    fn peak<'a>(self, truths: impl Iterator<Item = &'a [f64]>) -> Result<f64> {
        match self {
            PsnrConfig::Fixed(v) => Ok(v),
            PsnrConfig::DatasetMax => {
                let m = truths.flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                if m > 0.0 {
                    Ok(m)
                } else {
                    Err(Error::Domain("dataset maximum is not positive; PSNR peak undefined".into()))
                }
            }
        }
    }
}

impl fmt::Display for PsnrConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PsnrConfig::Fixed(v) => write!(f, "{v}"),
            PsnrConfig::DatasetMax => f.write_str("max"),
        }
    }
}

/// PSNR in dB; identical images score [`Psnr::Infinite`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

/// `10·log₁₀(peak²/MSE)`.
pub fn psnr(estimate: &[f64], truth: &[f64], cfg: PsnrConfig) -> Result<Psnr> {
    check_len("PSNR images", truth.len(), estimate.len())?;
    if truth.is_empty() {
        return Err(Error::Domain("PSNR of empty images".into()));
    }
    let peak = cfg.peak(std::iter::once(truth))?;
    Ok(psnr_with_peak(estimate, truth, peak))
}

fn psnr_with_peak(estimate: &[f64], truth: &[f64], peak: f64) -> Psnr {
    let mse = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64;
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (peak * peak / mse).log10())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitScores {
    /// `(sample index, PSNR)` in increasing index order.
    pub per_sample: Vec<(usize, Psnr)>,
    pub mean: Psnr,
    pub peak: f64,
}

/// Scores `reconstruct` on every sample of a split. Samples are processed
/// in parallel; the result order is by sample index.
pub fn evaluate_split<F>(samples: &[Sample<f64>], cfg: PsnrConfig, reconstruct: F) -> Result<SplitScores>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate an empty split".into()));
    }
    let peak = cfg.peak(samples.iter().map(|s| s.ground_truth.values.as_slice()))?;
    let mut per_sample = samples
        .par_iter()
        .map(|s| {
            let est = reconstruct(&s.measurements.delta_p)?;
            check_len("reconstruction", s.ground_truth.values.len(), est.len())?;
            Ok((s.index, psnr_with_peak(&est, &s.ground_truth.values, peak)))
        })
        .collect::<Result<Vec<_>>>()?;
    per_sample.sort_by_key(|(i, _)| *i);
    let mean = if per_sample.iter().any(|(_, p)| *p == Psnr::Infinite) {
        Psnr::Infinite
    } else {
        Psnr::Finite(per_sample.iter().map(|(_, p)| p.value()).sum::<f64>() / per_sample.len() as f64)
    };
    Ok(SplitScores { per_sample, mean, peak })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_are_infinite() {
        let a = [0.1, 0.5, 0.0];
        let p = psnr(&a, &a, PsnrConfig::default()).unwrap();
        assert_eq!(p, Psnr::Infinite);
        assert_eq!(p.to_string(), "inf");
    }

    #[test]
    fn constant_offset_twenty_db() {
        let p = psnr(&[0.1; 16], &[0.0; 16], PsnrConfig::Fixed(1.0)).unwrap();
        assert!((p.value() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric() {
        let a = [0.3, 0.1, 0.7];
        let b = [0.2, 0.4, 0.6];
        let cfg = PsnrConfig::Fixed(0.8775);
        assert_eq!(psnr(&a, &b, cfg).unwrap(), psnr(&b, &a, cfg).unwrap());
    }

    #[test]
    fn shape_mismatch() {
        assert!(psnr(&[0.0; 3], &[0.0; 4], PsnrConfig::default()).is_err());
    }

    #[test]
    fn parse_peak() {
        assert_eq!(PsnrConfig::parse("max").unwrap(), PsnrConfig::DatasetMax);
        assert_eq!(PsnrConfig::parse("0.5").unwrap(), PsnrConfig::Fixed(0.5));
        assert!(PsnrConfig::parse("-1").is_err());
        assert!(PsnrConfig::parse("abc").is_err());
    }
}
