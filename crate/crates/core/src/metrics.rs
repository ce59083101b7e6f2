//! Segmentation scores: IoU, Dice and the KL divergence between coverage histograms.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{Band, MAJORITY_MIN};

/// Floor applied to predicted histogram bins before taking logarithms.
pub const COVERAGE_EPS: f64 = 1e-6;
pub const DEFAULT_COVERAGE_BINS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub target: usize,
}

impl Overlap {
    /// Counts over pixels whose target is not in the ignore band.
    pub fn count(pred: &[f64], target: &[f64], threshold: f64) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::shape("overlap", &[target.len()], &[pred.len()]));
        }
        let mut o = Overlap::default();
        for (&p, &t) in pred.iter().zip(target) {
            if Band::of(t) == Band::Ignore {
                continue;
            }
            let p = p >= threshold;
            let t = t >= MAJORITY_MIN;
            o.predicted += p as usize;
            o.target += t as usize;
            o.intersection += (p && t) as usize;
        }
        Ok(o)
    }

    pub fn union(&self) -> usize {
        self.predicted + self.target - self.intersection
    }

    /// `|P∩T| / |P∪T|`, defined as 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }

    /// `2|P∩T| / (|P| + |T|)`, defined as 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        match self.predicted + self.target {
            0 => 1.0,
            s => 2.0 * self.intersection as f64 / s as f64,
        }
    }
}

impl std::ops::Add for Overlap {
    type Output = Overlap;
    fn add(self, o: Overlap) -> Overlap {
        Overlap {
            intersection: self.intersection + o.intersection,
            predicted: self.predicted + o.predicted,
            target: self.target + o.target,
        }
    }
}

pub fn iou(pred: &[f64], target: &[f64], threshold: f64) -> Result<f64> {
    Ok(Overlap::count(pred, target, threshold)?.iou())
}

pub fn dice(pred: &[f64], target: &[f64], threshold: f64) -> Result<f64> {
    Ok(Overlap::count(pred, target, threshold)?.dice())
}

/// Fraction of pixels at or above `threshold`.
pub fn coverage(mask: &[f64], threshold: f64) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&v| v >= threshold).count() as f64 / mask.len() as f64
}

/// Normalised histogram of values in `[0, 1]` over equal-width bins; 1 falls in the last bin.
pub fn coverage_histogram(coverages: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &c in coverages {
        let i = ((c.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[i] += 1.0;
    }
    let n = coverages.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// `KL(target ‖ predicted)` between per-image coverage histograms.
pub fn coverage_kl(predicted: &[f64], target: &[f64], bins: usize) -> Result<f64> {
    if predicted.is_empty() || target.is_empty() {
        return Err(Error::invalid("coverage_kl needs at least one image"));
    }
    if bins == 0 {
        return Err(Error::invalid("coverage_kl needs at least one bin"));
    }
    let p = coverage_histogram(target, bins);
    let q = coverage_histogram(predicted, bins);
    Ok(p.iter()
        .zip(&q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q.max(COVERAGE_EPS)).ln())
        .sum())
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
