//! Calibration error of predicted class distributions: ECE, SCE, TACE and
//! the Brier score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_TACE_BINS: usize = 15;
pub const DEFAULT_TACE_THRESHOLD: f64 = 0.01;

const SUM_TOLERANCE: f64 = 1e-6;

/// Probability rows over `k` classes with one true label each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    k: usize,
}

impl PredictionSet {
    pub fn new(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("prediction set is empty"));
        }
        if probs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} probability rows but {} labels",
                probs.len(),
                labels.len()
            )));
        }
        let k = probs[0].len();
        if k == 0 {
            return Err(Error::invalid("probability rows are empty"));
        }
        for (i, (row, &label)) in probs.iter().zip(&labels).enumerate() {
            if row.len() != k {
                return Err(Error::invalid(format!("row {i} has {} classes, expected {k}", row.len())));
            }
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
            if label >= k {
                return Err(Error::invalid(format!("row {i} label {label} outside 0..{k}")));
            }
        }
        Ok(Self { probs, labels, k })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Concatenates two sets over the same classes.
    pub fn extend(&mut self, other: PredictionSet) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid(format!("class count {} vs {}", other.k, self.k)));
        }
        self.probs.extend(other.probs);
        self.labels.extend(other.labels);
        Ok(())
    }
}

fn bin_index(p: f64, n_bins: usize) -> usize {
    ((p * n_bins as f64) as usize).min(n_bins - 1)
}

fn check_bins(n_bins: usize) -> Result<()> {
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be at least 1"));
    }
    Ok(())
}

#[derive(Clone, Copy, Default)]
struct Bin {
    count: usize,
    conf: f64,
    hits: f64,
}

impl Bin {
    fn push(&mut self, conf: f64, hit: bool) {
        self.count += 1;
        self.conf += conf;
        if hit {
            self.hits += 1.0;
        }
    }

    /// `|bin| · |acc − conf|`, i.e. the gap weighted by raw bin size.
    fn weighted_gap(&self) -> f64 {
        (self.hits - self.conf).abs()
    }
}

/// Expected calibration error over max-probability confidence.
pub fn ece(preds: &PredictionSet, n_bins: usize) -> Result<f64> {
    check_bins(n_bins)?;
    let mut bins = vec![Bin::default(); n_bins];
    for (row, &label) in preds.probs.iter().zip(&preds.labels) {
        // First maximal entry is the prediction.
        let (arg, &conf) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |best, (i, p)| if *p > *best.1 { (i, p) } else { best });
        bins[bin_index(conf, n_bins)].push(conf, arg == label);
    }
    Ok(bins.iter().map(Bin::weighted_gap).sum::<f64>() / preds.len() as f64)
}

/// Static (classwise) calibration error.
pub fn sce(preds: &PredictionSet, n_bins: usize) -> Result<f64> {
    check_bins(n_bins)?;
    let n = preds.len() as f64;
    let mut total = 0.0;
    for class in 0..preds.k {
        let mut bins = vec![Bin::default(); n_bins];
        for (row, &label) in preds.probs.iter().zip(&preds.labels) {
            let p = row[class];
            bins[bin_index(p, n_bins)].push(p, label == class);
        }
        total += bins.iter().map(Bin::weighted_gap).sum::<f64>() / n;
    }
    Ok(total / preds.k as f64)
}

/// Thresholded adaptive calibration error. Per class, only probabilities
/// `>= threshold` enter; they are sorted and split into `n_bins` bins of
/// (near) equal count. Each bin's gap is weighted by its share of that
/// class's retained predictions. A class with nothing retained adds 0.
pub fn tace(preds: &PredictionSet, n_bins: usize, threshold: f64) -> Result<f64> {
    check_bins(n_bins)?;
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0,1)")));
    }
    let mut total = 0.0;
    for class in 0..preds.k {
        let mut kept: Vec<(f64, usize, bool)> = preds
            .probs
            .iter()
            .zip(&preds.labels)
            .enumerate()
            .filter(|(_, (row, _))| row[class] >= threshold)
            .map(|(i, (row, &label))| (row[class], i, label == class))
            .collect();
        if kept.is_empty() {
            continue;
        }
        kept.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let m = kept.len();
        let mut class_err = 0.0;
        for r in 0..n_bins {
            let lo = r * m / n_bins;
            let hi = (r + 1) * m / n_bins;
            let mut bin = Bin::default();
            for &(p, _, hit) in &kept[lo..hi] {
                bin.push(p, hit);
            }
            class_err += bin.weighted_gap();
        }
        total += class_err / m as f64;
    }
    Ok(total / preds.k as f64)
}

/// Mean squared distance to the one-hot label, in [0, 2].
pub fn brier(preds: &PredictionSet) -> f64 {
    preds
        .probs
        .iter()
        .zip(&preds.labels)
        .map(|(row, &label)| {
            row.iter()
                .enumerate()
                .map(|(k, &p)| {
                    let t = if k == label { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / preds.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub sce: f64,
    pub tace: f64,
    pub brier: f64,
}

/// All four metrics with the default binning.
pub fn calibration_report(preds: &PredictionSet) -> Result<CalibrationReport> {
    Ok(CalibrationReport {
        ece: ece(preds, DEFAULT_BINS)?,
        sce: sce(preds, DEFAULT_BINS)?,
        tace: tace(preds, DEFAULT_TACE_BINS, DEFAULT_TACE_THRESHOLD)?,
        brier: brier(preds),
    })
}
