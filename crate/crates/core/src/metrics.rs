//! Calibration error, ROC analysis and histograms, with CSV emitters.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::{score_batch, ScoreKind};
use crate::error::{Error, Result};
use crate::nn::Model;

pub const DEFAULT_ECE_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    /// Zero for empty bins.
    pub accuracy: f64,
}

/// Expected calibration error together with its reliability-diagram bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub n_bins: usize,
    pub bins: Vec<EceBin>,
    pub ece: f64,
}

impl EceReport {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `sum_b (n_b / n) |acc_b - conf_b|` from the stored bins.
    pub fn recompute(&self) -> f64 {
        let n = self.total() as f64;
        self.bins
            .iter()
            .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }

    /// Columns: `bin,lower,upper,count,mean_confidence,accuracy`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin", "lower", "upper", "count", "mean_confidence", "accuracy"])?;
        for (i, b) in self.bins.iter().enumerate() {
            out.write_record([
                i.to_string(),
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                b.mean_confidence.to_string(),
                b.accuracy.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn bin_edge(k: usize, n_bins: usize) -> f64 {
    k as f64 / n_bins as f64
}

/// Bin `b` covers `(b/n, (b+1)/n]`; bin 0 also holds 0.
fn bin_index(c: f64, n_bins: usize) -> usize {
    let mut b = ((c * n_bins as f64).ceil() as usize).saturating_sub(1).min(n_bins - 1);
    while b > 0 && c <= bin_edge(b, n_bins) {
        b -= 1;
    }
    while b + 1 < n_bins && c > bin_edge(b + 1, n_bins) {
        b += 1;
    }
    b
}

/// Equal-width, right-inclusive binning of confidences over `[0, 1]`.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<EceReport> {
    if confidences.is_empty() {
        return Err(Error::EmptyInput("ece"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::InputShape {
            expected: vec![confidences.len()],
            got: vec![correct.len()],
        });
    }
    if n_bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Config(format!("confidence {c} outside [0, 1]")));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, n_bins);
        counts[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let bins: Vec<EceBin> = (0..n_bins)
        .map(|b| {
            let n = counts[b];
            let (mean_confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / n as f64, hits[b] as f64 / n as f64)
            };
            EceBin {
                lower: bin_edge(b, n_bins),
                upper: bin_edge(b + 1, n_bins),
                count: n,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    let mut report = EceReport { n_bins, bins, ece: 0.0 };
    report.ece = report.recompute();
    Ok(report)
}

/// Area under the ROC curve and the curve itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auroc: f64,
    /// `(threshold, fpr, tpr)` from `(+inf, 0, 0)` to `(min score, 1, 1)`.
    pub curve: Vec<(f64, f64, f64)>,
}

impl RocResult {
    /// Columns: `threshold,fpr,tpr`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["threshold", "fpr", "tpr"])?;
        for (t, f, p) in &self.curve {
            out.write_record([t.to_string(), f.to_string(), p.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Probability that an in-distribution score exceeds an out-of-distribution
/// one (ties count one half), via the Mann-Whitney statistic with midranks.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<RocResult> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::EmptyInput("auroc"));
    }
    if scores_in.iter().chain(scores_out).any(|s| s.is_nan()) {
        return Err(Error::Config("auroc scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, true))
        .chain(scores_out.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (n_in, n_out) = (scores_in.len() as f64, scores_out.len() as f64);
    let mut rank_sum_in = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum_in += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_in - n_in * (n_in + 1.0) / 2.0;
    let auroc = u / (n_in * n_out);

    let mut curve = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = all.len();
    while k > 0 {
        let t = all[k - 1].0;
        while k > 0 && all[k - 1].0 == t {
            if all[k - 1].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        curve.push((t, fp as f64 / n_out, tp as f64 / n_in));
    }
    Ok(RocResult { auroc, curve })
}

/// Density-normalized histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// `count / (total * width)`, so the histogram integrates to one.
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn integral(&self) -> f64 {
        self.density
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    /// Columns: `lower,upper,count,density`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["lower", "upper", "count", "density"])?;
        for ((e, c), d) in self.edges.windows(2).zip(&self.counts).zip(&self.density) {
            out.write_record([e[0].to_string(), e[1].to_string(), c.to_string(), d.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Equal-width histogram over `range` (default `[min, max]`). The last bin
/// is closed; values outside an explicit range are ignored. A degenerate
/// range `[v, v]` is widened to `[v - 0.5, v + 0.5]`.
pub fn histogram(values: &[f64], n_bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyInput("histogram"));
    }
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let (mut lo, mut hi) = match range {
        Some(r) => r,
        None => values
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v))),
    };
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Config(format!("invalid histogram range [{lo}, {hi}]")));
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        if !(v >= lo && v <= hi) {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("histogram (no values in range)"));
    }
    let density = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (total as f64 * (e[1] - e[0])))
        .collect();
    Ok(Histogram { edges, counts, density })
}

/// Scores every example of `dataset`, batch by batch, preserving order.
pub fn score_dataset(model: &Model, dataset: &Dataset, kind: ScoreKind, batch_size: usize) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(batch_size).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + batch_size).min(n)).collect();
            let x = dataset.inputs.select_rows(&idx)?;
            score_batch(model, &x, kind)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Writes in/out scores side by side for histogram overlays.
/// Columns: `split,score`.
pub fn write_scores_csv<W: Write>(w: W, scores_in: &[f64], scores_out: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["split", "score"])?;
    for s in scores_in {
        out.write_record(["in", &s.to_string()])?;
    }
    for s in scores_out {
        out.write_record(["out", &s.to_string()])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
