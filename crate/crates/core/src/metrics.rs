//! Classification metrics and the site-identity probe.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("probe needs at least 2 sites in the training split, found {0}")]
    DegenerateProbe(usize),
    #[error("probe input: {0}")]
    Input(String),
}

/// Per-class precision, recall and F1 (Dice) from a square confusion matrix
/// indexed `[truth][prediction]`. Any 0/0 is reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_scores(confusion: &[Vec<u64>]) -> ClassScores {
    let n = confusion.len();
    let mut scores = ClassScores {
        precision: Vec::with_capacity(n),
        recall: Vec::with_capacity(n),
        f1: Vec::with_capacity(n),
    };
    for c in 0..n {
        let tp = confusion[c][c];
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        scores.precision.push(p);
        scores.recall.push(r);
        scores.f1.push(f);
    }
    scores
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    pub n_scored: u64,
    pub n_errors: u64,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>, n_errors: u64) -> Self {
        let scores = f1_scores(&confusion);
        let n_scored: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..confusion.len()).map(|c| confusion[c][c]).sum();
        let macro_f1 = if scores.f1.is_empty() {
            0.0
        } else {
            scores.f1.iter().sum::<f64>() / scores.f1.len() as f64
        };
        Self {
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
            macro_f1,
            accuracy: ratio(correct, n_scored),
            confusion,
            n_scored,
            n_errors,
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize, n_errors: u64) -> Self {
        Self::from_confusion(confusion_matrix(truth, predicted, n_classes), n_errors)
    }

    pub fn correct(&self) -> u64 {
        (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum()
    }

    /// Header row `truth\pred,0,1,…` then one row per true class.
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("truth\\pred");
        for c in 0..n {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Logistic regression on the embeddings.
    Linear,
    /// Logistic regression on random Fourier features (RBF kernel surrogate).
    Rff,
}

impl std::str::FromStr for ProbeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "rff" => Ok(Self::Rff),
            other => Err(format!("unknown probe kind {other:?} (expected linear or rff)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe_kind: ProbeKind,
    pub site_accuracy: f64,
    pub chance_level: f64,
    pub n_sites: usize,
    pub n_train: usize,
    pub n_test: usize,
}

/// Fixed settings of the probe's optimizer and feature map.
pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LEARNING_RATE: f64 = 0.1;
pub const RFF_FEATURES: usize = 256;
pub const BANDWIDTH_PAIRS: usize = 1000;

// Random streams of the probe seed.
const BANDWIDTH_STREAM: u64 = 1;
const RFF_STREAM: u64 = 2;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over at most [`BANDWIDTH_PAIRS`] pairs, sampled
/// when there are more pairs than that.
pub fn median_bandwidth(points: &[Vec<f64>], rng: &mut Rng) -> f64 {
    let n = points.len();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let mut dists = Vec::with_capacity(total_pairs.min(BANDWIDTH_PAIRS));
    if total_pairs <= BANDWIDTH_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                dists.push(sq_dist(&points[i], &points[j]).sqrt());
            }
        }
    } else {
        while dists.len() < BANDWIDTH_PAIRS {
            let i = rng.below(n);
            let j = rng.below(n);
            if i != j {
                dists.push(sq_dist(&points[i], &points[j]).sqrt());
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// `z(x) = sqrt(2/D)·cos(W·x + b)` with `W ~ N(0, 1/σ²)`, `b ~ U[0, 2π)`.
#[derive(Debug, Clone)]
pub struct FourierFeatures {
    weights: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl FourierFeatures {
    pub fn new(input_dim: usize, n_features: usize, bandwidth: f64, rng: &mut Rng) -> Self {
        let weights = (0..n_features)
            .map(|_| (0..input_dim).map(|_| rng.normal() / bandwidth).collect())
            .collect();
        let offsets = (0..n_features)
            .map(|_| rng.uniform_range(0.0, 2.0 * std::f64::consts::PI))
            .collect();
        Self { weights, offsets }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let scale = (2.0 / self.weights.len() as f64).sqrt();
        self.weights
            .iter()
            .zip(&self.offsets)
            .map(|(w, b)| scale * (w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b).cos())
            .collect()
    }
}

/// Column z-scoring fitted on the training rows; constant columns map to 0.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

/// One-vs-rest logistic regression trained by full-batch gradient descent.
struct OneVsRest {
    /// One row per class: weights followed by the bias.
    coef: Vec<Vec<f64>>,
}

impl OneVsRest {
    fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut coef = vec![vec![0.0; d + 1]; n_classes];
        for (class, w) in coef.iter_mut().enumerate() {
            for _ in 0..PROBE_ITERATIONS {
                let mut grad = vec![0.0; d + 1];
                for (row, &label) in x.iter().zip(y) {
                    let z = row.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
                    let target = if label == class { 1.0 } else { 0.0 };
                    let err = 1.0 / (1.0 + (-z).exp()) - target;
                    for (g, v) in grad[..d].iter_mut().zip(row) {
                        *g += err * v;
                    }
                    grad[d] += err;
                }
                for (wi, g) in w.iter_mut().zip(&grad) {
                    *wi -= PROBE_LEARNING_RATE * g / n;
                }
            }
        }
        Self { coef }
    }

    /// Highest logit; ties go to the lower class index.
    fn predict(&self, row: &[f64]) -> usize {
        let d = row.len();
        let mut best = (0, f64::NEG_INFINITY);
        for (class, w) in self.coef.iter().enumerate() {
            let z = row.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
            if z > best.1 {
                best = (class, z);
            }
        }
        best.0
    }
}

/// Trains a site classifier on `train` and reports its accuracy on `test`.
///
/// Inputs (raw embeddings for `Linear`, random Fourier features for `Rff`)
/// are z-scored with training statistics before fitting. Sites that appear
/// only in `test` can never be predicted and count as errors.
pub fn site_probe(
    train: &[(Vec<f64>, String)],
    test: &[(Vec<f64>, String)],
    kind: ProbeKind,
    seed: u64,
) -> Result<ProbeReport, MetricsError> {
    let sites: Vec<&str> = train
        .iter()
        .map(|(_, s)| s.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if sites.len() < 2 {
        return Err(MetricsError::DegenerateProbe(sites.len()));
    }
    if test.is_empty() {
        return Err(MetricsError::Input("empty test split".into()));
    }
    let dim = train[0].0.len();
    if train.iter().chain(test).any(|(v, _)| v.len() != dim) {
        return Err(MetricsError::Input("inconsistent embedding dims".into()));
    }

    let features: Box<dyn Fn(&[f64]) -> Vec<f64>> = match kind {
        ProbeKind::Linear => Box::new(|x: &[f64]| x.to_vec()),
        ProbeKind::Rff => {
            let points: Vec<Vec<f64>> = train.iter().map(|(v, _)| v.clone()).collect();
            let bandwidth = median_bandwidth(&points, &mut Rng::stream(seed, BANDWIDTH_STREAM));
            let map = FourierFeatures::new(dim, RFF_FEATURES, bandwidth, &mut Rng::stream(seed, RFF_STREAM));
            Box::new(move |x: &[f64]| map.transform(x))
        }
    };

    let raw_train: Vec<Vec<f64>> = train.iter().map(|(v, _)| features(v)).collect();
    let scaler = Standardizer::fit(&raw_train);
    let x_train: Vec<Vec<f64>> = raw_train.iter().map(|r| scaler.apply(r)).collect();
    let y_train: Vec<usize> = train
        .iter()
        .map(|(_, s)| sites.binary_search(&s.as_str()).expect("site collected from train"))
        .collect();
    let model = OneVsRest::fit(&x_train, &y_train, sites.len());

    let mut correct = 0usize;
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    for (v, site) in test {
        *counts.entry(site.as_str()).or_default() += 1;
        let pred = model.predict(&scaler.apply(&features(v)));
        if sites[pred] == site {
            correct += 1;
        }
    }
    let chance_level = *counts.values().max().expect("test non-empty") as f64 / test.len() as f64;
    Ok(ProbeReport {
        probe_kind: kind,
        site_accuracy: correct as f64 / test.len() as f64,
        chance_level,
        n_sites: sites.len(),
        n_train: train.len(),
        n_test: test.len(),
    })
}
