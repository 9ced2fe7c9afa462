#![allow(dead_code)]

use seqrank::encoder::{batch_loss_and_grads, EncoderParams};
use seqrank::numerics::{Matrix, Rng};
use seqrank::rankloss::{ranking_loss, FeatureBatch};

/// Loss re-derived element by element from the definition, using only
/// slices and scalar loops.
pub fn brute_force_loss(rows: &[Vec<f64>], labels: &[usize], sites: &[usize], n_classes: usize, sequester: bool) -> f64 {
    let b = rows.len();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let cosine = |i: usize, j: usize| -> f64 {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for k in 0..rows[i].len() {
            s += (rows[i][k] / norms[i]) * (rows[j][k] / norms[j]);
        }
        s
    };
    let mut total = 0.0;
    for i in 0..b {
        let mut votes = vec![0.0; n_classes];
        let mut weight = 0.0;
        for j in 0..b {
            let blocked = i == j || (sequester && sites[i] == sites[j]);
            if blocked {
                continue;
            }
            let w = cosine(i, j).max(0.0);
            votes[labels[j]] += w;
            weight += w;
        }
        for c in 0..n_classes {
            let p = if weight > 0.0 { votes[c] / weight } else { 1.0 / n_classes as f64 };
            let t = if labels[i] == c { 1.0 } else { 0.0 };
            total += (p - t) * (p - t);
        }
    }
    total / (b * n_classes) as f64
}

pub struct RandomBatch {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sites: Vec<usize>,
    pub n_classes: usize,
    pub sequester: bool,
}

impl RandomBatch {
    pub fn draw(rng: &mut Rng, b: usize, e: usize, n_classes: usize, n_sites: usize) -> Self {
        Self {
            rows: (0..b).map(|_| (0..e).map(|_| rng.normal()).collect()).collect(),
            labels: (0..b).map(|_| rng.below(n_classes)).collect(),
            sites: (0..b).map(|_| rng.below(n_sites)).collect(),
            n_classes,
            sequester: rng.below(2) == 1,
        }
    }

    pub fn feature_batch(&self) -> FeatureBatch {
        FeatureBatch::new(
            Matrix::from_rows(&self.rows).unwrap(),
            self.labels.clone(),
            self.sites.clone(),
            self.n_classes,
        )
        .unwrap()
    }

    pub fn loss(&self) -> f64 {
        ranking_loss(&self.feature_batch(), self.sequester).unwrap().loss
    }
}

/// True when some off-diagonal cosine similarity sits within `margin` of
/// the clamp at zero.
pub fn near_clamp(rows: &[Vec<f64>], margin: f64) -> bool {
    let norm = |r: &Vec<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            if (dot / (norm(&rows[i]) * norm(&rows[j]))).abs() < margin {
                return true;
            }
        }
    }
    false
}

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_RTOL: f64 = 1e-5;
/// Scale below which a gradient component is compared absolutely: central
/// differences at step 1e-6 carry ~1e-10 of rounding noise on an O(0.1)
/// loss, which swamps the relative error of components that are
/// themselves near zero.
pub const GRAD_SCALE_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR)
}

/// Worst relative error of the feature gradient against central differences.
pub fn feature_grad_error(batch: &RandomBatch) -> f64 {
    let analytic = ranking_loss(&batch.feature_batch(), batch.sequester).unwrap().grad_features;
    let mut worst: f64 = 0.0;
    for i in 0..batch.rows.len() {
        for k in 0..batch.rows[i].len() {
            let eval = |delta: f64| {
                let mut rows = batch.rows.clone();
                rows[i][k] += delta;
                RandomBatch {
                    rows,
                    labels: batch.labels.clone(),
                    sites: batch.sites.clone(),
                    n_classes: batch.n_classes,
                    sequester: batch.sequester,
                }
                .loss()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.get(i, k), numeric));
        }
    }
    worst
}

/// Worst relative error of every encoder parameter gradient through the
/// full forward → loss pipeline.
pub fn encoder_grad_error(
    params: &EncoderParams,
    x: &Matrix,
    labels: &[usize],
    sites: &[usize],
    n_classes: usize,
    sequester: bool,
) -> f64 {
    let (_, grads) = batch_loss_and_grads(params, x, labels, sites, n_classes, sequester).unwrap();
    let analytic = grads.flatten();
    let base = params.flatten();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            let p = params.with_flat(&v).unwrap();
            batch_loss_and_grads(&p, x, labels, sites, n_classes, sequester).unwrap().0
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[k], numeric));
    }
    worst
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn report(criterion: u32, pass: bool, detail: &str) {
    println!("[{}] criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
}
