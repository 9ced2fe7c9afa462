//! Batch ranking loss with optional same-site sequestering.
//!
//! For a batch of embeddings `F` (B×e) with class labels and site ids:
//!
//! ```text
//! S  = N·Nᵀ                     N = rows of F scaled to unit length
//! A  = (1 - M) ∘ max(S, 0)      M marks self pairs and, when sequestering,
//!                               same-site pairs
//! W  = A / rowsum(A)            rows with rowsum 0 are degenerate
//! P  = W·L                      L = one-hot labels (B×C); degenerate rows
//!                               predict 1/C for every class
//! loss = mean((P - L)²)
//! ```
//!
//! Each row of `P` is a similarity-weighted vote over the labels of the
//! other batch members that are allowed to vote for it. The analytic
//! gradient of the loss with respect to `F` is returned alongside the loss.

use crate::numerics::{l2_norm, matmul, row_l2_normalize, Matrix, NumericsError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankLossError {
    #[error("batch too small: need at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("batch misaligned: {features} feature rows, {labels} labels, {sites} sites")]
    Misaligned {
        features: usize,
        labels: usize,
        sites: usize,
    },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("non-finite feature values")]
    NonFinite,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One training batch: embeddings plus aligned class labels and site ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: Matrix,
    labels: Vec<usize>,
    sites: Vec<usize>,
    n_classes: usize,
}

impl FeatureBatch {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        sites: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, RankLossError> {
        let b = features.rows();
        if labels.len() != b || sites.len() != b {
            return Err(RankLossError::Misaligned {
                features: b,
                labels: labels.len(),
                sites: sites.len(),
            });
        }
        if b < 2 {
            return Err(RankLossError::BatchTooSmall(b));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(RankLossError::LabelOutOfRange { label, n_classes });
        }
        if !features.is_finite() {
            return Err(RankLossError::NonFinite);
        }
        Ok(Self {
            features,
            labels,
            sites,
            n_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// B×B pair mask; a 1 marks a pair that may not vote.
#[derive(Debug, Clone, PartialEq)]
pub struct SequesterMask(Matrix);

impl SequesterMask {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    #[inline]
    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j) != 0.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Self pairs are always blocked; with `sequester` on, so is every pair
/// sharing a site.
pub fn build_mask<S: PartialEq>(sites: &[S], sequester: bool) -> SequesterMask {
    let b = sites.len();
    let mut m = Matrix::identity(b);
    if sequester {
        for i in 0..b {
            for j in 0..b {
                if sites[i] == sites[j] {
                    m.set(i, j, 1.0);
                }
            }
        }
    }
    SequesterMask(m)
}

/// Cosine similarity matrix of the rows of `features`.
pub fn similarity(features: &Matrix) -> Matrix {
    let n = row_l2_normalize(features);
    matmul(&n, &n.transpose()).expect("N·Nᵀ is always conformable")
}

/// Clamped, masked, row-normalized similarity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteWeights {
    pub weights: Matrix,
    /// Rows with no permitted positive similarity; their weights are all 0.
    pub degenerate: Vec<bool>,
}

pub fn masked_row_normalize(sim: &Matrix, mask: &SequesterMask) -> Result<VoteWeights, RankLossError> {
    let b = sim.rows();
    if sim.cols() != b || mask.len() != b {
        return Err(NumericsError::Shape {
            op: "masked_row_normalize",
            lhs: sim.shape(),
            rhs: mask.matrix().shape(),
        }
        .into());
    }
    let mut weights = Matrix::zeros(b, b);
    let mut degenerate = vec![false; b];
    for i in 0..b {
        let mut total = 0.0;
        for j in 0..b {
            if !mask.is_blocked(i, j) {
                let v = sim.get(i, j).max(0.0);
                weights.set(i, j, v);
                total += v;
            }
        }
        if total > 0.0 {
            for v in weights.row_mut(i) {
                *v /= total;
            }
        } else {
            weights.row_mut(i).fill(0.0);
            degenerate[i] = true;
        }
    }
    Ok(VoteWeights { weights, degenerate })
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Matrix {
    let mut l = Matrix::zeros(labels.len(), n_classes);
    for (i, &c) in labels.iter().enumerate() {
        l.set(i, c, 1.0);
    }
    l
}

/// Weighted vote `P = W·L`; degenerate rows fall back to the uniform 1/C.
pub fn predict(votes: &VoteWeights, labels: &[usize], n_classes: usize) -> Result<Matrix, RankLossError> {
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(RankLossError::LabelOutOfRange { label, n_classes });
    }
    let mut p = matmul(&votes.weights, &one_hot(labels, n_classes))?;
    let uniform = 1.0 / n_classes as f64;
    for (i, &deg) in votes.degenerate.iter().enumerate() {
        if deg {
            p.row_mut(i).fill(uniform);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// d loss / d features, same shape as the batch features.
    pub grad_features: Matrix,
    pub prediction: Matrix,
    pub degenerate: Vec<bool>,
}

/// Ranking loss and its exact gradient with respect to the batch features.
///
/// The clamp `max(s, 0)` takes subgradient 0 at `s = 0`. Degenerate rows
/// contribute to the loss through their uniform prediction but pass no
/// gradient.
pub fn ranking_loss(batch: &FeatureBatch, sequester: bool) -> Result<LossOutput, RankLossError> {
    let b = batch.len();
    if b < 2 {
        return Err(RankLossError::BatchTooSmall(b));
    }
    let c = batch.n_classes;
    let features = &batch.features;
    let unit = row_l2_normalize(features);
    let sim = matmul(&unit, &unit.transpose())?;
    let mask = build_mask(&batch.sites, sequester);
    let votes = masked_row_normalize(&sim, &mask)?;
    let prediction = predict(&votes, &batch.labels, c)?;
    let targets = one_hot(&batch.labels, c);

    let scale = 1.0 / (b * c) as f64;
    let mut loss = 0.0;
    for (p, t) in prediction.data().iter().zip(targets.data()) {
        loss += (p - t) * (p - t);
    }
    loss *= scale;

    // dL/dP, zeroed on degenerate rows (their prediction is constant).
    let mut d_pred = Matrix::zeros(b, c);
    for i in 0..b {
        if votes.degenerate[i] {
            continue;
        }
        for k in 0..c {
            d_pred.set(i, k, 2.0 * scale * (prediction.get(i, k) - targets.get(i, k)));
        }
    }

    // P = W·L  =>  dW = dP·Lᵀ, i.e. dW[i][j] = dP[i][label j].
    // W = A / r  =>  dA[i][j] = (dW[i][j] - Σ_k dW[i][k]·W[i][k]) / r_i.
    // A = max(S, 0) on permitted pairs.
    let mut d_sim = Matrix::zeros(b, b);
    for i in 0..b {
        if votes.degenerate[i] {
            continue;
        }
        let mut row_sum = 0.0;
        for j in 0..b {
            if !mask.is_blocked(i, j) {
                row_sum += sim.get(i, j).max(0.0);
            }
        }
        let mut centred = 0.0;
        for j in 0..b {
            centred += d_pred.get(i, batch.labels[j]) * votes.weights.get(i, j);
        }
        for j in 0..b {
            if mask.is_blocked(i, j) || sim.get(i, j) <= 0.0 {
                continue;
            }
            let dw = d_pred.get(i, batch.labels[j]);
            d_sim.set(i, j, (dw - centred) / row_sum);
        }
    }

    // S = N·Nᵀ  =>  dN = (dS + dSᵀ)·N.
    let mut d_sym = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            d_sym.set(i, j, d_sim.get(i, j) + d_sim.get(j, i));
        }
    }
    let d_unit = matmul(&d_sym, &unit)?;

    // N = F / |F| row-wise  =>  dF = (dN - n·(n·dN)) / |F|.
    let mut grad_features = Matrix::zeros(b, features.cols());
    for i in 0..b {
        let norm = l2_norm(features.row(i));
        if norm == 0.0 {
            continue;
        }
        let n = unit.row(i);
        let dn = d_unit.row(i);
        let radial: f64 = n.iter().zip(dn).map(|(x, y)| x * y).sum();
        for (g, (x, y)) in grad_features.row_mut(i).iter_mut().zip(n.iter().zip(dn)) {
            *g = (y - x * radial) / norm;
        }
    }

    Ok(LossOutput {
        loss,
        grad_features,
        prediction,
        degenerate: votes.degenerate,
    })
}
