//! WSI-level embeddings, exact filtered k-NN search, and the leave-one-out
//! and leave-one-site-out evaluation protocols.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{split, Cohort, CohortError};
use crate::encoder::{forward, train, EncoderError, EncoderParams, EncoderSpec, TrainConfig, TrainLog};
use crate::metrics::EvalReport;
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no candidates left after filtering")]
    NoCandidates,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate wsi_id {0:?} in index")]
    DuplicateWsi(String),
    #[error("embedding dim {got} does not match index dim {expected}")]
    Dim { expected: usize, got: usize },
    #[error("index needs at least {needed} entries, has {got}")]
    TooSmall { needed: usize, got: usize },
    #[error("unknown wsi_id {0:?}")]
    UnknownWsi(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsiEmbedding {
    pub wsi_id: String,
    pub site_id: String,
    pub class_id: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                let denom = (aa * bb).sqrt();
                if denom == 0.0 {
                    1.0
                } else {
                    1.0 - ab / denom
                }
            }
        }
    }
}

/// Patch embedding = mean of its view embeddings, in patch order.
pub fn embed_patches(cohort: &Cohort, params: &EncoderParams) -> Result<Vec<Vec<f64>>, RetrievalError> {
    if cohort.dim() != params.spec().input_dim {
        return Err(EncoderError::InputDim {
            expected: params.spec().input_dim,
            got: cohort.dim(),
        }
        .into());
    }
    let e = params.spec().embed_dim;
    cohort
        .records()
        .iter()
        .map(|r| {
            let x = Matrix::from_rows(&r.views).map_err(EncoderError::from)?;
            let out = forward(params, &x)?;
            let mut mean = vec![0.0; e];
            for row in 0..out.rows() {
                for (m, v) in mean.iter_mut().zip(out.row(row)) {
                    *m += v;
                }
            }
            let n = out.rows() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(mean)
        })
        .collect()
}

/// One entry per WSI (first-appearance order): the mean over its patches of
/// each patch's mean view embedding.
pub fn embed_wsis(cohort: &Cohort, params: &EncoderParams) -> Result<Vec<WsiEmbedding>, RetrievalError> {
    let patches = embed_patches(cohort, params)?;
    Ok(group_by_wsi(cohort, &patches))
}

/// Averages per-patch vectors into per-WSI vectors.
pub fn group_by_wsi(cohort: &Cohort, patch_vectors: &[Vec<f64>]) -> Vec<WsiEmbedding> {
    let mut out: Vec<WsiEmbedding> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut slot = std::collections::HashMap::new();
    for (r, v) in cohort.records().iter().zip(patch_vectors) {
        let idx = *slot.entry(r.wsi_id.clone()).or_insert_with(|| {
            out.push(WsiEmbedding {
                wsi_id: r.wsi_id.clone(),
                site_id: r.site_id.clone(),
                class_id: r.class_id,
                vector: vec![0.0; v.len()],
            });
            counts.push(0);
            out.len() - 1
        });
        for (a, b) in out[idx].vector.iter_mut().zip(v) {
            *a += b;
        }
        counts[idx] += 1;
    }
    for (entry, n) in out.iter_mut().zip(counts) {
        entry.vector.iter_mut().for_each(|v| *v /= n as f64);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchFilter {
    pub exclude_wsi: Option<String>,
    pub exclude_site: Option<String>,
}

impl SearchFilter {
    pub fn none() -> Self {
        Self::default()
    }

    fn admits(&self, e: &WsiEmbedding) -> bool {
        self.exclude_wsi.as_deref() != Some(e.wsi_id.as_str())
            && self.exclude_site.as_deref() != Some(e.site_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub wsi_id: String,
    pub site_id: String,
    pub class_id: usize,
    pub distance: f64,
}

/// Immutable brute-force index over WSI embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<WsiEmbedding>,
    metric: Metric,
    dim: usize,
}

impl EmbeddingIndex {
    pub fn new(entries: Vec<WsiEmbedding>, metric: Metric) -> Result<Self, RetrievalError> {
        let dim = entries.first().map_or(0, |e| e.vector.len());
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.wsi_id.as_str()) {
                return Err(RetrievalError::DuplicateWsi(e.wsi_id.clone()));
            }
            if e.vector.len() != dim {
                return Err(RetrievalError::Dim {
                    expected: dim,
                    got: e.vector.len(),
                });
            }
        }
        Ok(Self { entries, metric, dim })
    }

    pub fn entries(&self) -> &[WsiEmbedding] {
        &self.entries
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, wsi_id: &str) -> Option<&WsiEmbedding> {
        self.entries.iter().find(|e| e.wsi_id == wsi_id)
    }

    /// JSON-lines, one [`WsiEmbedding`] per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), RetrievalError> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, metric: Metric) -> Result<Self, RetrievalError> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(entries, metric)
    }
}

/// The `k` nearest admitted entries, ascending by distance; equal distances
/// are ordered by `wsi_id`.
pub fn knn(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
    filter: &SearchFilter,
) -> Result<Vec<Neighbor>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.len() != index.dim {
        return Err(RetrievalError::Dim {
            expected: index.dim,
            got: query.len(),
        });
    }
    let mut hits: Vec<(f64, &WsiEmbedding)> = index
        .entries
        .iter()
        .filter(|e| filter.admits(e))
        .map(|e| (index.metric.distance(query, &e.vector), e))
        .collect();
    if hits.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.wsi_id.cmp(&b.1.wsi_id)));
    Ok(hits
        .into_iter()
        .take(k)
        .map(|(distance, e)| Neighbor {
            wsi_id: e.wsi_id.clone(),
            site_id: e.site_id.clone(),
            class_id: e.class_id,
            distance,
        })
        .collect())
}

/// Majority class among ranked neighbors; a tie goes to whichever tied class
/// appears first in rank order.
pub fn vote(neighbors: &[Neighbor]) -> usize {
    let n_classes = neighbors.iter().map(|n| n.class_id + 1).max().unwrap_or(1);
    let mut counts = vec![0usize; n_classes];
    for n in neighbors {
        counts[n.class_id] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    neighbors
        .iter()
        .map(|n| n.class_id)
        .find(|&c| counts[c] == best)
        .unwrap_or(0)
}

pub fn predict_wsi_label(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
    filter: &SearchFilter,
) -> Result<usize, RetrievalError> {
    Ok(vote(&knn(index, query, k, filter)?))
}

/// Queries every entry against the rest of the index. The query's own WSI
/// is always excluded; with `sequester_queries` its whole site is too.
/// Queries left without candidates are counted in `n_errors`.
pub fn leave_one_out_eval(
    index: &EmbeddingIndex,
    k: usize,
    sequester_queries: bool,
    n_classes: usize,
) -> Result<EvalReport, RetrievalError> {
    if index.len() < 2 {
        return Err(RetrievalError::TooSmall {
            needed: 2,
            got: index.len(),
        });
    }
    let mut truth = Vec::with_capacity(index.len());
    let mut predicted = Vec::with_capacity(index.len());
    let mut errors = 0u64;
    for q in &index.entries {
        let filter = SearchFilter {
            exclude_wsi: Some(q.wsi_id.clone()),
            exclude_site: sequester_queries.then(|| q.site_id.clone()),
        };
        match predict_wsi_label(index, &q.vector, k, &filter) {
            Ok(label) => {
                truth.push(q.class_id);
                predicted.push(label);
            }
            Err(RetrievalError::NoCandidates) => errors += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport::from_predictions(&truth, &predicted, n_classes, errors))
}

/// Scores external queries against an index.
pub fn evaluate_queries(
    index: &EmbeddingIndex,
    queries: &[WsiEmbedding],
    k: usize,
    n_classes: usize,
) -> Result<EvalReport, RetrievalError> {
    let mut truth = Vec::with_capacity(queries.len());
    let mut predicted = Vec::with_capacity(queries.len());
    let mut errors = 0u64;
    for q in queries {
        let filter = SearchFilter {
            exclude_wsi: Some(q.wsi_id.clone()),
            exclude_site: None,
        };
        match predict_wsi_label(index, &q.vector, k, &filter) {
            Ok(label) => {
                truth.push(q.class_id);
                predicted.push(label);
            }
            Err(RetrievalError::NoCandidates) => errors += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport::from_predictions(&truth, &predicted, n_classes, errors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LohoConfig {
    pub k: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub metric: Metric,
}

impl Default for LohoConfig {
    fn default() -> Self {
        Self {
            k: 3,
            test_fraction: 0.2,
            split_seed: 0,
            metric: Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LohoOutcome {
    pub report: EvalReport,
    pub train_log: TrainLog,
}

/// Holds one site out entirely, trains on the rest, indexes the train and
/// test WSIs, and classifies every held-out WSI by k-NN vote.
pub fn run_loho_experiment(
    cohort: &Cohort,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
    holdout_site: &str,
    loho: &LohoConfig,
) -> Result<LohoOutcome, RetrievalError> {
    if cohort.sites().len() < 2 {
        return Err(RetrievalError::Cohort(CohortError::Invalid(
            "leave-one-site-out needs at least 2 sites".into(),
        )));
    }
    let parts = split(cohort, Some(holdout_site), loho.test_fraction, loho.split_seed)?;
    let train_log = train(&parts.train, spec, cfg)?;
    let mut searchable = embed_wsis(&parts.train, &train_log.params)?;
    searchable.extend(embed_wsis(&parts.test, &train_log.params)?);
    let index = EmbeddingIndex::new(searchable, loho.metric)?;
    let queries = embed_wsis(&parts.external, &train_log.params)?;
    let report = evaluate_queries(&index, &queries, loho.k, cohort.n_classes())?;
    Ok(LohoOutcome { report, train_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn entry(id: &str, site: &str, class: usize, v: &[f64]) -> WsiEmbedding {
        WsiEmbedding {
            wsi_id: id.into(),
            site_id: site.into(),
            class_id: class,
            vector: v.to_vec(),
        }
    }

    fn neighbors(classes: &[usize]) -> Vec<Neighbor> {
        classes
            .iter()
            .enumerate()
            .map(|(i, &c)| Neighbor {
                wsi_id: format!("W{i}"),
                site_id: "A".into(),
                class_id: c,
                distance: i as f64,
            })
            .collect()
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote(&neighbors(&[1, 1, 0])), 1);
        assert_eq!(vote(&neighbors(&[0, 1, 1])), 1);
        assert_eq!(vote(&neighbors(&[0, 1])), 0);
        assert_eq!(vote(&neighbors(&[1, 0])), 1);
    }

    #[test]
    fn exact_match_ranks_first() {
        let idx = EmbeddingIndex::new(
            vec![entry("a", "S", 0, &[0.0, 1.0]), entry("b", "S", 1, &[1.0, 0.0])],
            Metric::Euclidean,
        )
        .unwrap();
        let hits = knn(&idx, &[1.0, 0.0], 2, &SearchFilter::none()).unwrap();
        assert_eq!(hits[0].wsi_id, "b");
        assert_eq!(hits[0].distance, 0.0);
    }

    #[test]
    fn filters_and_errors() {
        let idx = EmbeddingIndex::new(
            vec![
                entry("a", "S", 0, &[0.0, 1.0]),
                entry("b", "T", 1, &[1.0, 0.0]),
                entry("c", "S", 1, &[1.0, 0.1]),
            ],
            Metric::Euclidean,
        )
        .unwrap();
        let f = SearchFilter {
            exclude_wsi: None,
            exclude_site: Some("S".into()),
        };
        let hits = knn(&idx, &[1.0, 0.1], 3, &f).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].wsi_id, "b");
        let all = SearchFilter {
            exclude_wsi: Some("b".into()),
            exclude_site: Some("S".into()),
        };
        assert!(matches!(knn(&idx, &[0.0, 0.0], 3, &all), Err(RetrievalError::NoCandidates)));
        assert!(matches!(knn(&idx, &[0.0, 0.0], 0, &f), Err(RetrievalError::ZeroK)));
        assert!(matches!(knn(&idx, &[0.0], 1, &f), Err(RetrievalError::Dim { .. })));
    }

    #[test]
    fn ties_break_by_id() {
        let idx = EmbeddingIndex::new(
            vec![entry("z", "S", 0, &[1.0]), entry("m", "S", 1, &[-1.0])],
            Metric::Euclidean,
        )
        .unwrap();
        let hits = knn(&idx, &[0.0], 2, &SearchFilter::none()).unwrap();
        assert_eq!(hits[0].wsi_id, "m");
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(
            EmbeddingIndex::new(vec![entry("a", "S", 0, &[0.0]), entry("a", "T", 0, &[1.0])], Metric::Cosine),
            Err(RetrievalError::DuplicateWsi(_))
        ));
    }

    #[test]
    fn single_site_sequestered_loo_all_errors() {
        let idx = EmbeddingIndex::new(
            (0..4).map(|i| entry(&format!("W{i}"), "S", i % 2, &[i as f64])).collect(),
            Metric::Euclidean,
        )
        .unwrap();
        let r = leave_one_out_eval(&idx, 3, true, 2).unwrap();
        assert_eq!(r.n_errors, 4);
        assert_eq!(r.n_scored, 0);
        let r = leave_one_out_eval(&idx, 3, false, 2).unwrap();
        assert_eq!(r.n_scored, 4);
        assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 4);
    }

    #[test]
    fn loo_never_matches_self() {
        // Pairs of identical vectors with opposite classes: the nearest
        // non-self neighbor always has the other class.
        let mut entries = Vec::new();
        for p in 0..4 {
            let v = [p as f64 * 10.0];
            entries.push(entry(&format!("A{p}"), "S", 0, &v));
            entries.push(entry(&format!("B{p}"), "S", 1, &v));
        }
        let idx = EmbeddingIndex::new(entries, Metric::Euclidean).unwrap();
        let r = leave_one_out_eval(&idx, 1, false, 2).unwrap();
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn euclidean_and_cosine_agree_on_unit_vectors() {
        let mut rng = Rng::new(12);
        let unit = |rng: &mut Rng| {
            let v: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let entries: Vec<_> = (0..20).map(|i| entry(&format!("W{i:02}"), "S", 0, &unit(&mut rng))).collect();
        let e = EmbeddingIndex::new(entries.clone(), Metric::Euclidean).unwrap();
        let c = EmbeddingIndex::new(entries, Metric::Cosine).unwrap();
        for _ in 0..10 {
            let q = unit(&mut rng);
            let ids = |idx: &EmbeddingIndex| {
                knn(idx, &q, 5, &SearchFilter::none())
                    .unwrap()
                    .into_iter()
                    .map(|n| n.wsi_id)
                    .collect::<Vec<_>>()
            };
            assert_eq!(ids(&e), ids(&c));
        }
    }

    #[test]
    fn index_jsonl_roundtrip() {
        let idx = EmbeddingIndex::new(
            vec![entry("a", "S", 0, &[0.1, 1.0 / 3.0]), entry("b", "T", 1, &[1e-300, -2.5])],
            Metric::Euclidean,
        )
        .unwrap();
        let mut buf = Vec::new();
        idx.write_jsonl(&mut buf).unwrap();
        assert_eq!(EmbeddingIndex::read_jsonl(buf.as_slice(), Metric::Euclidean).unwrap(), idx);
    }
}
