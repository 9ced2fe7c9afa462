//! End-to-end comparison of plain ranking-loss training against
//! site-sequestered training on one generated cohort.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{generate, split, Cohort, CohortError, GenSpec};
use crate::encoder::{train, EncoderError, EncoderParams, EncoderSpec, TrainConfig};
use crate::metrics::{site_probe, EvalReport, MetricsError, ProbeKind, ProbeReport};
use crate::retrieval::{
    embed_patches, group_by_wsi, leave_one_out_eval, run_loho_experiment, EmbeddingIndex, LohoConfig, Metric,
    RetrievalError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Site probe on patch embeddings: fit on one cohort, score on another.
pub fn probe_embeddings(
    params: &EncoderParams,
    fit_on: &Cohort,
    score_on: &Cohort,
    kind: ProbeKind,
    seed: u64,
) -> Result<ProbeReport, ExperimentError> {
    let label = |c: &Cohort, vectors: Vec<Vec<f64>>| {
        vectors
            .into_iter()
            .zip(c.records())
            .map(|(v, r)| (v, r.site_id.clone()))
            .collect::<Vec<_>>()
    };
    let train = label(fit_on, embed_patches(fit_on, params)?);
    let test = label(score_on, embed_patches(score_on, params)?);
    Ok(site_probe(&train, &test, kind, seed)?)
}

/// Site probe on raw (first-view) features, no encoder involved.
pub fn probe_raw(fit_on: &Cohort, score_on: &Cohort, kind: ProbeKind, seed: u64) -> Result<ProbeReport, ExperimentError> {
    let label = |c: &Cohort| {
        c.records()
            .iter()
            .map(|r| (r.views[0].clone(), r.site_id.clone()))
            .collect::<Vec<_>>()
    };
    Ok(site_probe(&label(fit_on), &label(score_on), kind, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub cohort: GenSpec,
    pub encoder: EncoderSpec,
    pub train: TrainConfig,
    pub probe_kind: ProbeKind,
    /// Fraction of WSIs per (site, class) stratum held out from training
    /// and used to score the probe.
    pub test_fraction: f64,
    pub k: usize,
}

impl BiasConfig {
    /// 4 sites × 8 WSIs × 10 patches, equal class and site signal, one seed
    /// driving every stream.
    pub fn desk_default(seed: u64) -> Self {
        let cohort = GenSpec {
            seed,
            ..GenSpec::default()
        };
        let encoder = EncoderSpec::desk_default(cohort.dim);
        Self {
            cohort,
            encoder,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            probe_kind: ProbeKind::Rff,
            test_fraction: 0.25,
            k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub sequester: bool,
    pub epoch_losses: Vec<f64>,
    pub probe: ProbeReport,
    /// Leave-one-out k-NN over every WSI of the cohort.
    pub retrieval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub config: BiasConfig,
    pub raw_probe: ProbeReport,
    pub plain: ArmReport,
    pub sequestered: ArmReport,
}

/// Trains one arm on the train split and measures it.
pub fn run_arm(cohort: &Cohort, cfg: &BiasConfig, sequester: bool) -> Result<ArmReport, ExperimentError> {
    let parts = split(cohort, None, cfg.test_fraction, cfg.train.seed)?;
    let train_cfg = TrainConfig {
        sequester,
        ..cfg.train.clone()
    };
    let log = train(&parts.train, &cfg.encoder, &train_cfg)?;
    let probe = probe_embeddings(&log.params, &parts.train, &parts.test, cfg.probe_kind, cfg.train.seed)?;
    let patches = embed_patches(cohort, &log.params)?;
    let index = EmbeddingIndex::new(group_by_wsi(cohort, &patches), Metric::Euclidean)?;
    let retrieval = leave_one_out_eval(&index, cfg.k, false, cohort.n_classes())?;
    Ok(ArmReport {
        sequester,
        epoch_losses: log.epoch_losses,
        probe,
        retrieval,
    })
}

pub fn run_bias_experiment(cfg: &BiasConfig) -> Result<BiasReport, ExperimentError> {
    let cohort = generate(&cfg.cohort)?;
    let parts = split(&cohort, None, cfg.test_fraction, cfg.train.seed)?;
    let raw_probe = probe_raw(&parts.train, &parts.test, cfg.probe_kind, cfg.train.seed)?;
    Ok(BiasReport {
        config: cfg.clone(),
        raw_probe,
        plain: run_arm(&cohort, cfg, false)?,
        sequestered: run_arm(&cohort, cfg, true)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteResult {
    pub holdout_site: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LohoSummary {
    pub sequester: bool,
    pub sites: Vec<SiteResult>,
    /// Correct external predictions over all scored external queries.
    pub overall_accuracy: f64,
    pub overall: EvalReport,
}

/// Runs [`run_loho_experiment`] once per listed site and pools the results.
///
/// Sites are processed by up to `threads` workers; each run is seeded
/// independently of scheduling and results are merged in `sites` order.
pub fn run_loho_all(
    cohort: &Cohort,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
    sites: &[String],
    loho: &LohoConfig,
    threads: usize,
) -> Result<LohoSummary, ExperimentError> {
    let threads = threads.clamp(1, sites.len().max(1));
    let run = |site: &String| run_loho_experiment(cohort, spec, cfg, site, loho);
    let outcomes: Vec<Result<_, RetrievalError>> = if threads == 1 {
        sites.iter().map(run).collect()
    } else {
        let chunk = sites.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = sites
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("loho worker panicked"))
                .collect()
        })
    };

    let n = cohort.n_classes();
    let mut pooled = vec![vec![0u64; n]; n];
    let mut errors = 0;
    let mut results = Vec::with_capacity(sites.len());
    for (site, outcome) in sites.iter().zip(outcomes) {
        let outcome = outcome?;
        for (p, r) in pooled.iter_mut().zip(&outcome.report.confusion) {
            for (a, b) in p.iter_mut().zip(r) {
                *a += b;
            }
        }
        errors += outcome.report.n_errors;
        results.push(SiteResult {
            holdout_site: site.clone(),
            report: outcome.report,
        });
    }
    let overall = EvalReport::from_confusion(pooled, errors);
    Ok(LohoSummary {
        sequester: cfg.sequester,
        sites: results,
        overall_accuracy: overall.accuracy,
        overall,
    })
}
