//! Patch records grouped into WSIs and sites, the synthetic cohort
//! generator, the JSON-lines cohort file, and WSI-level splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

/// Sub-patch views stored per patch (a 5×5 grid).
pub const VIEWS_PER_PATCH: usize = 25;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {patch_id}: {message}")]
    Schema { patch_id: String, message: String },
    #[error("invalid cohort: {0}")]
    Invalid(String),
    #[error("feature dim {dim} cannot hold {classes} class axes plus {sites} site axes")]
    Dimension { dim: usize, classes: usize, sites: usize },
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("unknown site {0:?}")]
    UnknownSite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub patch_id: String,
    pub wsi_id: String,
    pub site_id: String,
    pub class_id: usize,
    pub views: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<CohortRecord>,
    n_classes: usize,
    sites: Vec<String>,
    dim: usize,
}

impl Cohort {
    /// Validates every invariant: class range, known sites, 25 finite views
    /// of equal dim, and each WSI belonging to exactly one site.
    pub fn new(
        records: Vec<CohortRecord>,
        n_classes: usize,
        sites: Vec<String>,
        dim: usize,
    ) -> Result<Self, CohortError> {
        if n_classes == 0 {
            return Err(CohortError::Invalid("class count must be positive".into()));
        }
        let site_set: HashSet<&str> = sites.iter().map(String::as_str).collect();
        if site_set.len() != sites.len() {
            return Err(CohortError::Invalid("duplicate site ids".into()));
        }
        let mut wsi_site: HashMap<&str, (&str, usize)> = HashMap::new();
        for r in &records {
            let schema = |message: String| CohortError::Schema {
                patch_id: r.patch_id.clone(),
                message,
            };
            if r.class_id >= n_classes {
                return Err(schema(format!("class_id {} >= C={}", r.class_id, n_classes)));
            }
            if !site_set.contains(r.site_id.as_str()) {
                return Err(schema(format!("site {:?} not declared in header", r.site_id)));
            }
            if r.views.len() != VIEWS_PER_PATCH {
                return Err(schema(format!(
                    "expected {VIEWS_PER_PATCH} views, found {}",
                    r.views.len()
                )));
            }
            for (k, v) in r.views.iter().enumerate() {
                if v.len() != dim {
                    return Err(schema(format!("view {k} has dim {}, expected {dim}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(schema(format!("view {k} has non-finite values")));
                }
            }
            match wsi_site.get(r.wsi_id.as_str()) {
                Some(&(site, class)) if site != r.site_id || class != r.class_id => {
                    return Err(schema(format!(
                        "WSI {} already assigned to site {site} class {class}",
                        r.wsi_id
                    )));
                }
                Some(_) => {}
                None => {
                    wsi_site.insert(&r.wsi_id, (&r.site_id, r.class_id));
                }
            }
        }
        Ok(Self {
            records,
            n_classes,
            sites,
            dim,
        })
    }

    pub fn records(&self) -> &[CohortRecord] {
        &self.records
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn site_index(&self, site: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == site)
    }

    /// WSI ids in order of first appearance.
    pub fn wsi_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.wsi_id.as_str()))
            .map(|r| r.wsi_id.as_str())
            .collect()
    }

    /// Same header, different record subset.
    fn subset(&self, records: Vec<CohortRecord>) -> Cohort {
        Cohort {
            records,
            n_classes: self.n_classes,
            sites: self.sites.clone(),
            dim: self.dim,
        }
    }
}

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_sites: usize,
    pub wsis_per_site: usize,
    pub patches_per_wsi: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub class_signal: f64,
    pub site_signal: f64,
    pub noise_sigma: f64,
    pub view_jitter: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_sites: 4,
            wsis_per_site: 8,
            patches_per_wsi: 10,
            n_classes: 2,
            dim: 64,
            class_signal: 2.0,
            site_signal: 2.0,
            noise_sigma: 0.5,
            view_jitter: 0.1,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.dim < self.n_classes + self.n_sites {
            return Err(CohortError::Dimension {
                dim: self.dim,
                classes: self.n_classes,
                sites: self.n_sites,
            });
        }
        if self.n_sites == 0 || self.wsis_per_site == 0 || self.patches_per_wsi == 0 || self.n_classes == 0 {
            return Err(CohortError::Spec("all counts must be positive".into()));
        }
        let reals = [
            ("class_signal", self.class_signal),
            ("site_signal", self.site_signal),
            ("view_jitter", self.view_jitter),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CohortError::Spec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(CohortError::Spec(format!(
                "noise_sigma must be finite and > 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

pub fn site_name(s: usize) -> String {
    format!("H{s}")
}

/// Synthetic cohort with an additive class axis and an additive site axis.
///
/// Class `c` lives on canonical axis `c`, site `s` on axis `C + s`. WSI `w`
/// of a site gets class `w mod C`, so classes are balanced within every
/// site whenever `wsis_per_site` is a multiple of `C`. Patch base vectors
/// are `class_signal·e_c + site_signal·e_{C+s} + N(0, noise²)`, and each of
/// the 25 views adds `N(0, view_jitter²)` on top.
pub fn generate(spec: &GenSpec) -> Result<Cohort, CohortError> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let sites: Vec<String> = (0..spec.n_sites).map(site_name).collect();
    let mut records = Vec::with_capacity(spec.n_sites * spec.wsis_per_site * spec.patches_per_wsi);
    let mut wsi_counter = 0usize;
    for (s, site) in sites.iter().enumerate() {
        for w in 0..spec.wsis_per_site {
            let class_id = w % spec.n_classes;
            let wsi_id = format!("W{wsi_counter}");
            wsi_counter += 1;
            for p in 0..spec.patches_per_wsi {
                let mut base: Vec<f64> = (0..spec.dim).map(|_| spec.noise_sigma * rng.normal()).collect();
                base[class_id] += spec.class_signal;
                base[spec.n_classes + s] += spec.site_signal;
                let views = (0..VIEWS_PER_PATCH)
                    .map(|_| {
                        base.iter()
                            .map(|&b| {
                                if spec.view_jitter > 0.0 {
                                    b + spec.view_jitter * rng.normal()
                                } else {
                                    b
                                }
                            })
                            .collect()
                    })
                    .collect();
                records.push(CohortRecord {
                    patch_id: format!("{wsi_id}-P{p}"),
                    wsi_id: wsi_id.clone(),
                    site_id: site.clone(),
                    class_id,
                    views,
                });
            }
        }
    }
    Cohort::new(records, spec.n_classes, sites, spec.dim)
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(rename = "C")]
    n_classes: usize,
    d: usize,
    sites: Vec<String>,
}

fn write_number(out: &mut String, v: f64) {
    // 17 significant digits always round-trip an f64.
    use std::fmt::Write as _;
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn record_line(r: &CohortRecord) -> String {
    let mut line = String::with_capacity(64 + r.views.len() * r.views.first().map_or(0, Vec::len) * 24);
    line.push_str("{\"patch_id\":");
    line.push_str(&json_string(&r.patch_id));
    line.push_str(",\"wsi_id\":");
    line.push_str(&json_string(&r.wsi_id));
    line.push_str(",\"site_id\":");
    line.push_str(&json_string(&r.site_id));
    line.push_str(",\"class_id\":");
    line.push_str(&r.class_id.to_string());
    line.push_str(",\"views\":[");
    for (k, view) in r.views.iter().enumerate() {
        if k > 0 {
            line.push(',');
        }
        line.push('[');
        for (i, &v) in view.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            write_number(&mut line, v);
        }
        line.push(']');
    }
    line.push_str("]}");
    line
}

pub fn write_cohort<W: Write>(cohort: &Cohort, mut out: W) -> Result<(), CohortError> {
    let header = Header {
        n_classes: cohort.n_classes,
        d: cohort.dim,
        sites: cohort.sites.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for r in &cohort.records {
        writeln!(out, "{}", record_line(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn save(cohort: &Cohort, path: &Path) -> Result<(), CohortError> {
    write_cohort(cohort, BufWriter::new(File::create(path)?))
}

pub fn read_cohort<R: BufRead>(input: R) -> Result<Cohort, CohortError> {
    let mut lines = input.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => {
                return Err(CohortError::Parse {
                    line: 1,
                    message: "missing header line".into(),
                })
            }
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| CohortError::Parse {
                    line: i + 1,
                    message: format!("bad header: {e}"),
                })?;
            }
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CohortRecord = serde_json::from_str(&line).map_err(|e| CohortError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Cohort::new(records, header.n_classes, header.sites, header.d)
}

pub fn load(path: &Path) -> Result<Cohort, CohortError> {
    read_cohort(BufReader::new(File::open(path)?))
}

/// Train / test / external partition of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Cohort,
    pub test: Cohort,
    pub external: Cohort,
}

/// Splits at the WSI level.
///
/// Every record of `holdout_site` goes to `external`. The remaining WSIs
/// are grouped by (site, class) stratum and `round(test_fraction · n)` WSIs
/// of each stratum go to `test`.
pub fn split(
    cohort: &Cohort,
    holdout_site: Option<&str>,
    test_fraction: f64,
    seed: u64,
) -> Result<Split, CohortError> {
    let holdout: Vec<&str> = holdout_site.into_iter().collect();
    split_pooled(cohort, &holdout, test_fraction, seed)
}

/// Like [`split`], with any number of sites pooled into `external`.
pub fn split_pooled(
    cohort: &Cohort,
    holdout_sites: &[&str],
    test_fraction: f64,
    seed: u64,
) -> Result<Split, CohortError> {
    for s in holdout_sites {
        if cohort.site_index(s).is_none() {
            return Err(CohortError::UnknownSite((*s).to_string()));
        }
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(CohortError::Spec(format!(
            "test_fraction must lie in [0, 1], got {test_fraction}"
        )));
    }
    let holdout: HashSet<&str> = holdout_sites.iter().copied().collect();

    let mut strata: BTreeMap<(usize, usize), Vec<&str>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for r in &cohort.records {
        if holdout.contains(r.site_id.as_str()) || !seen.insert(r.wsi_id.as_str()) {
            continue;
        }
        let site = cohort.site_index(&r.site_id).expect("validated site");
        strata.entry((site, r.class_id)).or_default().push(&r.wsi_id);
    }

    let mut rng = Rng::new(seed);
    let mut test_wsis = HashSet::new();
    for wsis in strata.values_mut() {
        rng.shuffle(wsis);
        let n_test = (test_fraction * wsis.len() as f64).round() as usize;
        test_wsis.extend(wsis.iter().take(n_test).copied());
    }

    let (mut train, mut test, mut external) = (Vec::new(), Vec::new(), Vec::new());
    for r in &cohort.records {
        if holdout.contains(r.site_id.as_str()) {
            external.push(r.clone());
        } else if test_wsis.contains(r.wsi_id.as_str()) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok(Split {
        train: cohort.subset(train),
        test: cohort.subset(test),
        external: cohort.subset(external),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn small_spec() -> GenSpec {
        GenSpec {
            n_sites: 3,
            wsis_per_site: 4,
            patches_per_wsi: 2,
            n_classes: 2,
            dim: 8,
            seed: 11,
            ..GenSpec::default()
        }
    }

    fn roundtrip(c: &Cohort) -> Cohort {
        let mut buf = Vec::new();
        write_cohort(c, &mut buf).unwrap();
        read_cohort(Cursor::new(buf)).unwrap()
    }

    #[test]
    fn generate_shape_and_balance() {
        let c = generate(&small_spec()).unwrap();
        assert_eq!(c.len(), 3 * 4 * 2);
        assert_eq!(c.wsi_ids().len(), 12);
        for site in c.sites() {
            let per_class: Vec<usize> = (0..2)
                .map(|k| c.records().iter().filter(|r| &r.site_id == site && r.class_id == k).count())
                .collect();
            assert_eq!(per_class[0], per_class[1]);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        assert_eq!(generate(&small_spec()).unwrap(), generate(&small_spec()).unwrap());
    }

    #[test]
    fn zero_jitter_gives_identical_views() {
        let c = generate(&GenSpec {
            view_jitter: 0.0,
            ..small_spec()
        })
        .unwrap();
        for r in c.records() {
            assert!(r.views.iter().all(|v| v == &r.views[0]));
        }
    }

    #[test]
    fn dimension_error() {
        let err = generate(&GenSpec {
            dim: 3,
            n_sites: 4,
            n_classes: 2,
            ..small_spec()
        })
        .unwrap_err();
        assert!(matches!(err, CohortError::Dimension { dim: 3, .. }));
    }

    #[test]
    fn class_signal_absent_gives_chance_centroid_accuracy() {
        // With no class axis and (almost) no noise, class centroids coincide
        // up to site composition, and nearest-centroid is at chance.
        let c = generate(&GenSpec {
            n_sites: 4,
            wsis_per_site: 8,
            class_signal: 0.0,
            noise_sigma: 1e-9,
            view_jitter: 0.0,
            site_signal: 2.0,
            dim: 8,
            ..small_spec()
        })
        .unwrap();
        let d = c.dim();
        let mut centroids = vec![vec![0.0; d]; 2];
        let mut counts = [0usize; 2];
        for r in c.records() {
            counts[r.class_id] += 1;
            for (a, b) in centroids[r.class_id].iter_mut().zip(&r.views[0]) {
                *a += b;
            }
        }
        for (cen, n) in centroids.iter_mut().zip(counts) {
            cen.iter_mut().for_each(|v| *v /= n as f64);
        }
        let gap: f64 = centroids[0].iter().zip(&centroids[1]).map(|(a, b)| (a - b).abs()).sum();
        assert!(gap < 1e-6, "centroids should coincide, gap {gap}");
    }

    #[test]
    fn signal_axes_are_orthogonal() {
        let spec = small_spec();
        for c in 0..spec.n_classes {
            for s in 0..spec.n_sites {
                assert_ne!(c, spec.n_classes + s);
            }
        }
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let c = generate(&small_spec()).unwrap();
        assert_eq!(roundtrip(&c), c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save(&c, &path).unwrap();
        assert_eq!(load(&path).unwrap(), c);
    }

    #[test]
    fn truncated_file_reports_line() {
        let c = generate(&small_spec()).unwrap();
        let mut buf = Vec::new();
        write_cohort(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 40];
        let n_lines = cut.lines().count();
        match read_cohort(Cursor::new(cut.as_bytes())) {
            Err(CohortError::Parse { line, .. }) => assert_eq!(line, n_lines),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_view_count_names_patch() {
        let mut c = generate(&small_spec()).unwrap();
        c.records[3].views.pop();
        let id = c.records[3].patch_id.clone();
        let mut buf = Vec::new();
        write_cohort(&c, &mut buf).unwrap();
        match read_cohort(Cursor::new(buf)) {
            Err(CohortError::Schema { patch_id, .. }) => assert_eq!(patch_id, id),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn wsi_must_map_to_one_site() {
        let mut c = generate(&small_spec()).unwrap();
        let other = c.records.last().unwrap().site_id.clone();
        c.records[0].site_id = other;
        let Cohort { records, n_classes, sites, dim } = c;
        assert!(matches!(
            Cohort::new(records, n_classes, sites, dim),
            Err(CohortError::Schema { .. })
        ));
    }

    #[test]
    fn split_partitions_by_wsi() {
        let c = generate(&GenSpec {
            wsis_per_site: 6,
            ..small_spec()
        })
        .unwrap();
        let s = split(&c, Some("H1"), 0.34, 5).unwrap();
        assert!(s.external.records().iter().all(|r| r.site_id == "H1"));
        assert_eq!(
            s.external.len(),
            c.records().iter().filter(|r| r.site_id == "H1").count()
        );
        assert_eq!(s.train.len() + s.test.len() + s.external.len(), c.len());
        let ids = |x: &Cohort| x.wsi_ids().into_iter().map(String::from).collect::<HashSet<_>>();
        let (tr, te, ex) = (ids(&s.train), ids(&s.test), ids(&s.external));
        assert!(tr.is_disjoint(&te) && tr.is_disjoint(&ex) && te.is_disjoint(&ex));
        // 3 WSIs per (site, class) stratum, round(0.34·3) = 1 each, two sites left
        assert_eq!(te.len(), 4);
    }

    #[test]
    fn split_zero_fraction_and_unknown_site() {
        let c = generate(&small_spec()).unwrap();
        let s = split(&c, None, 0.0, 1).unwrap();
        assert!(s.test.is_empty() && s.external.is_empty());
        assert_eq!(s.train, c);
        assert!(matches!(split(&c, Some("nope"), 0.2, 1), Err(CohortError::UnknownSite(_))));
    }
}
