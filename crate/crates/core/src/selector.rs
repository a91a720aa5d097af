//! Random search over augmentation distributions.
//!
//! Each candidate distribution is scored by generating `N` augmented views of
//! every origin sample and measuring the conditional dependence between the
//! view features and their origin ids given the downstream labels. The
//! candidate with the lowest score is selected.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply_chain, sample_chain, sample_distribution, AugDistribution};
use crate::corpus::{cut_random_segment, LoadedDataset};
use crate::error::{Error, Result};
use crate::features::{pooled_features, N_MELS};
use crate::kernelstats::{
    conditional_dependence, delta_gram, gaussian_gram, median_heuristic, DependenceScore,
    DEFAULT_EPSILON,
};
use crate::rng::{derive_seed, seeded_rng};

pub const DEFAULT_N_VIEWS: usize = 20;
pub const DEFAULT_CANDIDATES: usize = 100;
pub const DEFAULT_MAX_ORIGINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub n_views: usize,
    pub epsilon: f64,
    /// Origin samples kept for scoring; larger datasets are subsampled.
    pub max_origins: usize,
    /// Seed of the origin subsample, shared by every candidate of a search.
    pub subsample_seed: u64,
    pub segment_s: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            n_views: DEFAULT_N_VIEWS,
            epsilon: DEFAULT_EPSILON,
            max_origins: DEFAULT_MAX_ORIGINS,
            subsample_seed: 0,
            segment_s: 1.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.max_origins < 2 {
            return Err(Error::InvalidParameter(
                "n_views must be >= 1 and max_origins >= 2".into(),
            ));
        }
        if !(self.epsilon > 0.0) || !(self.segment_s > 0.0) {
            return Err(Error::InvalidParameter(
                "epsilon and segment length must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Augmented views `X'` with origin indices `Z` and downstream labels `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub features: Vec<[f64; N_MELS]>,
    /// Index into the source dataset's entries.
    pub origins: Vec<usize>,
    pub origin_ids: Vec<String>,
    pub downstream_labels: Vec<String>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Cuts `n_views` random segments per sample, augments each with its own
/// chain drawn from `d`, and pools their log-Mel spectrograms.
pub fn generate_views<R: Rng + ?Sized>(
    data: &LoadedDataset,
    d: &AugDistribution,
    n_views: usize,
    segment_s: f64,
    rng: &mut R,
) -> Result<ViewSet> {
    if n_views == 0 {
        return Err(Error::InvalidParameter("n_views must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Dataset("cannot generate views of an empty dataset".into()));
    }
    let total = data.len() * n_views;
    let mut views = ViewSet {
        features: Vec::with_capacity(total),
        origins: Vec::with_capacity(total),
        origin_ids: Vec::with_capacity(total),
        downstream_labels: Vec::with_capacity(total),
    };
    for (origin, (entry, w)) in data.iter().enumerate() {
        for _ in 0..n_views {
            let segment = cut_random_segment(w, segment_s, rng)?;
            let chain = sample_chain(d, rng);
            let augmented = apply_chain(&chain, &segment)?;
            views.features.push(pooled_features(&augmented)?);
            views.origins.push(origin);
            views.origin_ids.push(entry.id.clone());
            views.downstream_labels.push(entry.label.clone());
        }
    }
    Ok(views)
}

/// Conditional dependence of a view set: Gaussian kernel on features with
/// median-heuristic bandwidth, delta kernels on origin and label.
pub fn score_views(views: &ViewSet, epsilon: f64) -> Result<DependenceScore> {
    let sigma = median_heuristic(&views.features)?;
    let gx = gaussian_gram(&views.features, sigma)?;
    let gz = delta_gram(&views.origins)?;
    let gy = delta_gram(&views.downstream_labels)?;
    conditional_dependence(&gx, &gz, &gy, epsilon)
}

/// Entries kept for scoring: all of them, or a seeded subsample of
/// `max_origins` in dataset order.
pub fn scoring_subset(data: &LoadedDataset, cfg: &ScoringConfig) -> Result<LoadedDataset> {
    if data.len() <= cfg.max_origins {
        return Ok(data.clone());
    }
    let mut rng = seeded_rng(cfg.subsample_seed);
    let mut idx = rand::seq::index::sample(&mut rng, data.len(), cfg.max_origins).into_vec();
    idx.sort_unstable();
    data.subset(&idx)
}

fn check_scorable(data: &LoadedDataset) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::Dataset("scoring needs at least two samples".into()));
    }
    let labels: BTreeSet<&str> = data.iter().map(|(e, _)| e.label.as_str()).collect();
    if labels.len() < 2 {
        return Err(Error::Dataset(
            "scoring needs at least two distinct downstream labels; conditioning on a single label is vacuous"
                .into(),
        ));
    }
    Ok(())
}

pub fn score_distribution<R: Rng + ?Sized>(
    data: &LoadedDataset,
    d: &AugDistribution,
    cfg: &ScoringConfig,
    rng: &mut R,
) -> Result<DependenceScore> {
    cfg.validate()?;
    let subset = scoring_subset(data, cfg)?;
    check_scorable(&subset)?;
    let views = generate_views(&subset, d, cfg.n_views, cfg.segment_s, rng)?;
    score_views(&views, cfg.epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub n_candidates: usize,
    pub master_seed: u64,
    pub scoring: ScoringConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    /// Sampling order; breaks score ties.
    pub index: usize,
    pub seed: u64,
    pub score: DependenceScore,
    pub distribution: AugDistribution,
}

/// Candidates sorted ascending by score, ties by sampling index.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    config: SearchConfig,
    candidates: Vec<ScoredCandidate>,
}

fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    a.score
        .value
        .total_cmp(&b.score.value)
        .then(a.index.cmp(&b.index))
}

impl SearchResult {
    /// Sorts `candidates` into rank order.
    pub fn new(config: SearchConfig, mut candidates: Vec<ScoredCandidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidParameter("search result without candidates".into()));
        }
        if let Some(c) = candidates.iter().find(|c| !c.score.value.is_finite()) {
            return Err(Error::Numerical(format!(
                "candidate {} has non-finite score",
                c.index
            )));
        }
        candidates.sort_by(rank_order);
        Ok(SearchResult { config, candidates })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn candidates(&self) -> &[ScoredCandidate] {
        &self.candidates
    }

    pub fn best(&self) -> &ScoredCandidate {
        &self.candidates[0]
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Line-delimited JSON: a header carrying the config (and `run`, when
    /// given), one record per candidate in rank order, then a `selected`
    /// record repeating the best candidate.
    pub fn to_records(&self, run: Option<&serde_json::Value>) -> String {
        let mut lines = Vec::with_capacity(self.candidates.len() + 2);
        lines.push(SearchRecord::Header {
            version: FORMAT_VERSION,
            config: self.config,
            run: run.cloned(),
        });
        for (rank, c) in self.candidates.iter().enumerate() {
            lines.push(SearchRecord::Candidate { rank, candidate: *c });
        }
        lines.push(SearchRecord::Selected {
            rank: 0,
            candidate: *self.best(),
        });
        let mut out = String::new();
        for l in &lines {
            out.push_str(&serde_json::to_string(l).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses [`SearchResult::to_records`] output, returning the result and
    /// the embedded `run` block.
    pub fn from_records(text: &str) -> Result<(Self, Option<serde_json::Value>)> {
        let mut header = None;
        let mut candidates = Vec::new();
        let mut selected = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SearchRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            match rec {
                SearchRecord::Header {
                    version,
                    config,
                    run,
                } => {
                    if version != FORMAT_VERSION {
                        return Err(Error::Format(format!(
                            "unsupported search result version {version}"
                        )));
                    }
                    header = Some((config, run));
                }
                SearchRecord::Candidate { candidate, .. } => candidates.push(candidate),
                SearchRecord::Selected { candidate, .. } => selected = Some(candidate),
            }
        }
        let (config, run) =
            header.ok_or_else(|| Error::Format("search result has no header record".into()))?;
        let result = SearchResult::new(config, candidates)?;
        if let Some(sel) = selected {
            if sel != *result.best() {
                return Err(Error::Format(
                    "selected record does not match the best candidate".into(),
                ));
            }
        }
        Ok((result, run))
    }

    pub fn write(&self, path: impl AsRef<Path>, run: Option<&serde_json::Value>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_records(run)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, Option<serde_json::Value>)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_records(&text)
    }

    /// SHA-256 of the run-independent record serialisation.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_records(None).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum SearchRecord {
    Header {
        version: u32,
        config: SearchConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        run: Option<serde_json::Value>,
    },
    Candidate {
        rank: usize,
        #[serde(flatten)]
        candidate: ScoredCandidate,
    },
    Selected {
        rank: usize,
        #[serde(flatten)]
        candidate: ScoredCandidate,
    },
}

/// Seed of candidate `index`; candidates can be scored in any order.
pub fn candidate_seed(master_seed: u64, index: usize) -> u64 {
    derive_seed(master_seed, index as u64)
}

/// Samples candidate `index`'s distribution and scores it, all from the
/// candidate's own seed.
pub fn score_candidate(
    data: &LoadedDataset,
    index: usize,
    cfg: &ScoringConfig,
    master_seed: u64,
) -> Result<ScoredCandidate> {
    let seed = candidate_seed(master_seed, index);
    let mut rng = seeded_rng(seed);
    let distribution = sample_distribution(&mut rng);
    let score = score_distribution(data, &distribution, cfg, &mut rng)?;
    Ok(ScoredCandidate {
        index,
        seed,
        score,
        distribution,
    })
}

/// Scores `n_candidates` sampled distributions on `workers` threads (all
/// available cores when `None`). Any failing candidate aborts the search.
pub fn random_search(
    data: &LoadedDataset,
    n_candidates: usize,
    cfg: &ScoringConfig,
    master_seed: u64,
    workers: Option<usize>,
) -> Result<SearchResult> {
    if n_candidates == 0 {
        return Err(Error::InvalidParameter("n_candidates must be >= 1".into()));
    }
    cfg.validate()?;
    check_scorable(&scoring_subset(data, cfg)?)?;
    let run = || {
        (0..n_candidates)
            .into_par_iter()
            .map(|i| {
                score_candidate(data, i, cfg, master_seed).map_err(|e| Error::Candidate {
                    index: i,
                    source: Box::new(e),
                })
            })
            .collect::<Vec<_>>()
    };
    let outcomes = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?
            .install(run),
        None => run(),
    };
    let candidates = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    SearchResult::new(
        SearchConfig {
            n_candidates,
            master_seed,
            scoring: *cfg,
        },
        candidates,
    )
}
