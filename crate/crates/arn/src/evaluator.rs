//! Retrieval inference and metrics: shared-feature embedding, cosine
//! ranking, CMC, and mAP.
//!
//! At test time only the backbone and the shared encoder run; embeddings are
//! L2-normalized so the dot product is the cosine similarity (and descending
//! cosine order equals ascending Euclidean order). Under the cross-camera
//! protocol, gallery items sharing both identity and camera with the query
//! are excluded from that query's ranking. Ties break by ascending gallery
//! index so metrics are deterministic across platforms.

use crate::error::{ArnError, Result};
use crate::network::ArnModel;
use crate::nn::normalize_rows;
use crate::samples::LabeledSample;
use ndarray::{s, Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Junk-filtering rule applied per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Whole gallery is valid for every query.
    Plain,
    /// Gallery items with the query's identity AND camera are excluded.
    CrossCamera,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Plain => write!(f, "plain"),
            Protocol::CrossCamera => write!(f, "cross_camera"),
        }
    }
}

/// A batch of embeddings with their identity and camera tags.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
    pub normalized: bool,
}

impl EmbeddingSet {
    /// Row-normalize raw vectors into a ready-to-rank set.
    pub fn from_raw(vectors: Array2<f64>, identities: Vec<u32>, cameras: Vec<u32>) -> Self {
        assert_eq!(vectors.nrows(), identities.len());
        assert_eq!(vectors.nrows(), cameras.len());
        let (normalized, _) = normalize_rows(&vectors);
        Self {
            vectors: normalized,
            identities,
            cameras,
            normalized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One query's ranking over its valid gallery subset.
#[derive(Debug, Clone)]
pub struct QueryRanking {
    /// Valid gallery indices in descending similarity (ties by index).
    pub order: Vec<usize>,
    /// Similarities parallel to `order`.
    pub similarities: Vec<f64>,
    /// Same-identity flags parallel to `order`.
    pub matches: Vec<bool>,
    /// Protocol validity mask over the whole gallery.
    pub valid: Vec<bool>,
}

impl QueryRanking {
    /// Rank (1-based) of the first correct match, if any.
    pub fn first_match_rank(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m).map(|p| p + 1)
    }

    fn included(&self) -> bool {
        !self.order.is_empty() && self.matches.iter().any(|&m| m)
    }
}

/// Rankings for a full query set.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub per_query: Vec<QueryRanking>,
    pub protocol: Protocol,
}

impl RankingResult {
    /// Queries that count toward metric averages: those with at least one
    /// valid gallery item and at least one correct match among them.
    pub fn included_queries(&self) -> Vec<&QueryRanking> {
        self.per_query.iter().filter(|q| q.included()).collect()
    }
}

/// Embed samples through backbone + shared encoder only, L2-normalized.
pub fn embed(samples: &[LabeledSample], model: &ArnModel) -> Result<EmbeddingSet> {
    if samples.is_empty() {
        return Err(ArnError::Usage("cannot embed an empty sample list".into()));
    }
    let (h, w, c) = model.config().image_shape;
    let d = model.config().latent_dim;
    let mut vectors = Array2::zeros((samples.len(), d));
    for (chunk_start, chunk) in samples.chunks(64).scan(0usize, |start, chunk| {
        let s = *start;
        *start += chunk.len();
        Some((s, chunk))
    }) {
        let mut batch = Array4::zeros((chunk.len(), c, h, w));
        for (i, sample) in chunk.iter().enumerate() {
            let (sh, sw, sc) = sample.image_shape();
            if (sh, sw, sc) != (h, w, c) {
                return Err(ArnError::Shape(format!(
                    "sample image is {sh}x{sw}x{sc}, model wants {h}x{w}x{c}"
                )));
            }
            batch.slice_mut(s![i, .., .., ..]).assign(&sample.image);
        }
        let maps = model.extract_feature_map(&batch)?;
        let latents = model.encode_shared(&maps)?;
        vectors
            .slice_mut(s![chunk_start..chunk_start + chunk.len(), ..])
            .assign(&latents);
    }
    let (vectors, _) = normalize_rows(&vectors);
    Ok(EmbeddingSet {
        vectors,
        identities: samples.iter().map(|s| s.identity()).collect(),
        cameras: samples.iter().map(|s| s.camera).collect(),
        normalized: true,
    })
}

/// Rank the gallery for every query by descending cosine similarity.
pub fn rank(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: Protocol,
) -> Result<RankingResult> {
    if !queries.normalized || !gallery.normalized {
        return Err(ArnError::Usage(
            "rank expects L2-normalized embedding sets".into(),
        ));
    }
    if queries.vectors.ncols() != gallery.vectors.ncols() {
        return Err(ArnError::Shape(format!(
            "query dim {} vs gallery dim {}",
            queries.vectors.ncols(),
            gallery.vectors.ncols()
        )));
    }
    let per_query: Vec<QueryRanking> = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let qvec = queries.vectors.row(qi);
            let qid = queries.identities[qi];
            let qcam = queries.cameras[qi];
            let valid: Vec<bool> = (0..gallery.len())
                .map(|gi| match protocol {
                    Protocol::Plain => true,
                    Protocol::CrossCamera => {
                        !(gallery.identities[gi] == qid && gallery.cameras[gi] == qcam)
                    }
                })
                .collect();
            let mut order: Vec<usize> = (0..gallery.len()).filter(|&gi| valid[gi]).collect();
            let sims: Vec<f64> = (0..gallery.len())
                .map(|gi| qvec.dot(&gallery.vectors.row(gi)))
                .collect();
            order.sort_by(|&a, &b| {
                sims[b]
                    .partial_cmp(&sims[a])
                    .expect("similarities are finite")
                    .then(a.cmp(&b))
            });
            if order.is_empty() {
                eprintln!(
                    "warning: query {qi} has no valid gallery items under {protocol}; \
                     excluded from metric averages"
                );
            }
            QueryRanking {
                similarities: order.iter().map(|&gi| sims[gi]).collect(),
                matches: order.iter().map(|&gi| gallery.identities[gi] == qid).collect(),
                order,
                valid,
            }
        })
        .collect();
    Ok(RankingResult {
        per_query,
        protocol,
    })
}

/// Cumulative matching characteristic: `cmc[k]` is the fraction of included
/// queries whose first correct match appears within the top `k + 1`.
pub fn cmc(result: &RankingResult, max_rank: usize) -> Vec<f64> {
    assert!(max_rank >= 1);
    let included = result.included_queries();
    let mut curve = vec![0.0; max_rank];
    if included.is_empty() {
        return curve;
    }
    for query in &included {
        let first = query.first_match_rank().expect("included implies a match");
        if first <= max_rank {
            curve[first - 1] += 1.0;
        }
    }
    let n = included.len() as f64;
    let mut cumulative = 0.0;
    for slot in curve.iter_mut() {
        cumulative += *slot;
        *slot = cumulative / n;
    }
    curve
}

/// Mean average precision: per query, the mean over correct hits of
/// (correct hits so far / rank); averaged over included queries.
pub fn mean_average_precision(result: &RankingResult) -> f64 {
    let included = result.included_queries();
    if included.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for query in &included {
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &matched) in query.matches.iter().enumerate() {
            if matched {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        total += precision_sum / hits as f64;
    }
    total / included.len() as f64
}

/// The headline retrieval metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Queries included in the averages.
    pub num_queries: usize,
    pub protocol: Protocol,
}

/// Rank and reduce to the standard metric set plus the CMC curve (length
/// `max_rank`).
pub fn evaluate(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: Protocol,
    max_rank: usize,
) -> Result<(Metrics, Vec<f64>)> {
    let result = rank(queries, gallery, protocol)?;
    let curve = cmc(&result, max_rank.max(20));
    let at = |k: usize| curve[(k - 1).min(curve.len() - 1)];
    let metrics = Metrics {
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        rank20: at(20),
        map: mean_average_precision(&result),
        num_queries: result.included_queries().len(),
        protocol,
    };
    let mut curve = curve;
    curve.truncate(max_rank.max(20));
    Ok((metrics, curve))
}
