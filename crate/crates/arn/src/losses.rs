//! The four training losses, their analytic gradients, and a
//! finite-difference gradient verifier.
//!
//! Reduction conventions (all deliberate, so loss magnitudes are batch-size
//! and resolution invariant):
//! - classification: mean over the batch of `-log p(true class)`
//! - contrastive: mean over pairs of `same * D^2 + (1-same) * max(0, m-D)^2`,
//!   `D` the Euclidean distance between the two embeddings
//! - reconstruction: mean squared error per element, pooled over the samples
//!   of both domains
//! - difference: per domain, the squared Frobenius norm of the pairwise
//!   inner-product matrix between shared and private rows (rows L2-normalized
//!   first, no mean), summed over the two domains; zero exactly when every
//!   shared row is orthogonal to every private row. Normalization stops the
//!   term from being minimized by shrinking feature norms instead of
//!   achieving orthogonality.

use crate::config::{AblationFlags, LossWeights};
use crate::error::{ArnError, Result};
use crate::nn::{normalize_rows, normalize_rows_backward, softmax_backward, softmax_rows, EPS};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Source-half embeddings with an explicit pair list.
///
/// `pairs` holds `(i, j, same_identity)` with `i < j`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub embeddings: Array2<f64>,
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairBatch {
    /// Enumerate every unordered pair of rows, flagged by identity equality.
    pub fn from_labels(embeddings: Array2<f64>, labels: &[u32]) -> Self {
        assert_eq!(embeddings.nrows(), labels.len());
        let n = labels.len();
        let mut pairs = Vec::with_capacity(n.saturating_sub(1) * n / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j, labels[i] == labels[j]));
            }
        }
        Self { embeddings, pairs }
    }
}

/// The four batch matrices entering the difference loss; rows are latent
/// vectors, one per sample.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub shared_source: Array2<f64>,
    pub private_source: Array2<f64>,
    pub shared_target: Array2<f64>,
    pub private_target: Array2<f64>,
}

/// Per-term loss values of a single step. Ablated terms are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "class")]
    pub class_loss: f64,
    #[serde(rename = "ctrs")]
    pub ctrs_loss: f64,
    #[serde(rename = "rec")]
    pub rec_loss: f64,
    #[serde(rename = "diff")]
    pub diff_loss: f64,
    pub total: f64,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            (self.class_loss, "class"),
            (self.ctrs_loss, "ctrs"),
            (self.rec_loss, "rec"),
            (self.diff_loss, "diff"),
            (self.total, "total"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, name)| name)
    }
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of the true class.
///
/// `probs` rows must sum to 1; the true-class probability is clamped at
/// [`EPS`] before the log so the loss never produces NaN.
pub fn classification_loss(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    assert_eq!(probs.nrows(), labels.len(), "one label per row");
    let n = labels.len();
    let mut total = 0.0;
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        assert!(label < row.len(), "label out of range");
        total -= row[label].max(EPS).ln();
    }
    total / n as f64
}

/// Gradient of [`classification_loss`] with respect to `probs`.
pub fn classification_loss_grad(probs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(probs.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        grad[[i, label]] = -1.0 / (probs[[i, label]].max(EPS) * n);
    }
    grad
}

// ---------------------------------------------------------------------------
// Contrastive loss
// ---------------------------------------------------------------------------

fn pair_distance(embeddings: &Array2<f64>, i: usize, j: usize) -> f64 {
    let a = embeddings.row(i);
    let b = embeddings.row(j);
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean over pairs of the contrastive objective: similar pairs pay their
/// squared distance, dissimilar pairs pay `max(0, m - D)^2`, so a dissimilar
/// pair contributes only while its distance is inside the margin radius.
///
/// An empty pair list yields 0 (degenerate batch) with a warning on stderr.
pub fn contrastive_loss(pairs: &PairBatch, margin: f64) -> f64 {
    assert!(margin > 0.0, "margin must be positive");
    if pairs.pairs.is_empty() {
        eprintln!("warning: contrastive_loss on empty pair list; returning 0");
        return 0.0;
    }
    let mut total = 0.0;
    for &(i, j, same) in &pairs.pairs {
        let d = pair_distance(&pairs.embeddings, i, j);
        total += if same {
            d * d
        } else {
            let hinge = (margin - d).max(0.0);
            hinge * hinge
        };
    }
    total / pairs.pairs.len() as f64
}

/// Gradient of [`contrastive_loss`] with respect to the embedding matrix.
pub fn contrastive_loss_grad(pairs: &PairBatch, margin: f64) -> Array2<f64> {
    let mut grad = Array2::zeros(pairs.embeddings.raw_dim());
    if pairs.pairs.is_empty() {
        return grad;
    }
    let scale = 1.0 / pairs.pairs.len() as f64;
    for &(i, j, same) in &pairs.pairs {
        let d = pair_distance(&pairs.embeddings, i, j);
        // factor multiplies (e_i - e_j) for row i, negated for row j
        let factor = if same {
            2.0 * scale
        } else if d < margin {
            -2.0 * (margin - d) / d.max(EPS) * scale
        } else {
            0.0
        };
        if factor != 0.0 {
            for k in 0..pairs.embeddings.ncols() {
                let diff = pairs.embeddings[[i, k]] - pairs.embeddings[[j, k]];
                grad[[i, k]] += factor * diff;
                grad[[j, k]] -= factor * diff;
            }
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Reconstruction loss
// ---------------------------------------------------------------------------

/// Per-element mean squared error pooled over both domains' samples.
pub fn reconstruction_loss(
    source: &Array4<f64>,
    source_hat: &Array4<f64>,
    target: &Array4<f64>,
    target_hat: &Array4<f64>,
) -> Result<f64> {
    if source.dim() != source_hat.dim() || target.dim() != target_hat.dim() {
        return Err(ArnError::Shape(format!(
            "reconstruction_loss: source {:?} vs {:?}, target {:?} vs {:?}",
            source.dim(),
            source_hat.dim(),
            target.dim(),
            target_hat.dim()
        )));
    }
    let count = (source.len() + target.len()) as f64;
    let mut total = 0.0;
    for (x, xh) in source.iter().zip(source_hat.iter()) {
        total += (x - xh) * (x - xh);
    }
    for (x, xh) in target.iter().zip(target_hat.iter()) {
        total += (x - xh) * (x - xh);
    }
    Ok(total / count)
}

/// Gradients of [`reconstruction_loss`]:
/// `(d/d source, d/d source_hat, d/d target, d/d target_hat)`.
///
/// The originals receive a gradient too: the feature maps come from the
/// backbone, so while the backbone trains, the target side of the squared
/// error is part of the objective.
pub fn reconstruction_loss_grad(
    source: &Array4<f64>,
    source_hat: &Array4<f64>,
    target: &Array4<f64>,
    target_hat: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>, Array4<f64>, Array4<f64>) {
    let scale = 2.0 / (source.len() + target.len()) as f64;
    let g_source_hat = (source_hat - source) * scale;
    let g_source = -&g_source_hat;
    let g_target_hat = (target_hat - target) * scale;
    let g_target = -&g_target_hat;
    (g_source, g_source_hat, g_target, g_target_hat)
}

// ---------------------------------------------------------------------------
// Difference (orthogonality) loss
// ---------------------------------------------------------------------------

fn domain_difference(shared: &Array2<f64>, private: &Array2<f64>, normalize: bool) -> f64 {
    let cross = if normalize {
        normalize_rows(shared).0.dot(&normalize_rows(private).0.t())
    } else {
        shared.dot(&private.t())
    };
    cross.iter().map(|v| v * v).sum()
}

/// Squared Frobenius norm of the matrix of pairwise shared/private inner
/// products per domain, rows L2-normalized, summed over the two domains.
///
/// Zero exactly when every shared row is orthogonal to every private row in
/// both domains.
pub fn difference_loss(emb: &BatchEmbeddings) -> f64 {
    difference_loss_with_mode(emb, true)
}

/// [`difference_loss`] with the row normalization switchable; the raw mode
/// exists for fidelity experiments and is sensitive to feature norms.
pub fn difference_loss_with_mode(emb: &BatchEmbeddings, normalize: bool) -> f64 {
    assert_eq!(
        emb.shared_source.nrows(),
        emb.private_source.nrows(),
        "source row counts must match"
    );
    assert_eq!(
        emb.shared_target.nrows(),
        emb.private_target.nrows(),
        "target row counts must match"
    );
    domain_difference(&emb.shared_source, &emb.private_source, normalize)
        + domain_difference(&emb.shared_target, &emb.private_target, normalize)
}

fn domain_difference_grad(
    shared: &Array2<f64>,
    private: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (sn, s_norms) = normalize_rows(shared);
    let (pn, p_norms) = normalize_rows(private);
    let cross = sn.dot(&pn.t()); // n_s x n_p Gram matrix of cosines
    // For M = A B^T: d|M|_F^2/dA = 2 M B and d|M|_F^2/dB = 2 M^T A.
    let g_sn = 2.0 * cross.dot(&pn);
    let g_pn = 2.0 * cross.t().dot(&sn);
    (
        normalize_rows_backward(&sn, &s_norms, &g_sn),
        normalize_rows_backward(&pn, &p_norms, &g_pn),
    )
}

/// Gradient of [`difference_loss`] with respect to all four matrices.
pub fn difference_loss_grad(emb: &BatchEmbeddings) -> BatchEmbeddings {
    let (g_ss, g_ps) = domain_difference_grad(&emb.shared_source, &emb.private_source);
    let (g_st, g_pt) = domain_difference_grad(&emb.shared_target, &emb.private_target);
    BatchEmbeddings {
        shared_source: g_ss,
        private_source: g_ps,
        shared_target: g_st,
        private_target: g_pt,
    }
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

/// Weighted sum of the four terms with ablated terms replaced by exact zeros.
pub fn total_loss(
    class: f64,
    ctrs: f64,
    rec: f64,
    diff: f64,
    weights: &LossWeights,
    flags: &AblationFlags,
) -> LossReport {
    let class_loss = if flags.use_class { class } else { 0.0 };
    let ctrs_loss = if flags.use_ctrs { ctrs } else { 0.0 };
    let rec_loss = if flags.use_rec { rec } else { 0.0 };
    let diff_loss = if flags.diff_active() { diff } else { 0.0 };
    LossReport {
        class_loss,
        ctrs_loss,
        rec_loss,
        diff_loss,
        total: class_loss
            + weights.alpha * ctrs_loss
            + weights.beta * rec_loss
            + weights.gamma * diff_loss,
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// A differentiable scalar function of a flat `f64` vector.
pub trait ScalarFn {
    fn dim(&self) -> usize;
    fn value(&self, point: &[f64]) -> f64;
    fn gradient(&self, point: &[f64]) -> Vec<f64>;
}

/// Outcome of one finite-difference gradient check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare the analytic gradient of `f` at `point` with central differences
/// on a random subsample of at least `min_coords` coordinates (all of them
/// when the dimension is smaller). Returns the maximum relative error.
pub fn finite_difference_check(
    f: &dyn ScalarFn,
    point: &[f64],
    epsilon: f64,
    tolerance: f64,
    min_coords: usize,
    rng: &mut impl Rng,
) -> Result<FdReport> {
    assert_eq!(point.len(), f.dim());
    let analytic = f.gradient(point);
    if !analytic.iter().all(|g| g.is_finite()) {
        return Err(ArnError::Numeric(
            "finite_difference_check: analytic gradient is non-finite".into(),
        ));
    }
    let dim = point.len();
    let mut indices: Vec<usize> = (0..dim).collect();
    if dim > min_coords {
        indices.shuffle(rng);
        indices.truncate(min_coords);
    }
    let mut work = point.to_vec();
    let mut max_rel: f64 = 0.0;
    for &i in &indices {
        let orig = work[i];
        work[i] = orig + epsilon;
        let plus = f.value(&work);
        work[i] = orig - epsilon;
        let minus = f.value(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(ArnError::Numeric(
                "finite_difference_check: loss value is non-finite".into(),
            ));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = (numeric.abs() + analytic[i].abs()).max(1e-8);
        max_rel = max_rel.max((numeric - analytic[i]).abs() / denom);
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        coords_checked: indices.len(),
        epsilon,
        tolerance,
        passed: max_rel < tolerance,
    })
}

// ---------------------------------------------------------------------------
// Standard loss check instances
// ---------------------------------------------------------------------------

/// Classification loss as a function of raw logits (softmax applied inside),
/// so finite differences can perturb freely without leaving the simplex.
pub struct ClassificationCheck {
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ScalarFn for ClassificationCheck {
    fn dim(&self) -> usize {
        self.labels.len() * self.classes
    }
    fn value(&self, point: &[f64]) -> f64 {
        let logits =
            Array2::from_shape_vec((self.labels.len(), self.classes), point.to_vec()).unwrap();
        classification_loss(&softmax_rows(&logits), &self.labels)
    }
    fn gradient(&self, point: &[f64]) -> Vec<f64> {
        let logits =
            Array2::from_shape_vec((self.labels.len(), self.classes), point.to_vec()).unwrap();
        let probs = softmax_rows(&logits);
        let gprobs = classification_loss_grad(&probs, &self.labels);
        softmax_backward(&probs, &gprobs).into_raw_vec_and_offset().0
    }
}

/// Contrastive loss over a fixed pair structure as a function of the
/// flattened embedding matrix.
pub struct ContrastiveCheck {
    pub rows: usize,
    pub cols: usize,
    pub pairs: Vec<(usize, usize, bool)>,
    pub margin: f64,
}

impl ContrastiveCheck {
    fn batch(&self, point: &[f64]) -> PairBatch {
        PairBatch {
            embeddings: Array2::from_shape_vec((self.rows, self.cols), point.to_vec()).unwrap(),
            pairs: self.pairs.clone(),
        }
    }

    /// True when some dissimilar pair sits within `gap` of the margin kink
    /// (or of zero distance), where the loss is not differentiable.
    pub fn near_kink(&self, point: &[f64], gap: f64) -> bool {
        let batch = self.batch(point);
        self.pairs.iter().any(|&(i, j, same)| {
            if same {
                return false;
            }
            let d = pair_distance(&batch.embeddings, i, j);
            (d - self.margin).abs() < gap || d < gap
        })
    }
}

impl ScalarFn for ContrastiveCheck {
    fn dim(&self) -> usize {
        self.rows * self.cols
    }
    fn value(&self, point: &[f64]) -> f64 {
        contrastive_loss(&self.batch(point), self.margin)
    }
    fn gradient(&self, point: &[f64]) -> Vec<f64> {
        contrastive_loss_grad(&self.batch(point), self.margin)
            .into_raw_vec_and_offset()
            .0
    }
}

/// Reconstruction loss as a function of `[source | source_hat | target |
/// target_hat]` flattened together, so the check exercises all four inputs.
pub struct ReconstructionCheck {
    pub source_samples: usize,
    pub target_samples: usize,
    pub map_shape: (usize, usize, usize),
}

impl ReconstructionCheck {
    fn unpack(&self, point: &[f64]) -> (Array4<f64>, Array4<f64>, Array4<f64>, Array4<f64>) {
        let (c, h, w) = self.map_shape;
        let s_len = self.source_samples * c * h * w;
        let t_len = self.target_samples * c * h * w;
        let s_dim = (self.source_samples, c, h, w);
        let t_dim = (self.target_samples, c, h, w);
        (
            Array4::from_shape_vec(s_dim, point[..s_len].to_vec()).unwrap(),
            Array4::from_shape_vec(s_dim, point[s_len..2 * s_len].to_vec()).unwrap(),
            Array4::from_shape_vec(t_dim, point[2 * s_len..2 * s_len + t_len].to_vec()).unwrap(),
            Array4::from_shape_vec(t_dim, point[2 * s_len + t_len..].to_vec()).unwrap(),
        )
    }
}

impl ScalarFn for ReconstructionCheck {
    fn dim(&self) -> usize {
        let (c, h, w) = self.map_shape;
        2 * (self.source_samples + self.target_samples) * c * h * w
    }
    fn value(&self, point: &[f64]) -> f64 {
        let (s, sh, t, th) = self.unpack(point);
        reconstruction_loss(&s, &sh, &t, &th).unwrap()
    }
    fn gradient(&self, point: &[f64]) -> Vec<f64> {
        let (s, sh, t, th) = self.unpack(point);
        let (gs, gsh, gt, gth) = reconstruction_loss_grad(&s, &sh, &t, &th);
        gs.iter()
            .chain(gsh.iter())
            .chain(gt.iter())
            .chain(gth.iter())
            .cloned()
            .collect()
    }
}

/// Difference loss as a function of the four stacked batch matrices.
pub struct DifferenceCheck {
    pub source_samples: usize,
    pub target_samples: usize,
    pub dim: usize,
}

impl DifferenceCheck {
    fn unpack(&self, point: &[f64]) -> BatchEmbeddings {
        let s = self.source_samples * self.dim;
        let t = self.target_samples * self.dim;
        let sm =
            |v: &[f64]| Array2::from_shape_vec((self.source_samples, self.dim), v.to_vec()).unwrap();
        let tm =
            |v: &[f64]| Array2::from_shape_vec((self.target_samples, self.dim), v.to_vec()).unwrap();
        BatchEmbeddings {
            shared_source: sm(&point[..s]),
            private_source: sm(&point[s..2 * s]),
            shared_target: tm(&point[2 * s..2 * s + t]),
            private_target: tm(&point[2 * s + t..]),
        }
    }
}

impl ScalarFn for DifferenceCheck {
    fn dim(&self) -> usize {
        2 * (self.source_samples + self.target_samples) * self.dim
    }
    fn value(&self, point: &[f64]) -> f64 {
        difference_loss(&self.unpack(point))
    }
    fn gradient(&self, point: &[f64]) -> Vec<f64> {
        let g = difference_loss_grad(&self.unpack(point));
        g.shared_source
            .iter()
            .chain(g.private_source.iter())
            .chain(g.shared_target.iter())
            .chain(g.private_target.iter())
            .cloned()
            .collect()
    }
}

/// Result of one named loss gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub report: FdReport,
}

/// Run the finite-difference check for all four losses at random `f64`
/// points derived from `seed`.
///
/// `corrupt` deliberately perturbs the analytic gradient of the named loss;
/// it exists so the failure path can be exercised end to end.
pub fn run_loss_gradient_checks(seed: i64, corrupt: Option<&str>) -> Result<Vec<LossCheck>> {
    const EPSILON: f64 = 1e-6;
    const TOLERANCE: f64 = 1e-4;
    const MIN_COORDS: usize = 100;
    let mut rng = crate::rng::derive_stream(seed, "grad-check");
    let mut out = Vec::new();

    struct Corrupted<'a>(&'a dyn ScalarFn);
    impl ScalarFn for Corrupted<'_> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn value(&self, p: &[f64]) -> f64 {
            self.0.value(p)
        }
        fn gradient(&self, p: &[f64]) -> Vec<f64> {
            // Corrupt every coordinate so the check fails no matter which
            // subsample it draws.
            self.0.gradient(p).into_iter().map(|g| g + 1.0).collect()
        }
    }

    let run = |name: &str,
                   f: &dyn ScalarFn,
                   point: &[f64],
                   rng: &mut rand_chacha::ChaCha12Rng|
     -> Result<LossCheck> {
        let report = if corrupt == Some(name) {
            finite_difference_check(&Corrupted(f), point, EPSILON, TOLERANCE, MIN_COORDS, rng)?
        } else {
            finite_difference_check(f, point, EPSILON, TOLERANCE, MIN_COORDS, rng)?
        };
        Ok(LossCheck {
            loss: name.to_string(),
            report,
        })
    };

    // Classification: 8 samples, 13 classes, random logits.
    let class = ClassificationCheck {
        labels: (0..8).map(|i| i % 13).collect(),
        classes: 13,
    };
    let point: Vec<f64> = (0..class.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    out.push(run("class", &class, &point, &mut rng)?);

    // Contrastive: 8 embeddings of dim 16, all pairs, margin 1; nudge the
    // point until no dissimilar pair sits near the hinge kink.
    let labels: Vec<u32> = (0..8).map(|i| (i % 4) as u32).collect();
    let template = PairBatch::from_labels(Array2::zeros((8, 16)), &labels);
    let ctrs = ContrastiveCheck {
        rows: 8,
        cols: 16,
        pairs: template.pairs,
        margin: 1.0,
    };
    let mut point: Vec<f64> = (0..ctrs.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    while ctrs.near_kink(&point, 1e-3) {
        for v in point.iter_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
    }
    out.push(run("ctrs", &ctrs, &point, &mut rng)?);

    // Reconstruction: 3 + 2 samples of 2x3x3 maps.
    let rec = ReconstructionCheck {
        source_samples: 3,
        target_samples: 2,
        map_shape: (2, 3, 3),
    };
    let point: Vec<f64> = (0..rec.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    out.push(run("rec", &rec, &point, &mut rng)?);

    // Difference: 5 + 4 samples of dim 12.
    let diff = DifferenceCheck {
        source_samples: 5,
        target_samples: 4,
        dim: 12,
    };
    let point: Vec<f64> = (0..diff.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    out.push(run("diff", &diff, &point, &mut rng)?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use ndarray::array;

    #[test]
    fn classification_perfect_probs_is_zero() {
        let probs = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(classification_loss(&probs, &[0, 2]), 0.0);
    }

    #[test]
    fn classification_uniform_751_is_ln_751() {
        let k = 751;
        let probs = Array2::from_elem((3, k), 1.0 / k as f64);
        let labels = vec![0, 400, 750];
        let loss = classification_loss(&probs, &labels);
        assert!((loss - (k as f64).ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn classification_mean_reduction() {
        // Rows with true-class probabilities 1.0 and 0.5: mean(-ln 1, -ln 0.5) = ln2/2.
        let probs = array![[1.0, 0.0], [0.5, 0.5]];
        let loss = classification_loss(&probs, &[0, 0]);
        assert!((loss - 2.0_f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn classification_zero_probability_is_clamped() {
        let probs = array![[0.0, 1.0]];
        let loss = classification_loss(&probs, &[0]);
        assert!(loss.is_finite());
        assert!(loss > 0.0);
    }

    fn single_pair(a: Vec<f64>, b: Vec<f64>, same: bool) -> PairBatch {
        let d = a.len();
        let mut m = Array2::zeros((2, d));
        for (k, v) in a.into_iter().enumerate() {
            m[[0, k]] = v;
        }
        for (k, v) in b.into_iter().enumerate() {
            m[[1, k]] = v;
        }
        PairBatch {
            embeddings: m,
            pairs: vec![(0, 1, same)],
        }
    }

    #[test]
    fn contrastive_identical_similar_pair_is_zero() {
        let pairs = single_pair(vec![0.3, -0.4], vec![0.3, -0.4], true);
        assert_eq!(contrastive_loss(&pairs, 1.0), 0.0);
    }

    #[test]
    fn contrastive_distant_dissimilar_pair_is_zero() {
        // D = 2 with margin 1: outside the radius, contributes nothing.
        let pairs = single_pair(vec![0.0, 0.0], vec![2.0, 0.0], false);
        assert_eq!(contrastive_loss(&pairs, 1.0), 0.0);
    }

    #[test]
    fn contrastive_close_dissimilar_pair() {
        // D = 0.5, margin 1 -> (1 - 0.5)^2 = 0.25.
        let pairs = single_pair(vec![0.0, 0.0], vec![0.5, 0.0], false);
        assert!((contrastive_loss(&pairs, 1.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn contrastive_similar_pair_pays_squared_distance() {
        // D = 0.3 -> 0.09.
        let pairs = single_pair(vec![0.0, 0.0], vec![0.0, 0.3], true);
        assert!((contrastive_loss(&pairs, 1.0) - 0.09).abs() < 1e-12);
    }

    #[test]
    fn contrastive_empty_pairs_is_zero() {
        let pairs = PairBatch {
            embeddings: Array2::zeros((2, 3)),
            pairs: vec![],
        };
        assert_eq!(contrastive_loss(&pairs, 1.0), 0.0);
    }

    #[test]
    fn reconstruction_perfect_is_zero() {
        let x = Array4::from_elem((2, 1, 2, 2), 0.7);
        assert_eq!(reconstruction_loss(&x, &x, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_constant_offset() {
        let x = Array4::from_elem((2, 1, 2, 2), 0.25);
        let xh = &x + 0.5;
        let loss = reconstruction_loss(&x, &xh, &x, &xh).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_matches_elementwise_oracle() {
        let mut rng = derive_stream(11, "rec");
        let shape = (3, 2, 4, 4);
        let gen =
            |rng: &mut rand_chacha::ChaCha12Rng| Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let (xs, xsh, xt, xth) = (gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng));
        // Independent oracle: explicit index loops, no iterator sharing.
        let mut sum = 0.0;
        let mut count = 0usize;
        for (a, b) in [(&xs, &xsh), (&xt, &xth)] {
            let (n, c, h, w) = a.dim();
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let d = a[[i, ch, y, x]] - b[[i, ch, y, x]];
                            sum += d * d;
                            count += 1;
                        }
                    }
                }
            }
        }
        let oracle = sum / count as f64;
        let loss = reconstruction_loss(&xs, &xsh, &xt, &xth).unwrap();
        assert!((loss - oracle).abs() < 1e-10);
    }

    #[test]
    fn reconstruction_shape_mismatch_errors() {
        let x = Array4::<f64>::zeros((2, 1, 2, 2));
        let bad = Array4::<f64>::zeros((2, 1, 3, 2));
        assert!(reconstruction_loss(&x, &bad, &x, &x).is_err());
    }

    #[test]
    fn difference_orthogonal_rows_is_zero() {
        let emb = BatchEmbeddings {
            shared_source: array![[1.0, 0.0], [1.0, 0.0]],
            private_source: array![[0.0, 2.0], [0.0, -3.0]],
            shared_target: array![[0.0, 1.0]],
            private_target: array![[5.0, 0.0]],
        };
        assert!(difference_loss(&emb) < 1e-24);
    }

    #[test]
    fn difference_identical_unit_rows_per_domain() {
        // One sample per domain, shared == private == unit vector: 1 + 1 = 2.
        let emb = BatchEmbeddings {
            shared_source: array![[1.0, 0.0]],
            private_source: array![[1.0, 0.0]],
            shared_target: array![[0.0, 1.0]],
            private_target: array![[0.0, 1.0]],
        };
        assert!((difference_loss(&emb) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn difference_n_identical_rows_is_n_squared() {
        // n identical unit rows in both source matrices give n^2; the target
        // matrices are orthogonal so they contribute 0.
        let n = 5;
        let row = [0.6, 0.8];
        let shared = Array2::from_shape_fn((n, 2), |(_, j)| row[j]);
        let private = shared.clone();
        let emb = BatchEmbeddings {
            shared_source: shared.clone(),
            private_source: private.clone(),
            shared_target: array![[1.0, 0.0]],
            private_target: array![[0.0, 1.0]],
        };
        let loss = difference_loss(&emb);
        assert!((loss - (n * n) as f64).abs() < 1e-10, "{loss}");

        // Direct oracle: build H^T H explicitly with loops (rows already unit).
        let mut frob = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let mut m = 0.0;
                for i in 0..n {
                    m += shared[[i, a]] * private[[i, b]];
                }
                frob += m * m;
            }
        }
        assert!((loss - frob).abs() < 1e-10);
    }

    #[test]
    fn difference_is_scale_invariant_after_normalization() {
        let mut rng = derive_stream(12, "diff");
        let gen = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| {
            Array2::from_shape_fn((n, 6), |_| rng.gen_range(-1.0..1.0))
        };
        let emb = BatchEmbeddings {
            shared_source: gen(&mut rng, 4),
            private_source: gen(&mut rng, 4),
            shared_target: gen(&mut rng, 3),
            private_target: gen(&mut rng, 3),
        };
        let scaled = BatchEmbeddings {
            shared_source: &emb.shared_source * 7.5,
            private_source: emb.private_source.clone(),
            shared_target: &emb.shared_target * 0.01,
            private_target: emb.private_target.clone(),
        };
        let a = difference_loss(&emb);
        let b = difference_loss(&scaled);
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
        // The raw mode is sensitive to scale.
        let raw_a = difference_loss_with_mode(&emb, false);
        let raw_b = difference_loss_with_mode(&scaled, false);
        assert!((raw_a - raw_b).abs() > 1e-6);
    }

    #[test]
    fn total_loss_paper_weights() {
        let weights = LossWeights::default();
        let flags = AblationFlags::default();
        let report = total_loss(1.0, 1.0, 1.0, 1.0, &weights, &flags);
        assert!((report.total - 1503.01).abs() < 1e-9);
    }

    #[test]
    fn total_loss_ablation_zeroes_terms() {
        let weights = LossWeights::default();
        let only_class = AblationFlags {
            use_class: true,
            use_ctrs: false,
            use_private: false,
            use_rec: false,
            use_diff: false,
        };
        let report = total_loss(0.7, 3.0, 2.0, 5.0, &weights, &only_class);
        assert_eq!(report.total, 0.7);
        assert_eq!(report.ctrs_loss, 0.0);
        assert_eq!(report.rec_loss, 0.0);
        assert_eq!(report.diff_loss, 0.0);
    }

    #[test]
    fn total_loss_zero_weights_reduce_to_class() {
        let weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            margin: 1.0,
        };
        let report = total_loss(0.7, 3.0, 2.0, 5.0, &weights, &AblationFlags::default());
        assert_eq!(report.total, 0.7);
    }

    #[test]
    fn diff_inactive_when_private_disabled() {
        let flags = AblationFlags {
            use_private: false,
            use_diff: true,
            ..AblationFlags::default()
        };
        let report = total_loss(1.0, 1.0, 1.0, 1.0, &LossWeights::default(), &flags);
        assert_eq!(report.diff_loss, 0.0);
    }

    #[test]
    fn all_four_gradient_checks_pass() {
        for seed in 0..3 {
            for check in run_loss_gradient_checks(seed, None).unwrap() {
                assert!(
                    check.report.passed,
                    "{} failed: {:?}",
                    check.loss, check.report
                );
            }
        }
    }

    #[test]
    fn corrupted_gradient_fails_the_named_check() {
        let checks = run_loss_gradient_checks(0, Some("rec")).unwrap();
        let rec = checks.iter().find(|c| c.loss == "rec").unwrap();
        assert!(!rec.report.passed);
        for other in checks.iter().filter(|c| c.loss != "rec") {
            assert!(other.report.passed);
        }
    }

    #[test]
    fn reports_name_non_finite_terms() {
        let report = LossReport {
            class_loss: 0.0,
            ctrs_loss: f64::NAN,
            rec_loss: 0.0,
            diff_loss: 0.0,
            total: f64::NAN,
        };
        assert_eq!(report.non_finite_term(), Some("ctrs"));
    }
}
