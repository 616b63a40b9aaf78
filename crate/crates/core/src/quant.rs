//! Entropy-constrained ternary assignment.
//!
//! Each quantized layer carries three centroids `{w_n, 0, w_p}`. Elements are
//! assigned by minimizing, per element and candidate centroid,
//!
//! ```text
//! cost(c) = (W_ij − w_c)² − λ · log₂(P_c)
//! ```
//!
//! where `P_c` is the fraction of the layer currently assigned to centroid
//! `c`, floored at `1/(2·N)` so emptied clusters keep a finite information
//! cost and can be re-populated. Raising `λ` makes high-probability clusters
//! (typically the zero cluster) cheaper, which is what drives sparsification.
//! `λ` itself is scheduled per layer as `γ · δ · λ_max`: a global intensity,
//! a size-proportional per-layer factor, and the per-layer boundary value at
//! which a sign cluster would empty and the layer would collapse to binary.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest magnitude the nonzero centroids may take; keeps `w_n < 0 < w_p`
/// semantics during training updates.
pub const CENTROID_EPS: f32 = 1e-8;

/// Bracketing cap for the binarization boundary search.
pub const LAMBDA_MAX_CAP: f64 = (1u64 << 20) as f64;

/// Relative precision of the binarization boundary bisection.
pub const LAMBDA_MAX_REL_PRECISION: f64 = 1e-3;

/// Iteration cap for the assignment/statistics fixed point.
pub const FIXED_POINT_CAP: usize = 10;

/// Ternary assignment label. Ordering of the enum is also the tie-break
/// priority after `Zero` (see [`assign`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Neg,
    Zero,
    Pos,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Neg, Label::Zero, Label::Pos];

    /// Index into `[counts/probs/costs]` arrays: n=0, 0=1, p=2.
    pub fn index(self) -> usize {
        match self {
            Label::Neg => 0,
            Label::Zero => 1,
            Label::Pos => 2,
        }
    }
}

/// Per-layer centroid values; the zero centroid is fixed and not stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CentroidSet {
    w_n: f32,
    w_p: f32,
}

impl CentroidSet {
    /// Validating constructor: `w_n ≤ −ε` and `w_p ≥ ε`.
    pub fn new(w_n: f32, w_p: f32) -> Result<Self> {
        if !w_n.is_finite() || !w_p.is_finite() {
            return Err(Error::NonFinite("centroid values"));
        }
        if w_n > -CENTROID_EPS || w_p < CENTROID_EPS {
            return Err(Error::InvalidConfig(format!(
                "centroids must satisfy w_n ≤ -{CENTROID_EPS} and w_p ≥ {CENTROID_EPS}, got ({w_n}, {w_p})"
            )));
        }
        Ok(CentroidSet { w_n, w_p })
    }

    /// Clamp arbitrary values into the valid sign ranges. Used by training
    /// updates, which may otherwise push a centroid across zero.
    pub fn clamped(w_n: f32, w_p: f32) -> Self {
        CentroidSet {
            w_n: w_n.min(-CENTROID_EPS),
            w_p: w_p.max(CENTROID_EPS),
        }
    }

    pub fn w_n(&self) -> f32 {
        self.w_n
    }

    pub fn w_p(&self) -> f32 {
        self.w_p
    }

    /// Centroid value selected by a label.
    pub fn value(&self, label: Label) -> f32 {
        match label {
            Label::Neg => self.w_n,
            Label::Zero => 0.0,
            Label::Pos => self.w_p,
        }
    }
}

/// Per-element labels for one layer; same element count (and implied layout)
/// as the layer's weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    labels: Vec<Label>,
}

impl AssignmentMatrix {
    pub fn new(labels: Vec<Label>) -> Self {
        AssignmentMatrix { labels }
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Counts in `[n, 0, p]` order.
    pub fn counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for &l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    /// Fraction of zero labels.
    pub fn sparsity(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.counts()[Label::Zero.index()] as f64 / self.labels.len() as f64
    }

    /// Materialize the quantized weight values for these labels.
    pub fn materialize(&self, centroids: &CentroidSet, shape: &[usize]) -> Result<Tensor> {
        let data = self.labels.iter().map(|&l| centroids.value(l)).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

/// Cluster occupancy counts and floored probabilities, `[n, 0, p]` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterStats {
    pub counts: [usize; 3],
    pub probs: [f64; 3],
    pub total: usize,
}

impl ClusterStats {
    /// Probability floor `1/(2·N)`.
    pub fn floor(total: usize) -> f64 {
        1.0 / (2.0 * total as f64)
    }
}

/// Exact counts plus probabilities `max(count/total, 1/(2·total))`.
pub fn cluster_stats(assign: &AssignmentMatrix) -> ClusterStats {
    let counts = assign.counts();
    let total = assign.len();
    let floor = ClusterStats::floor(total);
    let mut probs = [0.0f64; 3];
    for i in 0..3 {
        probs[i] = (counts[i] as f64 / total as f64).max(floor);
    }
    ClusterStats { counts, probs, total }
}

/// Per-centroid, per-element assignment costs; logically `3 × shape(W)`.
#[derive(Debug, Clone)]
pub struct CostTensor {
    costs: Vec<[f64; 3]>,
}

impl CostTensor {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    /// Costs of one element in `[n, 0, p]` order.
    pub fn element(&self, i: usize) -> [f64; 3] {
        self.costs[i]
    }
}

/// Centroid initialization from the sign-partitioned means of the weights.
///
/// The mean of the positive elements seeds `w_p` and the mean of the negative
/// elements seeds `w_n`; a side with no mass falls back to `±ε`. An all-zero
/// tensor has no usable signal and is rejected.
pub fn init_centroids(weights: &Tensor) -> Result<CentroidSet> {
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0f64, 0usize, 0.0f64, 0usize);
    for &v in weights.data() {
        if v > 0.0 {
            pos_sum += v as f64;
            pos_n += 1;
        } else if v < 0.0 {
            neg_sum += v as f64;
            neg_n += 1;
        }
    }
    if pos_n == 0 && neg_n == 0 {
        return Err(Error::DegenerateInit(
            "all-zero tensor has no sign clusters to seed centroids".into(),
        ));
    }
    let w_p = if pos_n > 0 {
        ((pos_sum / pos_n as f64) as f32).max(CENTROID_EPS)
    } else {
        CENTROID_EPS
    };
    let w_n = if neg_n > 0 {
        ((neg_sum / neg_n as f64) as f32).min(-CENTROID_EPS)
    } else {
        -CENTROID_EPS
    };
    CentroidSet::new(w_n, w_p)
}

/// Assignment cost `(W_ij − w_c)² − λ·log₂(P_c)` for every element and
/// centroid. Probabilities must already be floored (strictly positive).
pub fn assignment_cost(
    weights: &Tensor,
    centroids: &CentroidSet,
    stats: &ClusterStats,
    lambda: f64,
) -> CostTensor {
    let info = [
        -lambda * stats.probs[0].log2(),
        -lambda * stats.probs[1].log2(),
        -lambda * stats.probs[2].log2(),
    ];
    let values = [centroids.w_n() as f64, 0.0, centroids.w_p() as f64];
    let costs = weights
        .data()
        .iter()
        .map(|&w| {
            let w = w as f64;
            let mut row = [0.0f64; 3];
            for c in 0..3 {
                let d = w - values[c];
                row[c] = d * d + info[c];
            }
            row
        })
        .collect();
    CostTensor { costs }
}

/// Elementwise argmin over the three costs. Ties go to the zero centroid
/// first, then to the negative one.
pub fn assign(cost: &CostTensor) -> AssignmentMatrix {
    let labels = cost
        .costs
        .iter()
        .map(|row| {
            // Priority order encodes the tie-break: a later candidate must be
            // strictly cheaper to win.
            let mut best = Label::Zero;
            let mut best_cost = row[Label::Zero.index()];
            for cand in [Label::Neg, Label::Pos] {
                if row[cand.index()] < best_cost {
                    best = cand;
                    best_cost = row[cand.index()];
                }
            }
            best
        })
        .collect();
    AssignmentMatrix::new(labels)
}

/// Size-proportional per-layer factors `δ = N_l / max_k N_k` from quantized
/// layer element counts.
pub fn compute_delta(layer_elements: &[usize]) -> Result<Vec<f64>> {
    if layer_elements.is_empty() {
        return Err(Error::InvalidConfig("delta needs at least one quantized layer".into()));
    }
    if layer_elements.contains(&0) {
        return Err(Error::InvalidConfig("quantized layers must be non-empty".into()));
    }
    let max = *layer_elements.iter().max().unwrap() as f64;
    Ok(layer_elements.iter().map(|&n| n as f64 / max).collect())
}

/// Binarization boundary of one layer, possibly truncated at the bracketing
/// cap when no finite `λ` empties a sign cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaMax {
    pub value: f64,
    pub capped: bool,
}

fn sign_cluster_empties(weights: &Tensor, centroids: &CentroidSet, lambda: f64) -> bool {
    let (_, stats) = ec2t_fixed_point(weights, centroids, lambda);
    stats.counts[Label::Neg.index()] == 0 || stats.counts[Label::Pos.index()] == 0
}

/// Smallest `λ ≥ 0` at which the iterated assignment empties one of the two
/// sign clusters, i.e. where the ternary layer would collapse to binary.
///
/// Found by exponential bracketing from `λ = 1` followed by bisection to a
/// relative precision of `1e-3`. If the layer is already binary at `λ = 0`
/// the boundary is 0; if no bracket is found below `2²⁰` the cap is returned
/// with `capped` set.
pub fn compute_lambda_max(weights: &Tensor, centroids: &CentroidSet) -> LambdaMax {
    if sign_cluster_empties(weights, centroids, 0.0) {
        return LambdaMax { value: 0.0, capped: false };
    }
    let mut lo;
    let mut hi;
    if sign_cluster_empties(weights, centroids, 1.0) {
        hi = 1.0;
        lo = 0.5;
        let mut halvings = 0;
        while sign_cluster_empties(weights, centroids, lo) {
            hi = lo;
            lo /= 2.0;
            halvings += 1;
            if halvings > 80 {
                // The flip threshold is indistinguishable from zero.
                lo = 0.0;
                break;
            }
        }
    } else {
        lo = 1.0;
        hi = 2.0;
        while !sign_cluster_empties(weights, centroids, hi) {
            lo = hi;
            hi *= 2.0;
            if hi > LAMBDA_MAX_CAP {
                return LambdaMax { value: LAMBDA_MAX_CAP, capped: true };
            }
        }
    }
    // Invariant: empties at hi, does not at lo.
    while hi - lo > LAMBDA_MAX_REL_PRECISION * hi {
        let mid = 0.5 * (lo + hi);
        if sign_cluster_empties(weights, centroids, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    LambdaMax { value: hi, capped: false }
}

/// Assignment procedure selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizeMode {
    /// Entropy-constrained assignment iterated with statistics updates.
    Ec2t,
    /// Magnitude thresholding: zero where `|W_ij| ≤ t·max|W|`, sign otherwise.
    TtqThreshold,
}

fn ec2t_fixed_point(
    weights: &Tensor,
    centroids: &CentroidSet,
    lambda: f64,
) -> (AssignmentMatrix, ClusterStats) {
    // Initial statistics come from the nearest-neighbor (λ=0) assignment.
    let zero_stats = ClusterStats {
        counts: [0; 3],
        probs: [1.0; 3],
        total: weights.len(),
    };
    let mut current = assign(&assignment_cost(weights, centroids, &zero_stats, 0.0));
    let mut stats = cluster_stats(&current);
    for _ in 0..FIXED_POINT_CAP {
        let next = assign(&assignment_cost(weights, centroids, &stats, lambda));
        let converged = next == current;
        current = next;
        stats = cluster_stats(&current);
        if converged {
            break;
        }
    }
    (current, stats)
}

/// Quantize one layer and report the resulting cluster statistics.
///
/// In `Ec2t` mode the assignment and statistics are alternated to a fixed
/// point (capped at [`FIXED_POINT_CAP`] iterations, last iterate accepted).
/// In `TtqThreshold` mode, elements within `threshold·max|W|` of zero get the
/// zero label and the rest follow their sign; `threshold` must be in `[0, 1)`.
pub fn quantize_layer(
    weights: &Tensor,
    centroids: &CentroidSet,
    lambda: f64,
    mode: QuantizeMode,
    threshold: f64,
) -> Result<(AssignmentMatrix, ClusterStats)> {
    match mode {
        QuantizeMode::Ec2t => {
            if lambda < 0.0 || !lambda.is_finite() {
                return Err(Error::InvalidConfig(format!("lambda must be finite and ≥ 0, got {lambda}")));
            }
            Ok(ec2t_fixed_point(weights, centroids, lambda))
        }
        QuantizeMode::TtqThreshold => {
            if !(0.0..1.0).contains(&threshold) {
                return Err(Error::InvalidConfig(format!(
                    "ttq threshold must be in [0, 1), got {threshold}"
                )));
            }
            let max_abs = weights.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            let cut = (threshold as f32) * max_abs;
            let labels = weights
                .data()
                .iter()
                .map(|&v| {
                    if v.abs() <= cut {
                        Label::Zero
                    } else if v > 0.0 {
                        Label::Pos
                    } else {
                        Label::Neg
                    }
                })
                .collect();
            let assignment = AssignmentMatrix::new(labels);
            let stats = cluster_stats(&assignment);
            Ok((assignment, stats))
        }
    }
}

/// Per-layer entries of the sparsification schedule.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LayerLambda {
    pub delta: f64,
    pub lambda_max: LambdaMax,
    pub lambda: f64,
}

/// Global schedule state: `λ_l = γ · δ_l · λ_max,l` over the quantized layers.
#[derive(Debug, Clone, Serialize)]
pub struct LambdaState {
    pub gamma: f64,
    pub layers: Vec<LayerLambda>,
}

/// Compute the full schedule for a set of quantized layers.
pub fn lambda_schedule(gamma: f64, layers: &[(&Tensor, &CentroidSet)]) -> Result<LambdaState> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!("gamma must be finite and ≥ 0, got {gamma}")));
    }
    let elements: Vec<usize> = layers.iter().map(|(t, _)| t.len()).collect();
    let deltas = compute_delta(&elements)?;
    let per_layer = layers
        .iter()
        .zip(deltas)
        .map(|((weights, centroids), delta)| {
            let lambda_max = compute_lambda_max(weights, centroids);
            LayerLambda {
                delta,
                lambda_max,
                lambda: gamma * delta * lambda_max.value,
            }
        })
        .collect();
    Ok(LambdaState {
        gamma,
        layers: per_layer,
    })
}
