//! Training objectives over category and relation predictions.
//!
//! Every relation loss is a (re-weighted) cross-entropy on relation
//! distributions held in a [`RelationMatrix`]. Each returns a [`LossTerm`]
//! carrying the value and `∂value/∂(relation logits)` in the matrix's layout.
//! Pseudo-labels and selection gates are computed from the predictions but
//! treated as constants: they contribute no gradient.
//!
//! Unlabeled losses are split into a selection step and an evaluation step so
//! callers can hold a selection fixed (gradient checks, diagnostics).

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{argmax, Matrix, RelationDistribution, RelationMatrix};
use crate::taxonomy::{RelationIndex, RelationWeights};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("weight vector has {got} levels, relations have {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("relation level {level} out of range for R = {levels}")]
    Level { level: usize, levels: usize },
    #[error("non-finite loss component {0}")]
    NonFinite(&'static str),
    #[error("invalid pseudo-label config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    /// Minimum max-probability for a relation pseudo-label.
    pub confidence_threshold: f64,
    /// Required gap between relation expectations for label transfer.
    pub expectation_margin: f64,
    /// Ordered unlabeled triples sampled per step for triplet consistency.
    pub triplet_samples: usize,
    /// Label-transfer triplets are enumerated exhaustively up to this many,
    /// sampled (this many, with replacement) beyond it.
    pub transfer_cap: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { confidence_threshold: 0.95, expectation_margin: 1.0, triplet_samples: 4096, transfer_cap: 1 << 18 }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(LossError::Config(format!("threshold {} outside [0, 1]", self.confidence_threshold)));
        }
        if !(self.expectation_margin > 0.0) {
            return Err(LossError::Config(format!("margin {} must be positive", self.expectation_margin)));
        }
        Ok(())
    }
}

/// Loss value plus its gradient with respect to the logits that produced the
/// distributions it read.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm<T> {
    pub value: T,
    /// Terms that entered the mean.
    pub selected: usize,
    /// Selected terms per target relation level.
    pub histogram: Vec<usize>,
    pub grad: Vec<T>,
}

impl<T: Scalar> LossTerm<T> {
    fn empty(levels: usize, grad_len: usize) -> Self {
        Self { value: T::zero(), selected: 0, histogram: vec![0; levels], grad: vec![T::zero(); grad_len] }
    }
}

/// Accumulates `w · (−ln r[target])` terms and their logit gradients.
struct CeAccumulator<'a, T> {
    matrix: &'a RelationMatrix<T>,
    sum: T,
    term: LossTerm<T>,
}

impl<'a, T: Scalar> CeAccumulator<'a, T> {
    fn new(matrix: &'a RelationMatrix<T>) -> Self {
        Self { matrix, sum: T::zero(), term: LossTerm::empty(matrix.levels(), matrix.as_slice().len()) }
    }

    fn add(&mut self, r: usize, c: usize, target: usize, weight: T) {
        let o = self.matrix.offset(r, c);
        let dist = self.matrix.get(r, c);
        let pt = dist[target];
        self.sum += -weight * pt.safe_ln();
        // d(−ln softmax(z)[t])/dz = softmax(z) − e_t; zero under the floor
        if pt > T::prob_floor() {
            for (n, (g, &p)) in self.term.grad[o..o + dist.len()].iter_mut().zip(dist).enumerate() {
                let onehot = if n == target { T::one() } else { T::zero() };
                *g += weight * (p - onehot);
            }
        }
        self.term.selected += 1;
        self.term.histogram[target] += 1;
    }

    /// Mean over the added terms; zero when none were added.
    fn finish(mut self) -> LossTerm<T> {
        if self.term.selected > 0 {
            let inv = T::one() / T::of_usize(self.term.selected);
            self.term.value = self.sum * inv;
            self.term.grad.iter_mut().for_each(|g| *g *= inv);
        }
        self.term
    }
}

fn check_weights(weights: &RelationWeights, levels: usize) -> Result<(), LossError> {
    if weights.len() != levels {
        return Err(LossError::WeightLength { expected: levels, got: weights.len() });
    }
    Ok(())
}

/// `−ln p[y]` with the probability floor.
pub fn category_ce<T: Scalar>(p: &[T], y: usize) -> T {
    -p[y].safe_ln()
}

/// Mean category cross-entropy over `(row, class)` targets of a probability
/// matrix. The gradient is laid out like `probs` (rows × C) and is taken with
/// respect to the category logits.
pub fn category_ce_batch<T: Scalar>(probs: &Matrix<T>, targets: &[(usize, usize)]) -> LossTerm<T> {
    let c = probs.cols();
    let mut term = LossTerm::empty(c, probs.rows() * c);
    if targets.is_empty() {
        return term;
    }
    let inv = T::one() / T::of_usize(targets.len());
    for &(row, y) in targets {
        let p = probs.row(row);
        term.value += category_ce(p, y) * inv;
        if p[y] > T::prob_floor() {
            for (k, (g, &pk)) in term.grad[row * c..(row + 1) * c].iter_mut().zip(p).enumerate() {
                let onehot = if k == y { T::one() } else { T::zero() };
                *g += (pk - onehot) * inv;
            }
        }
        term.selected += 1;
        term.histogram[y] += 1;
    }
    term
}

/// Re-weighted relation cross-entropy over labeled pairs `(row, col, s)`;
/// mean of `w_s · (−ln r[s])`.
pub fn supervised_relation_loss<T: Scalar>(
    matrix: &RelationMatrix<T>,
    pairs: &[(usize, usize, RelationIndex)],
    weights: &RelationWeights,
) -> Result<LossTerm<T>, LossError> {
    check_weights(weights, matrix.levels())?;
    let mut acc = CeAccumulator::new(matrix);
    for &(r, c, s) in pairs {
        if s.0 >= matrix.levels() {
            return Err(LossError::Level { level: s.0, levels: matrix.levels() });
        }
        acc.add(r, c, s.0, T::of(weights.get(s.0)));
    }
    Ok(acc.finish())
}

/// Value-only form over explicit `(r, s)` pairs.
pub fn supervised_relation_loss_pairs<T: Scalar>(
    pairs: &[(RelationDistribution<T>, RelationIndex)],
    weights: &RelationWeights,
) -> Result<T, LossError> {
    let Some(first) = pairs.first() else { return Ok(T::zero()) };
    let levels = first.0.len();
    let mut data = Vec::with_capacity(pairs.len() * levels);
    for (r, _) in pairs {
        if r.len() != levels {
            return Err(LossError::WeightLength { expected: levels, got: r.len() });
        }
        data.extend_from_slice(r.as_slice());
    }
    let matrix = RelationMatrix::from_dense((0..pairs.len()).collect(), vec![0], levels, data);
    let idx: Vec<_> = pairs.iter().enumerate().map(|(i, (_, s))| (i, 0, *s)).collect();
    Ok(supervised_relation_loss(&matrix, &idx, weights)?.value)
}

/// `Σ_n n · r[n]`, levels indexed from zero.
pub fn relation_expectation<T: Scalar>(r: &[T]) -> T {
    r.iter().enumerate().fold(T::zero(), |acc, (n, &p)| acc + T::of_usize(n) * p)
}

/// A pseudo-labeled pair `(row, col) → target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSelection {
    pub row: usize,
    pub col: usize,
    pub target: usize,
}

/// A selected triplet: train the relation at `(row, col)` toward `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSelection {
    pub row: usize,
    pub col: usize,
    pub target: usize,
}

/// Pairs of distinct samples whose most probable relation exceeds the
/// confidence threshold (strictly); the argmax becomes the pseudo-label.
pub fn select_confident_pairs<T: Scalar>(matrix: &RelationMatrix<T>, cfg: &PseudoLabelConfig) -> Vec<PairSelection> {
    let t = T::of(cfg.confidence_threshold);
    let mut out = Vec::new();
    for r in 0..matrix.n_rows() {
        for c in 0..matrix.n_cols() {
            if matrix.rows[r] == matrix.cols[c] {
                continue;
            }
            let dist = matrix.get(r, c);
            let best = argmax(dist);
            if dist[best] > t {
                out.push(PairSelection { row: r, col: c, target: best });
            }
        }
    }
    out
}

/// Applies fixed pair pseudo-labels: mean of `w_ŝ · (−ln r[ŝ])`.
pub fn pair_pseudo_loss<T: Scalar>(
    matrix: &RelationMatrix<T>,
    selected: &[PairSelection],
    weights: &RelationWeights,
) -> Result<LossTerm<T>, LossError> {
    check_weights(weights, matrix.levels())?;
    let mut acc = CeAccumulator::new(matrix);
    for s in selected {
        acc.add(s.row, s.col, s.target, T::of(weights.get(s.target)));
    }
    Ok(acc.finish())
}

/// Relation pseudo-labeling on all ordered pairs of a square unlabeled
/// relation matrix (diagonal excluded).
pub fn naive_relation_pseudo_loss<T: Scalar>(
    matrix: &RelationMatrix<T>,
    cfg: &PseudoLabelConfig,
    weights: &RelationWeights,
) -> Result<LossTerm<T>, LossError> {
    let selected = select_confident_pairs(matrix, cfg);
    pair_pseudo_loss(matrix, &selected, weights)
}

/// Ordered triples of distinct indices in `0..m`: all of them when there are
/// at most `budget`, else `budget` drawn without replacement.
pub fn ordered_triples<R: Rng + ?Sized>(m: usize, budget: usize, rng: &mut R) -> Vec<(usize, usize, usize)> {
    if m < 3 {
        return Vec::new();
    }
    let total = m * (m - 1) * (m - 2);
    let decode = |x: usize| {
        let j = x / ((m - 1) * (m - 2));
        let rest = x % ((m - 1) * (m - 2));
        let mut k = rest / (m - 2);
        let mut l = rest % (m - 2);
        if k >= j {
            k += 1;
        }
        let (lo, hi) = if j < k { (j, k) } else { (k, j) };
        if l >= lo {
            l += 1;
        }
        if l >= hi {
            l += 1;
        }
        (j, k, l)
    };
    if total <= budget {
        (0..total).map(decode).collect()
    } else {
        let mut picks = index::sample(rng, total, budget).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(decode).collect()
    }
}

/// Triplet consistency on a square unlabeled relation matrix: for each triple
/// `(j, k, l)` with `ŝ(j,k) > ŝ(j,l)`, the relation `(j, l)` is trained toward
/// `ŝ(k, l)`.
pub fn select_consistent_triplets<T: Scalar>(
    matrix: &RelationMatrix<T>,
    triples: &[(usize, usize, usize)],
) -> Vec<TripletSelection> {
    let hat = |r: usize, c: usize| argmax(matrix.get(r, c));
    triples
        .iter()
        .filter(|&&(j, k, l)| hat(j, k) > hat(j, l))
        .map(|&(j, k, l)| TripletSelection { row: j, col: l, target: hat(k, l) })
        .collect()
}

pub fn triplet_selection_loss<T: Scalar>(
    matrix: &RelationMatrix<T>,
    selected: &[TripletSelection],
    weights: &RelationWeights,
) -> Result<LossTerm<T>, LossError> {
    check_weights(weights, matrix.levels())?;
    let mut acc = CeAccumulator::new(matrix);
    for s in selected {
        acc.add(s.row, s.col, s.target, T::of(weights.get(s.target)));
    }
    Ok(acc.finish())
}

pub fn triplet_consistency_loss<T: Scalar, R: Rng + ?Sized>(
    matrix: &RelationMatrix<T>,
    weights: &RelationWeights,
    cfg: &PseudoLabelConfig,
    rng: &mut R,
) -> Result<LossTerm<T>, LossError> {
    let triples = ordered_triples(matrix.n_rows(), cfg.triplet_samples, rng);
    let selected = select_consistent_triplets(matrix, &triples);
    triplet_selection_loss(matrix, &selected, weights)
}

/// Label-transfer triplets `(u, k, l)`: unlabeled row `u`, labeled columns
/// `k ≠ l`. Enumerated when `rows · cols²` fits under the cap, else sampled.
pub fn transfer_triples<R: Rng + ?Sized>(
    unlabeled: usize,
    labeled: usize,
    cap: usize,
    rng: &mut R,
) -> Vec<(usize, usize, usize)> {
    if labeled < 2 || unlabeled == 0 {
        return Vec::new();
    }
    if unlabeled * labeled * labeled <= cap {
        let mut out = Vec::with_capacity(unlabeled * labeled * (labeled - 1));
        for u in 0..unlabeled {
            for k in 0..labeled {
                for l in 0..labeled {
                    if k != l {
                        out.push((u, k, l));
                    }
                }
            }
        }
        out
    } else {
        (0..cap)
            .map(|_| {
                let u = rng.random_range(0..unlabeled);
                let k = rng.random_range(0..labeled);
                let mut l = rng.random_range(0..labeled - 1);
                if l >= k {
                    l += 1;
                }
                (u, k, l)
            })
            .collect()
    }
}

/// Gate for label transfer: `E(r(u,k)) − E(r(u,l)) ≥ margin`, i.e. the
/// unlabeled sample is predicted to sit strictly closer to `k` than to `l`.
/// When the gate holds, every cladogram forces `S(u,l) = S(k,l)`, so the
/// ground-truth labeled relation `s(k,l)` becomes the target for `r(u,l)`.
///
/// `matrix` rows are unlabeled samples, columns labeled samples;
/// `labeled_relations[k][l]` holds the ground-truth `s(k,l)`.
pub fn select_label_transfer<T: Scalar>(
    matrix: &RelationMatrix<T>,
    labeled_relations: &[Vec<usize>],
    triples: &[(usize, usize, usize)],
    cfg: &PseudoLabelConfig,
) -> Vec<TripletSelection> {
    let margin = T::of(cfg.expectation_margin);
    let expectations: Vec<T> = (0..matrix.n_rows())
        .flat_map(|u| (0..matrix.n_cols()).map(move |c| (u, c)))
        .map(|(u, c)| relation_expectation(matrix.get(u, c)))
        .collect();
    let e = |u: usize, c: usize| expectations[u * matrix.n_cols() + c];
    triples
        .iter()
        .filter(|&&(u, k, l)| e(u, k) - e(u, l) >= margin)
        .map(|&(u, k, l)| TripletSelection { row: u, col: l, target: labeled_relations[k][l] })
        .collect()
}

pub fn label_transfer_loss<T: Scalar, R: Rng + ?Sized>(
    matrix: &RelationMatrix<T>,
    labeled_relations: &[Vec<usize>],
    weights: &RelationWeights,
    cfg: &PseudoLabelConfig,
    rng: &mut R,
) -> Result<LossTerm<T>, LossError> {
    if matrix.n_cols() < 2 {
        log::warn!("label transfer needs at least two labeled samples, got {}", matrix.n_cols());
        return Ok(LossTerm::empty(matrix.levels(), matrix.as_slice().len()));
    }
    let triples = transfer_triples(matrix.n_rows(), matrix.n_cols(), cfg.transfer_cap, rng);
    let selected = select_label_transfer(matrix, labeled_relations, &triples, cfg);
    triplet_selection_loss(matrix, &selected, weights)
}

/// Per-step loss summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_r: f64,
    pub l_u: f64,
    pub total: f64,
    pub selected_pair_count: usize,
    pub selected_triplet_count: usize,
    pub selection_histogram: Vec<usize>,
}

/// Unweighted sum of the three losses.
pub fn total_loss(l_c: f64, l_r: f64, l_u: f64) -> Result<LossReport, LossError> {
    for (name, v) in [("l_c", l_c), ("l_r", l_r), ("l_u", l_u)] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(LossReport {
        l_c,
        l_r,
        l_u,
        total: l_c + l_r + l_u,
        selected_pair_count: 0,
        selected_triplet_count: 0,
        selection_histogram: Vec::new(),
    })
}
