//! Dense differentiable compute: a tanh perceptron feature extractor, a
//! softmax category head, the bilinear relation head, hand-derived
//! reverse-mode gradients, and the optimizer.

mod graph;
mod matrix;
mod model;
mod optim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

pub use graph::{BackwardBuffer, BatchForward, Route};
pub use matrix::{dot, Matrix};
pub use model::{log_softmax, softmax, softmax_inplace, Dense, ModelParams, ModelShape};
pub use optim::{cosine_lr, sgd_momentum_step, sgd_momentum_step_grouped, SgdConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid optimizer setting: {0}")]
    Optimizer(String),
}

fn check_distribution<T: Scalar>(p: &[T], what: &str) -> Result<(), NumericsError> {
    if p.is_empty() {
        return Err(NumericsError::Distribution(format!("empty {what}")));
    }
    if p.iter().any(|&x| !x.is_finite() || x < T::zero()) {
        return Err(NumericsError::Distribution(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().map(|x| x.as_f64()).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(NumericsError::Distribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Length-`C` category probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CategoryDistribution<T>(Vec<T>);

impl<T: Scalar> CategoryDistribution<T> {
    pub fn new(p: Vec<T>) -> Result<Self, NumericsError> {
        check_distribution(&p, "category distribution")?;
        Ok(Self(p))
    }

    pub fn one_hot(len: usize, k: usize) -> Self {
        let mut v = vec![T::zero(); len];
        v[k] = T::one();
        Self(v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Length-`R` relation probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RelationDistribution<T>(Vec<T>);

impl<T: Scalar> RelationDistribution<T> {
    pub fn new(r: Vec<T>) -> Result<Self, NumericsError> {
        check_distribution(&r, "relation distribution")?;
        Ok(Self(r))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Argmax with ties broken toward the lower level.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Category distribution for a single input vector.
pub fn category_forward<T: Scalar>(params: &ModelParams<T>, x: &[T]) -> Result<CategoryDistribution<T>, NumericsError> {
    if x.len() != params.input_dim() {
        return Err(NumericsError::Dimension { expected: params.input_dim(), got: x.len() });
    }
    let probs = params.predict(&Matrix::from_vec(1, x.len(), x.to_vec()))?;
    if !probs.all_finite() {
        return Err(NumericsError::NonFinite { op: "category_forward".into() });
    }
    Ok(CategoryDistribution(probs.row(0).to_vec()))
}

/// `softmax(Σ_{a,b} p_i[a] p_j[b] w_t[a,b,:])`, contracted as
/// `(p_iᵀ W) · p_j`. Order-sensitive in `(p_i, p_j)`.
pub fn relation_forward<T: Scalar>(
    p_i: &CategoryDistribution<T>,
    p_j: &CategoryDistribution<T>,
    transfer: &Matrix<T>,
    levels: usize,
) -> Result<RelationDistribution<T>, NumericsError> {
    let c = p_i.len();
    if p_j.len() != c || transfer.rows() != c || transfer.cols() != c * levels {
        return Err(NumericsError::Shape(format!(
            "p_i {} / p_j {} vs transfer {}x{} with R={levels}",
            p_i.len(),
            p_j.len(),
            transfer.rows(),
            transfer.cols()
        )));
    }
    let q = Matrix::from_vec(1, c, p_i.0.clone()).matmul(transfer);
    let mut logits: Vec<T> = q.row(0).chunks_exact(c).map(|qn| dot(qn, &p_j.0)).collect();
    softmax_inplace(&mut logits);
    Ok(RelationDistribution(logits))
}

/// Relation distributions for every `(row, col)` combination of two sample
/// sets, stored densely. Losses read from it and write logit gradients into
/// a buffer with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix<T> {
    /// Batch sample index of each row.
    pub rows: Vec<usize>,
    /// Batch sample index of each column.
    pub cols: Vec<usize>,
    levels: usize,
    probs: Vec<T>,
}

impl<T: Scalar> RelationMatrix<T> {
    /// Wraps precomputed distributions laid out `[row][col][level]`.
    pub fn from_dense(rows: Vec<usize>, cols: Vec<usize>, levels: usize, probs: Vec<T>) -> Self {
        assert_eq!(probs.len(), rows.len() * cols.len() * levels, "relation matrix size");
        Self { rows, cols, levels, probs }
    }

    /// Builds from a closure returning the distribution of `(row, col)`.
    pub fn from_fn(n_rows: usize, n_cols: usize, levels: usize, mut f: impl FnMut(usize, usize) -> Vec<T>) -> Self {
        let mut probs = Vec::with_capacity(n_rows * n_cols * levels);
        for r in 0..n_rows {
            for c in 0..n_cols {
                let v = f(r, c);
                assert_eq!(v.len(), levels);
                probs.extend(v);
            }
        }
        Self { rows: (0..n_rows).collect(), cols: (0..n_cols).collect(), levels, probs }
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.levels
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    pub fn offset(&self, r: usize, c: usize) -> usize {
        (r * self.cols.len() + c) * self.levels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> &[T] {
        let o = self.offset(r, c);
        &self.probs[o..o + self.levels]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.probs
    }

    /// Zeroed gradient buffer with this matrix's layout.
    pub fn zero_grad(&self) -> Vec<T> {
        vec![T::zero(); self.probs.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, len: usize) -> CategoryDistribution<f64> {
        let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        CategoryDistribution::new(softmax(&logits)).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_categories() {
        let shape = ModelShape { input_dim: 3, hidden_dims: vec![4], num_categories: 5, num_levels: 3 };
        let params = ModelParams::<f64>::zeros(&shape).unwrap();
        let p = category_forward(&params, &[1.0, -2.0, 0.5]).unwrap();
        for &x in p.as_slice() {
            assert_abs_diff_eq!(x, 0.2, epsilon = 1e-15);
        }
        assert_eq!(category_forward(&params, &[1.0]), Err(NumericsError::Dimension { expected: 3, got: 1 }));
    }

    #[test]
    fn category_forward_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ModelShape { input_dim: 6, hidden_dims: vec![8, 5], num_categories: 7, num_levels: 3 };
        for _ in 0..20 {
            let params = ModelParams::<f64>::init(&shape, &mut rng).unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = category_forward(&params, &x).unwrap();
            assert_abs_diff_eq!(p.as_slice().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_class_softmax_value() {
        // e^2 / (e^2 + 1)
        let p = softmax(&[2.0f64, 0.0]);
        assert_abs_diff_eq!(p[0], 0.8807970779778823, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.11920292202211755, epsilon = 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-10.0..10.0)).collect();
            let shift = rng.random_range(-100.0..100.0);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn relation_forward_special_cases() {
        let c = 3;
        let levels = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_dist(&mut rng, c);
        let q = random_dist(&mut rng, c);
        let r = relation_forward(&p, &q, &Matrix::zeros(c, c * levels), levels).unwrap();
        assert!(r.as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let data: Vec<f64> = (0..c * c * levels).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = Matrix::from_vec(c, c * levels, data);
        let r =
            relation_forward(&CategoryDistribution::one_hot(c, 2), &CategoryDistribution::one_hot(c, 0), &w, levels)
                .unwrap();
        let expect = softmax(&(0..levels).map(|n| w.get(2, n * c)).collect::<Vec<_>>());
        for (a, b) in r.as_slice().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(relation_forward(&p, &CategoryDistribution::one_hot(2, 0), &w, levels).is_err());
    }

    #[test]
    fn relation_forward_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let c = rng.random_range(2..=6);
            let levels = rng.random_range(2..=6);
            let p = random_dist(&mut rng, c);
            let q = random_dist(&mut rng, c);
            let data: Vec<f64> = (0..c * c * levels).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = Matrix::from_vec(c, c * levels, data);
            // oracle: explicit contraction over (a, b, n)
            let mut logits = vec![0.0; levels];
            for a in 0..c {
                for b in 0..c {
                    for (n, l) in logits.iter_mut().enumerate() {
                        *l += p.as_slice()[a] * q.as_slice()[b] * w.get(a, n * c + b);
                    }
                }
            }
            let oracle = softmax(&logits);
            let got = relation_forward(&p, &q, &w, levels).unwrap();
            for (a, b) in got.as_slice().iter().zip(oracle) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn f32_path_works() {
        let shape = ModelShape { input_dim: 2, hidden_dims: vec![3], num_categories: 2, num_levels: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::<f32>::init(&shape, &mut rng).unwrap();
        let p = category_forward(&params, &[0.5f32, -0.5]).unwrap();
        assert!((p.as_slice().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
