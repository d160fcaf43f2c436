use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError};
use crate::Scalar;

/// Fully connected layer; `weight` is `inputs × outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Matrix::zeros(inputs, outputs), bias: vec![T::zero(); outputs] }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn fan_in_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        Self { weight: Matrix::from_vec(inputs, outputs, data), bias: vec![T::zero(); outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    /// `tanh(x · W + b)` or the affine map alone.
    pub fn apply(&self, x: &Matrix<T>, activate: bool) -> Matrix<T> {
        let mut out = x.matmul(&self.weight);
        out.add_row_vector(&self.bias);
        if activate {
            out.map_inplace(T::tanh);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    /// Extractor widths; the last entry is the feature dimension.
    pub hidden_dims: Vec<usize>,
    pub num_categories: usize,
    pub num_levels: usize,
}

impl ModelShape {
    pub fn new(input_dim: usize, num_categories: usize, num_levels: usize) -> Self {
        Self { input_dim, hidden_dims: vec![64, 64], num_categories, num_levels }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(NumericsError::Shape("zero-width layer".into()));
        }
        if self.num_categories < 2 || self.num_levels < 2 {
            return Err(NumericsError::Shape(format!(
                "need at least 2 categories and 2 relation levels, got C={} R={}",
                self.num_categories, self.num_levels
            )));
        }
        Ok(())
    }
}

/// Feature extractor, category head, and the `C × C × R` transfer tensor.
///
/// The transfer tensor is stored as a `C × (R·C)` matrix so entry
/// `(a, b, n)` sits at row `a`, column `n·C + b`; each level's slice of
/// `p_iᵀ W` is then contiguous. The same struct doubles as
/// the gradient and velocity container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelParams<T> {
    pub extractor: Vec<Dense<T>>,
    pub category_head: Dense<T>,
    pub transfer: Matrix<T>,
    pub num_levels: usize,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in uniform extractor and head; zero transfer tensor, so relation
    /// predictions start uniform.
    pub fn init<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R) -> Result<Self, NumericsError> {
        shape.validate()?;
        let mut extractor = Vec::with_capacity(shape.hidden_dims.len());
        let mut fan_in = shape.input_dim;
        for &h in &shape.hidden_dims {
            extractor.push(Dense::fan_in_uniform(fan_in, h, rng));
            fan_in = h;
        }
        let category_head = Dense::fan_in_uniform(fan_in, shape.num_categories, rng);
        let c = shape.num_categories;
        Ok(Self {
            extractor,
            category_head,
            transfer: Matrix::zeros(c, c * shape.num_levels),
            num_levels: shape.num_levels,
        })
    }

    pub fn zeros(shape: &ModelShape) -> Result<Self, NumericsError> {
        shape.validate()?;
        let mut extractor = Vec::new();
        let mut fan_in = shape.input_dim;
        for &h in &shape.hidden_dims {
            extractor.push(Dense::zeros(fan_in, h));
            fan_in = h;
        }
        let c = shape.num_categories;
        Ok(Self {
            extractor,
            category_head: Dense::zeros(fan_in, c),
            transfer: Matrix::zeros(c, c * shape.num_levels),
            num_levels: shape.num_levels,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(T::zero());
        z
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.input_dim(),
            hidden_dims: self.extractor.iter().map(Dense::outputs).collect(),
            num_categories: self.num_categories(),
            num_levels: self.num_levels,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.first().map_or(self.category_head.inputs(), Dense::inputs)
    }

    pub fn num_categories(&self) -> usize {
        self.category_head.outputs()
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    /// Transfer tensor entry `w_t[a, b, n]`.
    #[inline]
    pub fn transfer_at(&self, a: usize, b: usize, n: usize) -> T {
        self.transfer.get(a, n * self.num_categories() + b)
    }

    /// Every parameter array, in a fixed order.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 3);
        for layer in &self.extractor {
            out.push(layer.weight.as_slice());
            out.push(layer.bias.as_slice());
        }
        out.push(self.category_head.weight.as_slice());
        out.push(self.category_head.bias.as_slice());
        out.push(self.transfer.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 3);
        for layer in &mut self.extractor {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out.push(self.category_head.weight.as_mut_slice());
        out.push(self.category_head.bias.as_mut_slice());
        out.push(self.transfer.as_mut_slice());
        out
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn fill(&mut self, v: T) {
        for s in self.slices_mut() {
            s.fill(v);
        }
    }

    pub fn scale(&mut self, k: T) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// `self += k · other`.
    pub fn axpy(&mut self, k: T, other: &Self) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Same layer sizes.
    pub fn same_shape(&self, other: &Self) -> bool {
        let a = self.slices();
        let b = other.slices();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// Extractor features for a batch (rows are samples).
    pub fn features(&self, x: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        if x.cols() != self.input_dim() {
            return Err(NumericsError::Dimension { expected: self.input_dim(), got: x.cols() });
        }
        let mut h = x.clone();
        for layer in &self.extractor {
            h = layer.apply(&h, true);
        }
        Ok(h)
    }

    /// Category probabilities for a batch (rows are samples).
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
        let mut logits = self.category_head.apply(&self.features(x)?, false);
        for r in 0..logits.rows() {
            softmax_inplace(logits.row_mut(r));
        }
        Ok(logits)
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_inplace<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut v = logits.to_vec();
    softmax_inplace(&mut v);
    v
}

/// Log-sum-exp log-softmax.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    logits.iter().map(|&x| x - lse).collect()
}
