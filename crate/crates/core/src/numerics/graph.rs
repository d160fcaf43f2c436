//! Batched forward pass with the intermediates reverse mode needs, and the
//! matching backward pass.
//!
//! Losses never see parameters. They read category probabilities and
//! relation distributions from a [`BatchForward`] and deposit gradients with
//! respect to category logits and relation logits into a [`BackwardBuffer`].
//! [`BatchForward::backward`] then chains those through the relation head,
//! the softmax, the category head, and the extractor.

use super::model::softmax_inplace;
use super::{Matrix, ModelParams, NumericsError, RelationMatrix};
use crate::Scalar;

/// Which parameters a relation-logit gradient may reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    /// Gradient reaches the transfer tensor.
    pub to_transfer: bool,
    /// Gradient reaches the category predictions (and through them the
    /// category head and extractor).
    pub to_predictions: bool,
}

impl Route {
    pub const FULL: Route = Route { to_transfer: true, to_predictions: true };
    pub const TRANSFER_ONLY: Route = Route { to_transfer: true, to_predictions: false };
    pub const PREDICTIONS_ONLY: Route = Route { to_transfer: false, to_predictions: true };
}

#[derive(Debug, Clone)]
pub struct BatchForward<T> {
    input: Matrix<T>,
    /// Post-tanh output of each extractor layer.
    activations: Vec<Matrix<T>>,
    probs: Matrix<T>,
    /// `q[i] = p_iᵀ W`, shape `S × (R·C)`, level-major.
    q: Matrix<T>,
    levels: usize,
}

impl<T: Scalar> BatchForward<T> {
    pub fn new(params: &ModelParams<T>, input: Matrix<T>) -> Result<Self, NumericsError> {
        if input.cols() != params.input_dim() {
            return Err(NumericsError::Dimension { expected: params.input_dim(), got: input.cols() });
        }
        let mut activations = Vec::with_capacity(params.extractor.len());
        for layer in &params.extractor {
            let h = layer.apply(activations.last().unwrap_or(&input), true);
            activations.push(h);
        }
        let features = activations.last().unwrap_or(&input);
        let mut probs = params.category_head.apply(features, false);
        for r in 0..probs.rows() {
            softmax_inplace(probs.row_mut(r));
        }
        if !probs.all_finite() {
            return Err(NumericsError::NonFinite { op: "category softmax".into() });
        }
        let q = probs.matmul(&params.transfer);
        Ok(Self { input, activations, probs, q, levels: params.num_levels })
    }

    pub fn len(&self) -> usize {
        self.input.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.input.rows() == 0
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn probs(&self) -> &Matrix<T> {
        &self.probs
    }

    #[inline]
    pub fn category(&self, i: usize) -> &[T] {
        self.probs.row(i)
    }

    /// Relation logits of the ordered pair `(i, j)`.
    pub fn relation_logits_into(&self, i: usize, j: usize, out: &mut [T]) {
        let pj = self.probs.row(j);
        for (o, qn) in out.iter_mut().zip(self.q.row(i).chunks_exact(pj.len())) {
            *o = super::dot(qn, pj);
        }
    }

    pub fn relation(&self, i: usize, j: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.levels];
        self.relation_logits_into(i, j, &mut out);
        softmax_inplace(&mut out);
        out
    }

    /// Relations for every `(row, col)` pair of the given sample indices.
    pub fn relation_matrix(&self, rows: &[usize], cols: &[usize]) -> RelationMatrix<T> {
        let mut probs = vec![T::zero(); rows.len() * cols.len() * self.levels];
        let mut k = 0;
        for &i in rows {
            for &j in cols {
                let out = &mut probs[k..k + self.levels];
                self.relation_logits_into(i, j, out);
                softmax_inplace(out);
                k += self.levels;
            }
        }
        RelationMatrix::from_dense(rows.to_vec(), cols.to_vec(), self.levels, probs)
    }

    /// Reverse pass: gradients of the loss whose logit gradients were
    /// accumulated in `buf`.
    pub fn backward(&self, params: &ModelParams<T>, buf: &BackwardBuffer<T>) -> Result<ModelParams<T>, NumericsError> {
        let mut grads = params.zeros_like();
        let mut d_logits = buf.d_logits.clone();

        if buf.touched_transfer {
            // dW = Pᵀ · dQ, skipping samples that never reached the tensor
            let w = grads.transfer.as_mut_slice();
            for r in nonzero_rows(&buf.d_q_transfer) {
                let dq = buf.d_q_transfer.row(r);
                for (a, &pa) in self.probs.row(r).iter().enumerate() {
                    for (dst, &g) in w[a * dq.len()..(a + 1) * dq.len()].iter_mut().zip(dq) {
                        *dst += pa * g;
                    }
                }
            }
        }
        if buf.touched_probs {
            let mut d_probs = buf.d_probs.clone();
            for r in nonzero_rows(&buf.d_q_probs) {
                let dq = buf.d_q_probs.row(r);
                for (d, a) in d_probs.row_mut(r).iter_mut().zip(0..params.transfer.rows()) {
                    *d += super::dot(dq, params.transfer.row(a));
                }
            }
            // softmax Jacobian: dz = p ⊙ (dp − ⟨p, dp⟩)
            for r in 0..self.len() {
                let p = self.probs.row(r);
                let dp = d_probs.row(r);
                let inner = super::dot(p, dp);
                for ((dz, &pi), &dpi) in d_logits.row_mut(r).iter_mut().zip(p).zip(dp) {
                    *dz += pi * (dpi - inner);
                }
            }
        }

        if buf.touched_logits || buf.touched_probs {
            let features = self.activations.last().unwrap_or(&self.input);
            grads.category_head.weight = features.t_matmul(&d_logits);
            grads.category_head.bias = d_logits.column_sums();
            let mut d_act = d_logits.matmul_t(&params.category_head.weight);
            for layer in (0..params.extractor.len()).rev() {
                let act = &self.activations[layer];
                // tanh' = 1 − h²
                for (d, &h) in d_act.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    *d *= T::one() - h * h;
                }
                let below = if layer == 0 { &self.input } else { &self.activations[layer - 1] };
                grads.extractor[layer].weight = below.t_matmul(&d_act);
                grads.extractor[layer].bias = d_act.column_sums();
                if layer > 0 {
                    d_act = d_act.matmul_t(&params.extractor[layer].weight);
                }
            }
        }
        if !grads.all_finite() {
            return Err(NumericsError::NonFinite { op: "backward".into() });
        }
        Ok(grads)
    }
}

fn nonzero_rows<T: Scalar>(m: &Matrix<T>) -> impl Iterator<Item = usize> + '_ {
    (0..m.rows()).filter(move |&r| m.row(r).iter().any(|x| *x != T::zero()))
}

/// Accumulates `∂loss/∂(category logits)` and `∂loss/∂(relation logits)`.
#[derive(Debug, Clone)]
pub struct BackwardBuffer<T> {
    d_logits: Matrix<T>,
    d_probs: Matrix<T>,
    d_q_transfer: Matrix<T>,
    d_q_probs: Matrix<T>,
    touched_logits: bool,
    touched_probs: bool,
    touched_transfer: bool,
}

impl<T: Scalar> BackwardBuffer<T> {
    pub fn new(forward: &BatchForward<T>) -> Self {
        let s = forward.len();
        let c = forward.probs.cols();
        let cr = forward.q.cols();
        Self {
            d_logits: Matrix::zeros(s, c),
            d_probs: Matrix::zeros(s, c),
            d_q_transfer: Matrix::zeros(s, cr),
            d_q_probs: Matrix::zeros(s, cr),
            touched_logits: false,
            touched_probs: false,
            touched_transfer: false,
        }
    }

    /// Adds `g` to the category-logit gradient of sample `i`.
    pub fn add_category_logit_grad(&mut self, i: usize, g: &[T]) {
        self.touched_logits = true;
        for (d, &x) in self.d_logits.row_mut(i).iter_mut().zip(g) {
            *d += x;
        }
    }

    /// Adds `g` (length `R`) to the relation-logit gradient of pair `(i, j)`.
    pub fn add_relation_logit_grad(&mut self, forward: &BatchForward<T>, i: usize, j: usize, g: &[T], route: Route) {
        let pj = forward.probs.row(j);
        let c = pj.len();
        // d logit_n / d q[i][n·C + b] = p_j[b]
        let scatter = |row: &mut [T]| {
            for (block, &gn) in row.chunks_exact_mut(c).zip(g) {
                for (d, &pb) in block.iter_mut().zip(pj) {
                    *d += gn * pb;
                }
            }
        };
        if route.to_transfer {
            self.touched_transfer = true;
            scatter(self.d_q_transfer.row_mut(i));
        }
        if route.to_predictions {
            self.touched_probs = true;
            scatter(self.d_q_probs.row_mut(i));
            // d logit_n / d p_j[b] = q[i][n·C + b]
            let dpj = self.d_probs.row_mut(j);
            for (qn, &gn) in forward.q.row(i).chunks_exact(c).zip(g) {
                for (d, &q) in dpj.iter_mut().zip(qn) {
                    *d += gn * q;
                }
            }
        }
    }

    /// Adds a dense gradient laid out like `matrix`, scaled by `scale`.
    pub fn add_relation_matrix_grad(
        &mut self,
        forward: &BatchForward<T>,
        matrix: &RelationMatrix<T>,
        grad: &[T],
        scale: T,
        route: Route,
    ) {
        let levels = matrix.levels();
        let mut g = vec![T::zero(); levels];
        for (r, &i) in matrix.rows.iter().enumerate() {
            for (c, &j) in matrix.cols.iter().enumerate() {
                let o = matrix.offset(r, c);
                let src = &grad[o..o + levels];
                if src.iter().all(|x| *x == T::zero()) {
                    continue;
                }
                for (d, &s) in g.iter_mut().zip(src) {
                    *d = s * scale;
                }
                self.add_relation_logit_grad(forward, i, j, &g, route);
            }
        }
    }
}
