//! One evaluation of the training objective and its gradient.

use rand::Rng;

use super::{TrainError, Variant};
use crate::data::reversed_pairing;
use crate::losses::{
    category_ce_batch, ordered_triples, pair_pseudo_loss, select_confident_pairs, select_consistent_triplets,
    select_label_transfer, supervised_relation_loss, transfer_triples, triplet_selection_loss, LossTerm, PairSelection,
    PseudoLabelConfig, TripletSelection,
};
use crate::numerics::{BackwardBuffer, BatchForward, Matrix, ModelParams, Route};
use crate::taxonomy::{RelationIndex, RelationWeights};
use crate::Scalar;

/// Model inputs for one step: `labels.len()` labeled rows followed by
/// `n_unlabeled` unlabeled rows.
#[derive(Debug, Clone)]
pub struct StepBatch<T> {
    pub input: Matrix<T>,
    /// Class index of each labeled row.
    pub labels: Vec<usize>,
    pub n_unlabeled: usize,
    /// Ground-truth relation between labeled rows `k` and `l`.
    pub labeled_relations: Vec<Vec<usize>>,
}

impl<T: Scalar> StepBatch<T> {
    pub fn n_labeled(&self) -> usize {
        self.labels.len()
    }

    fn labeled_rows(&self) -> Vec<usize> {
        (0..self.n_labeled()).collect()
    }

    fn unlabeled_rows(&self) -> Vec<usize> {
        (self.n_labeled()..self.n_labeled() + self.n_unlabeled).collect()
    }
}

/// Detached pseudo-label choices of the unlabeled objective. Indices refer
/// to the relation matrix the variant builds (unlabeled × unlabeled, or
/// unlabeled × labeled for label transfer).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    None,
    Pairs(Vec<PairSelection>),
    Triplets(Vec<TripletSelection>),
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSettings<'a> {
    pub variant: Variant,
    pub pseudo: PseudoLabelConfig,
    pub weights: &'a RelationWeights,
    pub full_routing: bool,
    /// False during warm-up: unlabeled losses are skipped.
    pub use_unlabeled: bool,
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue<T> {
    pub l_c: T,
    pub l_r: T,
    pub l_u: T,
    pub grads: ModelParams<T>,
    pub selection: Selection,
    pub unlabeled_term: Option<LossTerm<T>>,
}

impl<T: Scalar> ObjectiveValue<T> {
    pub fn total(&self) -> T {
        self.l_c + self.l_r + self.l_u
    }
}

/// Loss components and the gradient of their sum. With `fixed` the
/// unlabeled objective reuses that selection instead of choosing a new one,
/// which makes the value a smooth function of the parameters.
pub fn objective<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    batch: &StepBatch<T>,
    settings: &ObjectiveSettings<'_>,
    fixed: Option<&Selection>,
    rng: &mut R,
) -> Result<ObjectiveValue<T>, TrainError> {
    let forward = BatchForward::new(params, batch.input.clone())?;
    let mut buf = BackwardBuffer::new(&forward);

    let targets: Vec<(usize, usize)> = batch.labels.iter().copied().enumerate().collect();
    let ce = category_ce_batch(forward.probs(), &targets);
    let c = params.num_categories();
    for (row, _) in &targets {
        buf.add_category_logit_grad(*row, &ce.grad[row * c..(row + 1) * c]);
    }

    let (relation_route, unlabeled_route) = if settings.full_routing {
        (Route::FULL, Route::FULL)
    } else {
        (Route::TRANSFER_ONLY, Route::PREDICTIONS_ONLY)
    };

    let mut l_r = T::zero();
    let mut l_u = T::zero();
    let mut selection = Selection::None;
    let mut unlabeled_term = None;
    if settings.variant.uses_relations() {
        let labeled = batch.labeled_rows();
        let matrix = forward.relation_matrix(&labeled, &labeled);
        let pairs: Vec<_> = reversed_pairing(labeled.len())
            .into_iter()
            .map(|(a, b)| (a, b, RelationIndex(batch.labeled_relations[a][b])))
            .collect();
        let term = supervised_relation_loss(&matrix, &pairs, settings.weights)?;
        buf.add_relation_matrix_grad(&forward, &matrix, &term.grad, T::one(), relation_route);
        l_r = term.value;

        let unlabeled = batch.unlabeled_rows();
        if settings.use_unlabeled && !unlabeled.is_empty() {
            let (matrix, term, chosen) = match settings.variant {
                Variant::RelationPl => {
                    let matrix = forward.relation_matrix(&unlabeled, &unlabeled);
                    let chosen = match fixed {
                        Some(Selection::Pairs(s)) => s.clone(),
                        _ => select_confident_pairs(&matrix, &settings.pseudo),
                    };
                    let term = pair_pseudo_loss(&matrix, &chosen, settings.weights)?;
                    (matrix, term, Selection::Pairs(chosen))
                }
                Variant::TripletCr => {
                    let matrix = forward.relation_matrix(&unlabeled, &unlabeled);
                    let chosen = match fixed {
                        Some(Selection::Triplets(s)) => s.clone(),
                        _ => {
                            let triples = ordered_triples(unlabeled.len(), settings.pseudo.triplet_samples, rng);
                            select_consistent_triplets(&matrix, &triples)
                        }
                    };
                    let term = triplet_selection_loss(&matrix, &chosen, settings.weights)?;
                    (matrix, term, Selection::Triplets(chosen))
                }
                Variant::LabelTransfer => {
                    let matrix = forward.relation_matrix(&unlabeled, &labeled);
                    let chosen = match fixed {
                        Some(Selection::Triplets(s)) => s.clone(),
                        _ if labeled.len() < 2 => {
                            log::warn!("label transfer needs at least two labeled samples, got {}", labeled.len());
                            Vec::new()
                        }
                        _ => {
                            let triples =
                                transfer_triples(unlabeled.len(), labeled.len(), settings.pseudo.transfer_cap, rng);
                            select_label_transfer(&matrix, &batch.labeled_relations, &triples, &settings.pseudo)
                        }
                    };
                    let term = triplet_selection_loss(&matrix, &chosen, settings.weights)?;
                    (matrix, term, Selection::Triplets(chosen))
                }
                Variant::BaselineSupervised => unreachable!("baseline has no relation losses"),
            };
            buf.add_relation_matrix_grad(&forward, &matrix, &term.grad, T::one(), unlabeled_route);
            l_u = term.value;
            selection = chosen;
            unlabeled_term = Some(term);
        }
    }
    let grads = forward.backward(params, &buf)?;
    Ok(ObjectiveValue { l_c: ce.value, l_r, l_u, grads, selection, unlabeled_term })
}
