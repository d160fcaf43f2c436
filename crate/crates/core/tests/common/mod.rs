//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relssl::losses::PseudoLabelConfig;
use relssl::numerics::{Matrix, ModelParams, ModelShape};
use relssl::taxonomy::{relation_weights, RelationTable, RelationWeights, TaxonomyTree};
use relssl::training::{objective, ObjectiveSettings, ObjectiveValue, Selection, StepBatch, Variant};
use std::collections::BTreeMap;

/// Relative error as used by the gradient checks:
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const GRAD_FLOOR: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-4;

pub struct Fixture {
    pub params: ModelParams<f64>,
    pub batch: StepBatch<f64>,
    pub weights: RelationWeights,
}

/// Random `C = 4, R = 3, D = 5` model with a random transfer tensor, plus a
/// batch of `n_labeled` labeled and `n_unlabeled` unlabeled rows.
pub fn fixture(rng: &mut ChaCha8Rng, n_labeled: usize, n_unlabeled: usize) -> Fixture {
    let tree: TaxonomyTree = relssl::taxonomy::parse_newick("((A,B),(C,D));").unwrap();
    let species: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
    let table = RelationTable::new(&tree, &species).unwrap();
    let shape = ModelShape { input_dim: 5, hidden_dims: vec![6], num_categories: 4, num_levels: 3 };
    let mut params = ModelParams::init(&shape, rng).unwrap();
    for w in params.transfer.as_mut_slice() {
        *w = rng.random_range(-6.0..6.0);
    }
    let rows = n_labeled + n_unlabeled;
    let data: Vec<f64> = (0..rows * 5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..n_labeled).map(|_| rng.random_range(0..4)).collect();
    let labeled_relations = labels.iter().map(|&a| labels.iter().map(|&b| table.get(a, b)).collect()).collect();
    let mut counts = BTreeMap::new();
    for s in &species {
        counts.insert(s.clone(), 1);
    }
    let weights = relation_weights(&tree, &counts).unwrap();
    Fixture {
        params,
        batch: StepBatch { input: Matrix::from_vec(rows, 5, data), labels, n_unlabeled, labeled_relations },
        weights,
    }
}

pub fn settings<'a>(variant: Variant, weights: &'a RelationWeights, full_routing: bool) -> ObjectiveSettings<'a> {
    // a low margin and threshold so random models select something
    let pseudo =
        PseudoLabelConfig { confidence_threshold: 0.5, expectation_margin: 0.2, ..PseudoLabelConfig::default() };
    ObjectiveSettings { variant, pseudo, weights, full_routing, use_unlabeled: true }
}

fn eval(params: &ModelParams<f64>, fx: &Fixture, s: &ObjectiveSettings<'_>, sel: &Selection) -> ObjectiveValue<f64> {
    objective(params, &fx.batch, s, Some(sel), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

pub struct CheckResult {
    pub max_rel: f64,
    pub coordinates: usize,
    pub selected: usize,
}

/// Central finite differences on every parameter against the analytic
/// gradient, with the unlabeled selection held fixed.
///
/// With full routing the target is `d(total)`. With partitioned routing the
/// transfer-tensor gradient must equal `d(l_r)` and every other gradient
/// `d(l_c + l_u)`.
pub fn check_gradients(variant: Variant, fx: &Fixture, full_routing: bool) -> CheckResult {
    let s = settings(variant, &fx.weights, full_routing);
    let base = objective(&fx.params, &fx.batch, &s, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let selection = base.selection.clone();
    let selected = base.unlabeled_term.as_ref().map_or(0, |t| t.selected);
    let analytic: Vec<Vec<f64>> = base.grads.slices().iter().map(|x| x.to_vec()).collect();
    let transfer_slot = analytic.len() - 1;

    let mut max_rel: f64 = 0.0;
    let mut coordinates = 0;
    for (slot, grads) in analytic.iter().enumerate() {
        for (idx, &a) in grads.iter().enumerate() {
            let mut plus = fx.params.clone();
            plus.slices_mut()[slot][idx] += FD_STEP;
            let mut minus = fx.params.clone();
            minus.slices_mut()[slot][idx] -= FD_STEP;
            let (vp, vm) = (eval(&plus, fx, &s, &selection), eval(&minus, fx, &s, &selection));
            let pick = |v: &ObjectiveValue<f64>| {
                if full_routing {
                    v.total()
                } else if slot == transfer_slot {
                    v.l_r
                } else {
                    v.l_c + v.l_u
                }
            };
            let numeric = (pick(&vp) - pick(&vm)) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(a, numeric, GRAD_FLOOR));
            coordinates += 1;
        }
    }
    CheckResult { max_rel, coordinates, selected }
}
