//! Accuracy, prediction-dispersion and relation pseudo-label diagnostics,
//! and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{feature_matrix, DatasetSplit, Sample};
use crate::losses::{select_label_transfer, transfer_triples, PseudoLabelConfig};
use crate::numerics::{argmax, BatchForward, Matrix, ModelParams, NumericsError, RelationMatrix};
use crate::taxonomy::{TaxonomyError, TaxonomyTree};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k = {k} exceeds the {categories} categories")]
    TopK { k: usize, categories: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("sample {id} has no ground-truth species in the label space")]
    OutOfLabelSpace { id: String },
    #[error("model predicts {model} categories, label space has {split}")]
    CategoryMismatch { model: usize, split: usize },
    #[error("no group has at least two samples")]
    NoGroups,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report schema: {0}")]
    Schema(String),
    #[error("report invariant violated: {0}")]
    Invariant(String),
}

/// Whether `truth` is among the `k` most probable entries of `p`; ties go to
/// the lower index.
pub fn in_top_k<T: Scalar>(p: &[T], truth: usize, k: usize) -> bool {
    let target = p[truth];
    let rank = p.iter().enumerate().filter(|&(c, &v)| v > target || (v == target && c < truth)).count();
    rank < k
}

/// Top-k accuracy of a probability matrix against class indices.
pub fn topk_from_probs<T: Scalar>(probs: &Matrix<T>, truth: &[usize], k: usize) -> Result<f64, EvalError> {
    if k > probs.cols() {
        return Err(EvalError::TopK { k, categories: probs.cols() });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = truth.iter().enumerate().filter(|&(r, &y)| in_top_k(probs.row(r), y, k)).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn class_indices(samples: &[Sample], categories: &BTreeMap<String, usize>) -> Result<Vec<usize>, EvalError> {
    samples
        .iter()
        .map(|s| {
            s.truth()
                .and_then(|t| categories.get(t).copied())
                .ok_or_else(|| EvalError::OutOfLabelSpace { id: s.id.clone() })
        })
        .collect()
}

fn predict<T: Scalar>(params: &ModelParams<T>, samples: &[Sample]) -> Result<Matrix<T>, EvalError> {
    Ok(params.predict(&feature_matrix(samples, params.input_dim()))?)
}

/// Top-k accuracy of the model on samples whose species lie in the label
/// space (`categories` maps species to class index).
pub fn topk_accuracy<T: Scalar>(
    params: &ModelParams<T>,
    samples: &[Sample],
    categories: &BTreeMap<String, usize>,
    k: usize,
) -> Result<f64, EvalError> {
    if k > params.num_categories() {
        return Err(EvalError::TopK { k, categories: params.num_categories() });
    }
    let truth = class_indices(samples, categories)?;
    topk_from_probs(&predict(params, samples)?, &truth, k)
}

/// `KL(p ‖ q)` with both arguments floored inside the logarithm.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi.safe_ln() - qi.safe_ln())).sum()
}

/// Mean over groups of the mean `KL(p ‖ center)` within the group, where the
/// center is the group's mean prediction. Groups with fewer than two members
/// are skipped.
pub fn kl_dispersion_groups(groups: &[Vec<Vec<f64>>]) -> Result<f64, EvalError> {
    let mut total = 0.0;
    let mut used = 0usize;
    for group in groups {
        if group.len() < 2 {
            log::warn!("skipping dispersion group of size {}", group.len());
            continue;
        }
        let dim = group[0].len();
        let mut center = vec![0.0; dim];
        for p in group {
            for (c, &v) in center.iter_mut().zip(p) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= group.len() as f64);
        // each term is ≥ 0 analytically; clamp rounding residue
        total += group.iter().map(|p| kl_divergence(p, &center).max(0.0)).sum::<f64>() / group.len() as f64;
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::NoGroups);
    }
    Ok(total / used as f64)
}

/// Grouping granularity for [`kl_dispersion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Species,
    /// Parent of the species leaf.
    Genus,
}

fn group_key(tree: &TaxonomyTree, species: &str, grouping: Grouping) -> Result<String, EvalError> {
    let node = tree.species_node(species)?;
    Ok(match grouping {
        Grouping::Species => species.to_string(),
        Grouping::Genus => {
            let parent = tree.nodes()[node].parent.unwrap_or(node);
            format!("{}#{parent}", tree.nodes()[parent].name)
        }
    })
}

/// Prediction dispersion of `samples` grouped by latent species (or genus).
pub fn kl_dispersion<T: Scalar>(
    params: &ModelParams<T>,
    tree: &TaxonomyTree,
    samples: &[Sample],
    grouping: Grouping,
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let probs = predict(params, samples)?;
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (r, s) in samples.iter().enumerate() {
        let Some(species) = s.latent_species.as_deref().or(s.species.as_deref()) else { continue };
        let key = group_key(tree, species, grouping)?;
        groups.entry(key).or_default().push(probs.row(r).iter().map(|x| x.as_f64()).collect());
    }
    kl_dispersion_groups(&groups.into_values().collect::<Vec<_>>())
}

/// Source of relation distributions between samples addressed by position
/// in a fixed sample list.
pub trait RelationPredictor {
    fn levels(&self) -> usize;
    fn relation(&self, a: usize, b: usize) -> Vec<f64>;
}

/// Relations read off a model's bilinear head.
pub struct ModelRelations<T> {
    forward: BatchForward<T>,
}

impl<T: Scalar> ModelRelations<T> {
    pub fn new(params: &ModelParams<T>, samples: &[Sample]) -> Result<Self, EvalError> {
        let input = feature_matrix(samples, params.input_dim());
        Ok(Self { forward: BatchForward::new(params, input)? })
    }
}

impl<T: Scalar> RelationPredictor for ModelRelations<T> {
    fn levels(&self) -> usize {
        self.forward.levels()
    }

    fn relation(&self, a: usize, b: usize) -> Vec<f64> {
        self.forward.relation(a, b).into_iter().map(|x| x.as_f64()).collect()
    }
}

/// One-hot relations at the ground truth of each pair.
pub struct OracleRelations {
    nodes: Vec<usize>,
    tree: TaxonomyTree,
}

impl OracleRelations {
    pub fn new(tree: &TaxonomyTree, samples: &[Sample]) -> Result<Self, EvalError> {
        let nodes = samples
            .iter()
            .map(|s| {
                let name = s
                    .latent_species
                    .as_deref()
                    .or(s.species.as_deref())
                    .ok_or_else(|| EvalError::OutOfLabelSpace { id: s.id.clone() })?;
                Ok(tree.species_node(name)?)
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Self { nodes, tree: tree.clone() })
    }
}

impl RelationPredictor for OracleRelations {
    fn levels(&self) -> usize {
        self.tree.num_levels()
    }

    fn relation(&self, a: usize, b: usize) -> Vec<f64> {
        let lca = self.tree.lca(self.nodes[a], self.nodes[b]).expect("nodes come from this tree");
        let mut r = vec![0.0; self.levels()];
        r[self.tree.nodes()[lca].depth] = 1.0;
        r
    }
}

/// Agreement of produced relation pseudo-labels with the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityCell {
    pub evaluated: usize,
    /// Exact-level accuracy; `None` when nothing was evaluated.
    pub exact: Option<f64>,
    /// Fraction within one level of the truth.
    pub within_one: Option<f64>,
}

impl QualityCell {
    fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        if pairs.is_empty() {
            return Self { evaluated: 0, exact: None, within_one: None };
        }
        let n = pairs.len() as f64;
        let exact = pairs.iter().filter(|(p, t)| p == t).count() as f64 / n;
        let near = pairs.iter().filter(|(p, t)| p.abs_diff(*t) <= 1).count() as f64 / n;
        Self { evaluated: pairs.len(), exact: Some(exact), within_one: Some(near) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub id: QualityCell,
    pub ood: QualityCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelTable {
    /// Argmax relation between two unlabeled samples.
    pub u_vs_u_prediction: QualityRow,
    /// Argmax relation between an unlabeled and a labeled sample.
    pub x_vs_u_prediction: QualityRow,
    /// Labeled relation transferred to gate-selected unlabeled pairs.
    pub x_vs_u_transfer: QualityRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityOptions {
    /// Pair budget per cell; larger sets are sampled with replacement.
    pub max_pairs: usize,
    pub pseudo: PseudoLabelConfig,
    pub seed: u64,
}

impl Default for QualityOptions {
    fn default() -> Self {
        Self { max_pairs: 20_000, pseudo: PseudoLabelConfig::default(), seed: 0 }
    }
}

/// Pairs `(a, b)` from `a_set × b_set` with `a ≠ b`: all when they fit in
/// `budget`, else `budget` draws.
fn pair_sample(a_set: &[usize], b_set: &[usize], budget: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if a_set.is_empty() || b_set.is_empty() {
        return Vec::new();
    }
    if a_set.len() * b_set.len() <= budget {
        return a_set.iter().flat_map(|&a| b_set.iter().map(move |&b| (a, b))).filter(|(a, b)| a != b).collect();
    }
    let mut out = Vec::with_capacity(budget);
    while out.len() < budget {
        let a = a_set[rng.random_range(0..a_set.len())];
        let b = b_set[rng.random_range(0..b_set.len())];
        if a != b {
            out.push((a, b));
        }
    }
    out
}

/// Relation pseudo-label accuracy for three strategies on an ID and an OOD
/// pool. `samples` is the concatenation `labeled ++ id_pool ++ ood_pool`
/// and `predictor` addresses it by position; ground truth comes from each
/// sample's (latent) species in `tree`.
pub fn pseudo_label_quality(
    predictor: &dyn RelationPredictor,
    tree: &TaxonomyTree,
    samples: &[Sample],
    counts: (usize, usize, usize),
    opts: &QualityOptions,
) -> Result<PseudoLabelTable, EvalError> {
    let (n_lab, n_id, n_ood) = counts;
    if samples.len() != n_lab + n_id + n_ood {
        return Err(EvalError::Schema(format!("{} samples for counts {counts:?}", samples.len())));
    }
    let oracle = OracleRelations::new(tree, samples)?;
    let truth = |a: usize, b: usize| argmax(&oracle.relation(a, b));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let labeled: Vec<usize> = (0..n_lab).collect();
    let pools = [(n_lab..n_lab + n_id).collect::<Vec<_>>(), (n_lab + n_id..samples.len()).collect()];

    let mut rows = [[QualityCell::from_pairs(&[]); 2]; 3];
    for (p, pool) in pools.iter().enumerate() {
        let uu = pair_sample(pool, pool, opts.max_pairs, &mut rng);
        let scored: Vec<_> = uu.iter().map(|&(a, b)| (argmax(&predictor.relation(a, b)), truth(a, b))).collect();
        rows[0][p] = QualityCell::from_pairs(&scored);

        let xu = pair_sample(pool, &labeled, opts.max_pairs, &mut rng);
        let scored: Vec<_> = xu.iter().map(|&(u, x)| (argmax(&predictor.relation(u, x)), truth(u, x))).collect();
        rows[1][p] = QualityCell::from_pairs(&scored);

        if n_lab >= 2 && !pool.is_empty() {
            let matrix =
                RelationMatrix::from_fn(pool.len(), n_lab, predictor.levels(), |r, c| predictor.relation(pool[r], c));
            let labeled_relations: Vec<Vec<usize>> =
                (0..n_lab).map(|k| (0..n_lab).map(|l| truth(k, l)).collect()).collect();
            let triples = transfer_triples(pool.len(), n_lab, opts.pseudo.transfer_cap, &mut rng);
            let selected = select_label_transfer(&matrix, &labeled_relations, &triples, &opts.pseudo);
            let scored: Vec<_> = selected.iter().map(|s| (s.target, truth(pool[s.row], s.col))).collect();
            rows[2][p] = QualityCell::from_pairs(&scored);
        }
    }
    let row = |r: [QualityCell; 2]| QualityRow { id: r[0], ood: r[1] };
    Ok(PseudoLabelTable {
        u_vs_u_prediction: row(rows[0]),
        x_vs_u_prediction: row(rows[1]),
        x_vs_u_transfer: row(rows[2]),
    })
}

/// Pseudo-label quality of a model with the split's labeled set as `X`,
/// held-out in-space samples as the ID pool and held-out out-of-space
/// samples as the OOD pool.
pub fn model_pseudo_label_quality<T: Scalar>(
    params: &ModelParams<T>,
    tree: &TaxonomyTree,
    split: &DatasetSplit,
    opts: &QualityOptions,
) -> Result<PseudoLabelTable, EvalError> {
    let samples: Vec<Sample> = split.labeled.iter().chain(&split.test_in).chain(&split.test_out).cloned().collect();
    let predictor = ModelRelations::new(params, &samples)?;
    pseudo_label_quality(
        &predictor,
        tree,
        &samples,
        (split.labeled.len(), split.test_in.len(), split.test_out.len()),
        opts,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    /// Top-5, or top-C when there are fewer than five categories.
    pub top5: f64,
    pub kl_dispersion_id: Option<f64>,
    pub kl_dispersion_ood: Option<f64>,
    pub kl_dispersion_id_genus: Option<f64>,
    pub kl_dispersion_ood_genus: Option<f64>,
    pub pseudo_labels: Option<PseudoLabelTable>,
    pub curve: Vec<CurvePoint>,
}

/// Top-level fields of the JSON report.
pub const REPORT_FIELDS: [&str; 8] = [
    "top1",
    "top5",
    "kl_dispersion_id",
    "kl_dispersion_ood",
    "kl_dispersion_id_genus",
    "kl_dispersion_ood_genus",
    "pseudo_labels",
    "curve",
];

impl EvalReport {
    pub fn check_invariants(&self) -> Result<(), EvalError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(EvalError::Invariant(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("top1", self.top1)?;
        unit("top5", self.top5)?;
        if self.top5 < self.top1 {
            return Err(EvalError::Invariant(format!("top5 {} < top1 {}", self.top5, self.top1)));
        }
        for (name, v) in [
            ("kl_dispersion_id", self.kl_dispersion_id),
            ("kl_dispersion_ood", self.kl_dispersion_ood),
            ("kl_dispersion_id_genus", self.kl_dispersion_id_genus),
            ("kl_dispersion_ood_genus", self.kl_dispersion_ood_genus),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(EvalError::Invariant(format!("{name} = {v} is not a finite non-negative value")));
                }
            }
        }
        if let Some(t) = &self.pseudo_labels {
            for row in [t.u_vs_u_prediction, t.x_vs_u_prediction, t.x_vs_u_transfer] {
                for cell in [row.id, row.ood] {
                    for v in cell.exact.into_iter().chain(cell.within_one) {
                        unit("pseudo-label accuracy", v)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Options for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Also run the relation pseudo-label protocol.
    pub pseudo_labels: Option<QualityOptions>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { pseudo_labels: Some(QualityOptions::default()) }
    }
}

fn optional(result: Result<f64, EvalError>) -> Result<Option<f64>, EvalError> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::Empty | EvalError::NoGroups) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Accuracy on held-out in-space samples, dispersion on both held-out pools,
/// and optionally the pseudo-label table. `tree` must match the model's
/// relation levels (pass the truncated tree for truncated models).
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    tree: &TaxonomyTree,
    split: &DatasetSplit,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if params.num_categories() != split.num_categories() {
        return Err(EvalError::CategoryMismatch { model: params.num_categories(), split: split.num_categories() });
    }
    let categories = split.category_index();
    let k5 = 5.min(split.num_categories());
    let report = EvalReport {
        top1: topk_accuracy(params, &split.test_in, &categories, 1)?,
        top5: topk_accuracy(params, &split.test_in, &categories, k5)?,
        kl_dispersion_id: optional(kl_dispersion(params, &split.tree, &split.test_in, Grouping::Species))?,
        kl_dispersion_ood: optional(kl_dispersion(params, &split.tree, &split.test_out, Grouping::Species))?,
        kl_dispersion_id_genus: optional(kl_dispersion(params, &split.tree, &split.test_in, Grouping::Genus))?,
        kl_dispersion_ood_genus: optional(kl_dispersion(params, &split.tree, &split.test_out, Grouping::Genus))?,
        pseudo_labels: match &opts.pseudo_labels {
            Some(q) => Some(model_pseudo_label_quality(params, tree, split, q)?),
            None => None,
        },
        curve: Vec::new(),
    };
    report.check_invariants()?;
    Ok(report)
}

pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";

/// Writes `report.json` and `curve.csv` (`step,top1,top5`) into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let json_path = dir.join(REPORT_FILE);
    fs::write(&json_path, serde_json::to_string_pretty(report)? + "\n").map_err(io(&json_path))?;
    let csv_path = dir.join(CURVE_FILE);
    let mut csv = String::from("step,top1,top5\n");
    for p in &report.curve {
        csv.push_str(&format!("{},{},{}\n", p.step, p.top1, p.top5));
    }
    fs::write(&csv_path, csv).map_err(io(&csv_path))?;
    Ok(vec![json_path, csv_path])
}

/// Checks a parsed report against [`REPORT_FIELDS`] and decodes it.
pub fn validate_report_json(value: &serde_json::Value) -> Result<EvalReport, EvalError> {
    let object = value.as_object().ok_or_else(|| EvalError::Schema("report is not an object".into()))?;
    for field in REPORT_FIELDS {
        if !object.contains_key(field) {
            return Err(EvalError::Schema(format!("missing field '{field}'")));
        }
    }
    if let Some(extra) = object.keys().find(|k| !REPORT_FIELDS.contains(&k.as_str())) {
        return Err(EvalError::Schema(format!("unexpected field '{extra}'")));
    }
    let report: EvalReport = serde_json::from_value(value.clone())?;
    report.check_invariants()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig};
    use crate::taxonomy::parse_newick;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn topk_hand_tally() {
        let probs = Matrix::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3], vec![0.4, 0.4, 0.2]]);
        // row 0: y=1 ranks 2nd; row 1: y=1 ranks 1st; row 2: y=1 ties with 0, loses on index
        let truth = [1, 1, 1];
        assert_abs_diff_eq!(topk_from_probs(&probs, &truth, 1).unwrap(), 1.0 / 3.0);
        assert_abs_diff_eq!(topk_from_probs(&probs, &truth, 2).unwrap(), 1.0);
        assert_abs_diff_eq!(topk_from_probs(&probs, &[0, 2, 0], 1).unwrap(), 2.0 / 3.0);
        assert_eq!(topk_from_probs(&probs, &truth, 3).unwrap(), 1.0);
        assert!(matches!(topk_from_probs(&probs, &truth, 4), Err(EvalError::TopK { k: 4, categories: 3 })));
    }

    #[test]
    fn one_hot_predictor_is_perfect() {
        let probs = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(topk_from_probs(&probs, &[1, 0], 1).unwrap(), 1.0);
    }

    #[test]
    fn kl_hand_values() {
        let same = vec![vec![0.2, 0.8]; 3];
        assert_eq!(kl_dispersion_groups(&[same]).unwrap(), 0.0);
        // center (0.5, 0.5); each KL = 1·(ln 1 − ln 0.5) = ln 2
        let split = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_abs_diff_eq!(
            kl_dispersion_groups(std::slice::from_ref(&split)).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let direct = 0.5 * (1.0 * (1f64.ln() - 0.5f64.ln()) + 1.0 * (1f64.ln() - 0.5f64.ln()));
        assert_abs_diff_eq!(kl_dispersion_groups(&[split]).unwrap(), direct, epsilon = 1e-15);
        assert!(matches!(kl_dispersion_groups(&[vec![vec![1.0]]]), Err(EvalError::NoGroups)));
    }

    fn tiny_samples(tree: &TaxonomyTree) -> Vec<Sample> {
        let mut out = Vec::new();
        for (i, name) in tree.leaf_names().enumerate() {
            for rep in 0..2 {
                out.push(Sample {
                    id: format!("{name}{rep}"),
                    features: vec![i as f64],
                    species: None,
                    latent_species: Some(name.to_string()),
                });
            }
        }
        out
    }

    #[test]
    fn oracle_scores_one_everywhere() {
        let tree = parse_newick("(((A,B),(C,D)),((E,F),(G,H)));").unwrap();
        let all = tiny_samples(&tree);
        // labeled: first copy of every leaf; id pool: second copies of A-D; ood: of E-H
        let samples: Vec<Sample> = all.iter().step_by(2).chain(all.iter().skip(1).step_by(2)).cloned().collect();
        let oracle = OracleRelations::new(&tree, &samples).unwrap();
        let opts = QualityOptions::default();
        let table = pseudo_label_quality(&oracle, &tree, &samples, (8, 4, 4), &opts).unwrap();
        for row in [table.u_vs_u_prediction, table.x_vs_u_prediction, table.x_vs_u_transfer] {
            for cell in [row.id, row.ood] {
                assert!(cell.evaluated > 0);
                assert_eq!(cell.exact, Some(1.0));
                assert_eq!(cell.within_one, Some(1.0));
            }
        }
    }

    #[test]
    fn empty_pool_gives_undefined_cells() {
        let tree = parse_newick("((A,B),(C,D));").unwrap();
        let samples = tiny_samples(&tree);
        let oracle = OracleRelations::new(&tree, &samples).unwrap();
        let table = pseudo_label_quality(&oracle, &tree, &samples, (8, 0, 0), &QualityOptions::default()).unwrap();
        assert_eq!(table.x_vs_u_transfer.ood, QualityCell { evaluated: 0, exact: None, within_one: None });
        assert_eq!(table.u_vs_u_prediction.id.exact, None);
    }

    fn trained_like() -> (ModelParams<f64>, DatasetSplit) {
        let cfg = GeneratorConfig {
            branching: vec![2, 2, 2],
            level_sigma: vec![1.0, 0.5, 0.3],
            input_dim: 3,
            labeled_per_species: 2,
            unlabeled_per_species: 2,
            ood_unlabeled_per_species: 2,
            test_per_species: 3,
            ..GeneratorConfig::default()
        };
        let (_, split) = generate_synthetic(&cfg).unwrap();
        let shape = crate::numerics::ModelShape::new(3, split.num_categories(), 4);
        let params = ModelParams::init(&shape, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (params, split)
    }

    #[test]
    fn report_round_trip_and_schema() {
        let (params, split) = trained_like();
        let mut report = evaluate(&params, &split.tree, &split, &EvalOptions::default()).unwrap();
        report.curve =
            vec![CurvePoint { step: 0, top1: 0.1, top5: 0.5 }, CurvePoint { step: 10, top1: 0.2, top5: 0.6 }];
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(validate_report_json(&value).unwrap(), report);
        let csv = fs::read_to_string(dir.path().join(CURVE_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 1 + report.curve.len());

        let mut broken = value.clone();
        broken.as_object_mut().unwrap().remove("top5");
        assert!(matches!(validate_report_json(&broken), Err(EvalError::Schema(_))));
    }

    #[test]
    fn evaluate_rejects_mismatched_model() {
        let (_, split) = trained_like();
        let shape = crate::numerics::ModelShape::new(3, split.num_categories() + 1, 4);
        let params = ModelParams::<f64>::zeros(&shape).unwrap();
        assert!(matches!(
            evaluate(&params, &split.tree, &split, &EvalOptions::default()),
            Err(EvalError::CategoryMismatch { .. })
        ));
    }

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn topk_is_monotone_in_k(rows in proptest::collection::vec(simplex(6), 1..20), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<usize> = rows.iter().map(|_| rand::Rng::random_range(&mut rng, 0..6)).collect();
            let probs = Matrix::from_rows(&rows);
            let mut last = 0.0;
            for k in 1..=6 {
                let acc = topk_from_probs(&probs, &truth, k).unwrap();
                prop_assert!(acc >= last);
                last = acc;
            }
            prop_assert_eq!(last, 1.0);
        }

        #[test]
        fn dispersion_is_nonnegative_and_permutation_invariant(
            groups in proptest::collection::vec(proptest::collection::vec(simplex(4), 2..6), 1..5),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let base = kl_dispersion_groups(&groups).unwrap();
            prop_assert!(base >= 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = groups.clone();
            for g in shuffled.iter_mut() {
                g.shuffle(&mut rng);
            }
            shuffled.shuffle(&mut rng);
            let again = kl_dispersion_groups(&shuffled).unwrap();
            prop_assert!((base - again).abs() <= 1e-12 * (1.0 + base.abs()));
        }
    }
}
