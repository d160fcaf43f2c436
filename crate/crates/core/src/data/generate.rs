use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetSplit, Sample};
use crate::taxonomy::{NodeId, TaxonomyTree};

/// Synthetic taxonomy-structured Gaussian data.
///
/// Every node's mean is its parent's mean plus isotropic noise of scale
/// `level_sigma[depth - 1]`; samples add `leaf_sigma` noise to their
/// species mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Children per node at each level below the root.
    pub branching: Vec<usize>,
    pub input_dim: usize,
    /// Mean perturbation scale for nodes at depth `1..R`.
    pub level_sigma: Vec<f64>,
    pub leaf_sigma: f64,
    pub labeled_per_species: usize,
    pub unlabeled_per_species: usize,
    pub ood_unlabeled_per_species: usize,
    /// Held-out evaluation samples per species (both ID and OOD).
    pub test_per_species: usize,
    pub ood_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            branching: vec![4, 3, 3, 3],
            input_dim: 32,
            level_sigma: vec![2.0, 1.5, 1.0, 0.7],
            leaf_sigma: 1.5,
            labeled_per_species: 5,
            unlabeled_per_species: 20,
            ood_unlabeled_per_species: 25,
            test_per_species: 10,
            ood_fraction: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.branching.is_empty() || self.branching.contains(&0) {
            return bad(format!("branching factors must be positive, got {:?}", self.branching));
        }
        if self.level_sigma.len() != self.branching.len() {
            return bad(format!(
                "{} level sigmas for {} levels below the root",
                self.level_sigma.len(),
                self.branching.len()
            ));
        }
        if self.level_sigma.iter().chain([&self.leaf_sigma]).any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise scales must be finite and non-negative".into());
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.labeled_per_species == 0 {
            return bad("labeled_per_species must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return bad(format!("ood_fraction {} outside [0, 1)", self.ood_fraction));
        }
        Ok(())
    }

    pub fn num_species(&self) -> usize {
        self.branching.iter().product()
    }
}

fn gaussian_around(mean: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sigma * z
        })
        .collect()
}

/// Picks `count` species to hold out, cycling through genera in random order
/// and taking one species per genus per round. A genus gives up its last
/// in-distribution species only once every genus is down to one.
fn pick_ood(tree: &TaxonomyTree, count: usize, rng: &mut ChaCha8Rng) -> BTreeSet<String> {
    let mut genera: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
    for &leaf in tree.leaves() {
        let parent = tree.nodes()[leaf].parent.unwrap_or(leaf);
        match genera.last_mut() {
            Some((g, members)) if *g == parent => members.push(leaf),
            _ => genera.push((parent, vec![leaf])),
        }
    }
    genera.shuffle(rng);
    let mut chosen = BTreeSet::new();
    for floor in [1usize, 0] {
        while chosen.len() < count {
            let before = chosen.len();
            for (_, members) in genera.iter_mut() {
                if chosen.len() == count {
                    break;
                }
                if members.len() > floor {
                    let leaf = members.swap_remove(rng.random_range(0..members.len()));
                    chosen.insert(tree.nodes()[leaf].name.clone());
                }
            }
            if chosen.len() == before {
                break;
            }
        }
    }
    chosen
}

/// Builds the tree and the split. Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<(TaxonomyTree, DatasetSplit), DataError> {
    cfg.validate()?;
    let tree = TaxonomyTree::from_branching(&cfg.branching)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // parents precede children in node order
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(tree.nodes().len());
    for node in tree.nodes() {
        let mean = match node.parent {
            None => vec![0.0; cfg.input_dim],
            Some(p) => gaussian_around(&means[p], cfg.level_sigma[node.depth - 1], &mut rng),
        };
        means.push(mean);
    }

    let n_species = tree.leaves().len();
    let n_ood = (cfg.ood_fraction * n_species as f64).round() as usize;
    if n_species - n_ood < 2 {
        return Err(DataError::Config(format!(
            "ood_fraction {} leaves {} in-distribution species, need at least 2",
            cfg.ood_fraction,
            n_species - n_ood
        )));
    }
    let ood = pick_ood(&tree, n_ood, &mut rng);

    let mut split = DatasetSplit {
        tree: tree.clone(),
        labeled: Vec::new(),
        unlabeled_in: Vec::new(),
        unlabeled_out: Vec::new(),
        test_in: Vec::new(),
        test_out: Vec::new(),
        in_label_space: BTreeSet::new(),
    };
    let mut counter = 0usize;
    let mut draw = |prefix: &str, leaf: NodeId, visible: bool, rng: &mut ChaCha8Rng| {
        counter += 1;
        let name = tree.nodes()[leaf].name.clone();
        Sample {
            id: format!("{prefix}{}", counter - 1),
            features: gaussian_around(&means[leaf], cfg.leaf_sigma, rng),
            species: visible.then(|| name.clone()),
            latent_species: Some(name),
        }
    };
    for &leaf in tree.leaves() {
        let name = &tree.nodes()[leaf].name;
        if ood.contains(name) {
            for _ in 0..cfg.ood_unlabeled_per_species {
                split.unlabeled_out.push(draw("u", leaf, false, &mut rng));
            }
            for _ in 0..cfg.test_per_species {
                split.test_out.push(draw("t", leaf, false, &mut rng));
            }
        } else {
            split.in_label_space.insert(name.clone());
            for _ in 0..cfg.labeled_per_species {
                split.labeled.push(draw("x", leaf, true, &mut rng));
            }
            for _ in 0..cfg.unlabeled_per_species {
                split.unlabeled_in.push(draw("u", leaf, false, &mut rng));
            }
            for _ in 0..cfg.test_per_species {
                split.test_in.push(draw("t", leaf, false, &mut rng));
            }
        }
    }
    split.validate()?;
    Ok((tree, split))
}
