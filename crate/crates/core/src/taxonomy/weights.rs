use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{TaxonomyError, TaxonomyTree};

/// How per-level pair frequencies become loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `w_k ∝ 1 - f_k`, normalized over realizable levels.
    #[default]
    Complement,
    /// `w_k ∝ 1 / f_k`, normalized over realizable levels.
    InverseFrequency,
}

/// Per-relation-level loss weights; sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationWeights {
    pub w: Vec<f64>,
    /// Probability that a uniformly drawn ordered pair of labeled samples
    /// (with replacement) has each relation.
    pub frequencies: Vec<f64>,
    pub rule: WeightRule,
    /// Set when only one relation level occurs in the labeled set; the
    /// weights are then one-hot on that level.
    pub degenerate: bool,
}

impl RelationWeights {
    pub fn uniform(levels: usize) -> Self {
        Self {
            w: vec![1.0 / levels as f64; levels],
            frequencies: vec![1.0 / levels as f64; levels],
            rule: WeightRule::Complement,
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    #[inline]
    pub fn get(&self, level: usize) -> f64 {
        self.w[level]
    }
}

pub fn relation_weights(
    tree: &TaxonomyTree,
    histogram: &BTreeMap<String, usize>,
) -> Result<RelationWeights, TaxonomyError> {
    relation_weights_with(tree, histogram, WeightRule::default())
}

/// Weights from the relation frequencies of a labeled species histogram.
/// Levels that never occur get weight zero and are left out of the
/// normalization.
pub fn relation_weights_with(
    tree: &TaxonomyTree,
    histogram: &BTreeMap<String, usize>,
    rule: WeightRule,
) -> Result<RelationWeights, TaxonomyError> {
    let entries: Vec<(usize, u64)> = histogram
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| tree.species_node(s).map(|n| (n, c as u64)))
        .collect::<Result<_, _>>()?;
    let total: u64 = entries.iter().map(|e| e.1).sum();
    if total < 2 {
        return Err(TaxonomyError::EmptyHistogram);
    }
    let levels = tree.num_levels();
    let mut counts = vec![0u128; levels];
    for &(a, ca) in &entries {
        for &(b, cb) in &entries {
            let depth = tree.nodes()[tree.lca(a, b)?].depth;
            counts[depth] += (ca as u128) * (cb as u128);
        }
    }
    let pairs = (total as u128 * total as u128) as f64;
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / pairs).collect();
    let realizable = frequencies.iter().filter(|&&f| f > 0.0).count();

    let mut w = vec![0.0; levels];
    let degenerate = realizable == 1;
    if degenerate {
        let level = frequencies.iter().position(|&f| f > 0.0).expect("one level realizable");
        w[level] = 1.0;
    } else {
        let raw: Vec<f64> = frequencies
            .iter()
            .map(|&f| match (f > 0.0, rule) {
                (false, _) => 0.0,
                (true, WeightRule::Complement) => 1.0 - f,
                (true, WeightRule::InverseFrequency) => 1.0 / f,
            })
            .collect();
        let norm: f64 = raw.iter().sum();
        for (dst, r) in w.iter_mut().zip(raw) {
            *dst = r / norm;
        }
    }
    Ok(RelationWeights { w, frequencies, rule, degenerate })
}
