//! Samples, dataset splits, the synthetic taxonomy-structured generator,
//! on-disk ingestion, and batch sampling.

mod batch;
mod generate;
mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;
use crate::taxonomy::{TaxonomyError, TaxonomyTree};
use crate::Scalar;

pub use batch::{reversed_pairing, sample_batch, Batch, UnlabeledPool};
pub use generate::{generate_synthetic, GeneratorConfig};
pub use io::{load_dataset, load_dataset_dir, save_dataset, DatasetManifest, SplitCounts};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}, line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{path}: bad header: {message}")]
    Header { path: PathBuf, message: String },
    #[error("{path}, line {line}: expected {expected} features, got {got}")]
    Dimension { path: PathBuf, line: u64, expected: usize, got: usize },
    #[error("{path}, line {line}: unknown species '{species}'")]
    UnknownSpecies { path: PathBuf, line: u64, species: String },
    #[error("{path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Invalid(String),
    #[error("batch asks for {requested} labeled samples, pool holds {available}")]
    BatchTooLarge { requested: usize, available: usize },
}

/// One sample. `species` is the visible label (labeled pool only);
/// `latent_species` is the generator's ground truth, used for evaluation and
/// never read by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub species: Option<String>,
    pub latent_species: Option<String>,
}

impl Sample {
    /// Visible label if present, else the latent one.
    pub fn truth(&self) -> Option<&str> {
        self.species.as_deref().or(self.latent_species.as_deref())
    }
}

/// Stacks sample features row-wise.
pub fn feature_matrix<'a, T: Scalar>(samples: impl IntoIterator<Item = &'a Sample>, dim: usize) -> Matrix<T> {
    let mut data = Vec::new();
    let mut rows = 0;
    for s in samples {
        debug_assert_eq!(s.features.len(), dim);
        data.extend(s.features.iter().map(|&x| T::of(x)));
        rows += 1;
    }
    Matrix::from_vec(rows, dim, data)
}

/// Labeled pool `X`, in-distribution and out-of-distribution unlabeled
/// pools, and held-out evaluation samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub tree: TaxonomyTree,
    pub labeled: Vec<Sample>,
    pub unlabeled_in: Vec<Sample>,
    pub unlabeled_out: Vec<Sample>,
    /// Held-out samples of in-label-space species.
    pub test_in: Vec<Sample>,
    /// Held-out samples of species outside the label space.
    pub test_out: Vec<Sample>,
    pub in_label_space: BTreeSet<String>,
}

impl DatasetSplit {
    /// Category names in class-index order.
    pub fn categories(&self) -> Vec<String> {
        self.in_label_space.iter().cloned().collect()
    }

    pub fn num_categories(&self) -> usize {
        self.in_label_space.len()
    }

    pub fn category_index(&self) -> BTreeMap<String, usize> {
        self.in_label_space.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.all_samples().next().map_or(0, |s| s.features.len())
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled_in.len() + self.unlabeled_out.len()
    }

    /// Unlabeled sample `i` of the pooled view `U_in ++ U_out`.
    pub fn unlabeled(&self, i: usize) -> &Sample {
        if i < self.unlabeled_in.len() {
            &self.unlabeled_in[i]
        } else {
            &self.unlabeled_out[i - self.unlabeled_in.len()]
        }
    }

    fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.labeled
            .iter()
            .chain(&self.unlabeled_in)
            .chain(&self.unlabeled_out)
            .chain(&self.test_in)
            .chain(&self.test_out)
    }

    /// Labeled species histogram, the input to relation weights.
    pub fn labeled_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.labeled {
            if let Some(sp) = &s.species {
                *counts.entry(sp.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Checks every split invariant.
    pub fn validate(&self) -> Result<(), DataError> {
        let dim = self.input_dim();
        for s in self.all_samples() {
            if s.features.len() != dim {
                return Err(DataError::Invalid(format!(
                    "sample {} has {} features, expected {dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(DataError::Invalid(format!("sample {} has non-finite features", s.id)));
            }
            for name in s.species.iter().chain(&s.latent_species) {
                if !self.tree.contains_species(name) {
                    return Err(DataError::Invalid(format!("sample {} names unknown species '{name}'", s.id)));
                }
            }
        }
        for name in &self.in_label_space {
            if !self.tree.contains_species(name) {
                return Err(DataError::Invalid(format!("label space names unknown species '{name}'")));
            }
        }
        for s in &self.labeled {
            match &s.species {
                Some(sp) if self.in_label_space.contains(sp) => {}
                Some(sp) => {
                    return Err(DataError::Invalid(format!(
                        "labeled sample {} has species '{sp}' outside the label space",
                        s.id
                    )))
                }
                None => return Err(DataError::Invalid(format!("labeled sample {} has no species", s.id))),
            }
        }
        let inside = |s: &Sample| s.latent_species.as_ref().map(|l| self.in_label_space.contains(l));
        for s in self.unlabeled_in.iter().chain(&self.test_in) {
            if inside(s) == Some(false) {
                return Err(DataError::Invalid(format!(
                    "in-distribution sample {} has out-of-space latent species",
                    s.id
                )));
            }
        }
        for s in self.unlabeled_out.iter().chain(&self.test_out) {
            if inside(s) == Some(true) {
                return Err(DataError::Invalid(format!(
                    "out-of-distribution sample {} has in-space latent species",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// The halved-label-space protocol: keep every other in-space species
    /// (leaf order) as the label space and demote the rest, with all of their
    /// samples, to the out-of-distribution pools as unlabeled data.
    pub fn halve_label_space(&self) -> Result<DatasetSplit, DataError> {
        let ordered: Vec<&str> = self.tree.leaf_names().filter(|n| self.in_label_space.contains(*n)).collect();
        let kept: BTreeSet<String> = ordered.iter().step_by(2).map(|s| s.to_string()).collect();
        if kept.len() < 2 || kept.len() == ordered.len() {
            return Err(DataError::Invalid("label space too small to halve".into()));
        }
        let keeps = |s: &Sample| s.truth().is_some_and(|t| kept.contains(t));
        let demote = |s: &Sample| Sample {
            species: None,
            latent_species: s.latent_species.clone().or_else(|| s.species.clone()),
            ..s.clone()
        };
        let mut out = DatasetSplit {
            tree: self.tree.clone(),
            labeled: self.labeled.iter().filter(|s| keeps(s)).cloned().collect(),
            unlabeled_in: self.unlabeled_in.iter().filter(|s| keeps(s)).cloned().collect(),
            unlabeled_out: Vec::new(),
            test_in: self.test_in.iter().filter(|s| keeps(s)).cloned().collect(),
            test_out: Vec::new(),
            in_label_space: kept.clone(),
        };
        out.unlabeled_out = self
            .labeled
            .iter()
            .chain(&self.unlabeled_in)
            .filter(|s| !keeps(s))
            .map(demote)
            .chain(self.unlabeled_out.iter().cloned())
            .collect();
        out.test_out =
            self.test_in.iter().filter(|s| !keeps(s)).map(demote).chain(self.test_out.iter().cloned()).collect();
        out.validate()?;
        Ok(out)
    }

    /// Replaces the tree, e.g. with a truncated copy. Species must still resolve.
    pub fn with_tree(&self, tree: TaxonomyTree) -> Result<DatasetSplit, DataError> {
        let out = DatasetSplit { tree, ..self.clone() };
        out.validate()?;
        Ok(out)
    }
}
