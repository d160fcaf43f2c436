//! The optimization loop: batches, objectives, SGD, metrics and checkpoints.

mod checkpoint;
mod objective;
mod trainer;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, UnlabeledPool};
use crate::evaluation::EvalError;
use crate::losses::{LossError, PseudoLabelConfig};
use crate::numerics::NumericsError;
use crate::taxonomy::{TaxonomyError, WeightRule};

pub use checkpoint::Checkpoint;
pub use objective::{objective, ObjectiveSettings, ObjectiveValue, Selection, StepBatch};
pub use trainer::{diagnostic_path, resume, train, Diagnostic, StepMetrics, TrainOutcome, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint was written under config {found}, current config hashes to {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("non-finite values at step {}: {}", .0.step, .0.message)]
    NonFinite(Box<Diagnostic>),
}

/// Which unlabeled objective runs alongside the supervised ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Category cross-entropy on labeled data only.
    BaselineSupervised,
    /// Confidence-thresholded relation pseudo-labels on unlabeled pairs.
    RelationPl,
    /// Triplet consistency among unlabeled samples.
    TripletCr,
    /// Relations transferred from labeled pairs to unlabeled samples.
    #[default]
    LabelTransfer,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::BaselineSupervised, Variant::RelationPl, Variant::TripletCr, Variant::LabelTransfer];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineSupervised => "baseline_supervised",
            Variant::RelationPl => "relation_pl",
            Variant::TripletCr => "triplet_cr",
            Variant::LabelTransfer => "label_transfer",
        }
    }

    pub fn uses_relations(self) -> bool {
        self != Variant::BaselineSupervised
    }
}

impl std::str::FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown variant '{s}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub total_steps: usize,
    pub base_lr: f64,
    /// Multiplier on the learning rate of the transfer tensor only.
    pub transfer_lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Labeled samples per batch (`N`).
    pub batch_size: usize,
    /// Unlabeled-to-labeled ratio per batch.
    pub mu: usize,
    pub confidence_threshold: f64,
    pub expectation_margin: f64,
    pub triplet_samples: usize,
    pub transfer_cap: usize,
    /// Train against the tree cut to this many relation levels.
    pub tree_depth: Option<usize>,
    /// Steps before unlabeled losses switch on.
    pub warmup_steps: usize,
    /// Let every loss update every parameter instead of the split where
    /// supervised relations train only the transfer tensor and unlabeled
    /// losses train only the category branch.
    pub full_gradient_routing: bool,
    pub unlabeled_pool: UnlabeledPool,
    pub weight_rule: WeightRule,
    pub hidden_dims: Vec<usize>,
    /// Held-out top-k every this many steps (0 = off).
    pub eval_every: usize,
    /// Checkpoint cadence in steps (0 = final only).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let pseudo = PseudoLabelConfig::default();
        Self {
            variant: Variant::LabelTransfer,
            total_steps: 5000,
            base_lr: 0.01,
            transfer_lr_scale: 1.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            mu: 4,
            confidence_threshold: pseudo.confidence_threshold,
            expectation_margin: pseudo.expectation_margin,
            triplet_samples: pseudo.triplet_samples,
            transfer_cap: pseudo.transfer_cap,
            tree_depth: None,
            warmup_steps: 0,
            full_gradient_routing: false,
            unlabeled_pool: UnlabeledPool::Pooled,
            weight_rule: WeightRule::Complement,
            hidden_dims: vec![64, 64],
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            metrics_path: None,
            seed: 0,
        }
    }
}

/// Keys that do not influence the trajectory and are left out of the hash.
const UNHASHED_KEYS: [&str; 4] = ["eval_every", "checkpoint_every", "checkpoint_path", "metrics_path"];

impl TrainConfig {
    pub fn pseudo(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            confidence_threshold: self.confidence_threshold,
            expectation_margin: self.expectation_margin,
            triplet_samples: self.triplet_samples,
            transfer_cap: self.transfer_cap,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.transfer_lr_scale > 0.0 && self.transfer_lr_scale.is_finite()) {
            return bad(format!("transfer_lr_scale must be positive, got {}", self.transfer_lr_scale));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.mu < 1 {
            return bad("mu must be >= 1".into());
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if let Some(d) = self.tree_depth {
            if d < 2 {
                return bad(format!("tree_depth {d} below 2"));
            }
        }
        self.pseudo().validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every trajectory-relevant key.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            for key in UNHASHED_KEYS {
                map.remove(key);
            }
        }
        let canonical = serde_json::to_string(&value).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
