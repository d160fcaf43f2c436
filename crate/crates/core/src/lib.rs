//! Relation-based semi-supervised classification over a taxonomy tree.
//!
//! Pairs of samples are classified by the depth of the lowest common
//! ancestor of their species in a uniform-level taxonomy. A bilinear head
//! maps two category distributions to a relation distribution, which lets
//! unlabeled samples (including ones whose species the classifier has never
//! seen) contribute training signal through relation pseudo-labels, triplet
//! consistency, and label transfer from labeled pairs.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix it to `f64`, which is what the trainer and CLI use.

pub mod data;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod scalar;
pub mod taxonomy;
pub mod training;

pub use scalar::Scalar;
pub use taxonomy::{RelationIndex, RelationWeights, TaxonomyTree};

pub type ModelParams = numerics::ModelParams<f64>;
pub type ModelParams32 = numerics::ModelParams<f32>;
pub type GradientSet = numerics::ModelParams<f64>;
pub type CategoryDistribution = numerics::CategoryDistribution<f64>;
pub type RelationDistribution = numerics::RelationDistribution<f64>;
pub type Matrix = numerics::Matrix<f64>;
pub type Trainer<'a> = training::Trainer<'a, f64>;
pub type Checkpoint = training::Checkpoint<f64>;
