use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{objective, ObjectiveSettings, StepBatch};
use super::{Checkpoint, TrainConfig, TrainError};
use crate::data::{feature_matrix, sample_batch, DatasetSplit, Sample};
use crate::evaluation::{topk_accuracy, CurvePoint};
use crate::losses::{total_loss, LossReport};
use crate::numerics::{cosine_lr, sgd_momentum_step_grouped, ModelParams, ModelShape};
use crate::taxonomy::{relation_weights_with, RelationTable, RelationWeights, TaxonomyTree};
use crate::Scalar;

/// Stream id reserved for parameter initialization; steps use their index.
const INIT_STREAM: u64 = u64::MAX;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// What was in flight when a step produced non-finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: usize,
    pub message: String,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub l_c: Option<f64>,
    pub l_r: Option<f64>,
    pub l_u: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<StepMetrics>,
    pub curve: Vec<CurvePoint>,
    pub weights: RelationWeights,
    /// The tree relations were trained against (truncated if configured).
    pub tree: TaxonomyTree,
}

pub struct Trainer<'a, T> {
    config: TrainConfig,
    hash: String,
    split: &'a DatasetSplit,
    tree: TaxonomyTree,
    weights: RelationWeights,
    relations: RelationTable,
    /// Class index of every labeled sample.
    classes: Vec<usize>,
    params: ModelParams<T>,
    velocity: ModelParams<T>,
    step: usize,
    metrics: Vec<StepMetrics>,
    curve: Vec<CurvePoint>,
    log: Option<BufWriter<File>>,
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Fresh run: validates the config against the data and initializes
    /// parameters from the seed. Truncates an existing metrics log.
    pub fn new(config: TrainConfig, split: &'a DatasetSplit) -> Result<Self, TrainError> {
        let mut trainer = Self::prepare(config, split, None)?;
        trainer.open_log(false)?;
        Ok(trainer)
    }

    /// Continues from a checkpoint written under the same config. Appends to
    /// the metrics log.
    pub fn resume(checkpoint: Checkpoint<T>, config: TrainConfig, split: &'a DatasetSplit) -> Result<Self, TrainError> {
        let expected = config.hash();
        if checkpoint.config_hash != expected {
            return Err(TrainError::HashMismatch { expected, found: checkpoint.config_hash });
        }
        if checkpoint.step > config.total_steps {
            return Err(TrainError::Config(format!(
                "checkpoint is at step {} past total_steps {}",
                checkpoint.step, config.total_steps
            )));
        }
        let mut trainer = Self::prepare(config, split, Some(checkpoint))?;
        trainer.open_log(true)?;
        Ok(trainer)
    }

    fn prepare(config: TrainConfig, split: &'a DatasetSplit, from: Option<Checkpoint<T>>) -> Result<Self, TrainError> {
        config.validate()?;
        split.validate()?;
        if config.batch_size > split.labeled.len() {
            return Err(TrainError::Config(format!(
                "batch_size {} exceeds the {} labeled samples",
                config.batch_size,
                split.labeled.len()
            )));
        }
        let tree = match config.tree_depth {
            Some(d) => split.tree.truncate(d)?,
            None => split.tree.clone(),
        };
        let categories = split.categories();
        let index = split.category_index();
        let classes = split
            .labeled
            .iter()
            .map(|s| s.species.as_ref().and_then(|sp| index.get(sp).copied()).expect("validated split"))
            .collect();
        let relations = RelationTable::new(&tree, &categories)?;
        let weights = if config.variant.uses_relations() {
            relation_weights_with(&tree, &split.labeled_counts(), config.weight_rule)?
        } else {
            RelationWeights::uniform(tree.num_levels())
        };
        if weights.degenerate {
            log::warn!("labeled set realizes a single relation level; relation weights are one-hot");
        }
        let shape = ModelShape {
            input_dim: split.input_dim(),
            hidden_dims: config.hidden_dims.clone(),
            num_categories: split.num_categories(),
            num_levels: tree.num_levels(),
        };
        let hash = config.hash();
        let (params, velocity, step) = match from {
            Some(ckpt) => {
                if ckpt.params.shape() != shape {
                    return Err(TrainError::Config(format!(
                        "checkpoint model shape {:?} does not fit the data ({shape:?})",
                        ckpt.params.shape()
                    )));
                }
                (ckpt.params, ckpt.velocity, ckpt.step)
            }
            None => {
                let params = ModelParams::init(&shape, &mut step_rng(config.seed, INIT_STREAM))?;
                let velocity = params.zeros_like();
                (params, velocity, 0)
            }
        };
        Ok(Self {
            config,
            hash,
            split,
            tree,
            weights,
            relations,
            classes,
            params,
            velocity,
            step,
            metrics: Vec::new(),
            curve: Vec::new(),
            log: None,
        })
    }

    fn open_log(&mut self, append: bool) -> Result<(), TrainError> {
        if let Some(path) = &self.config.metrics_path {
            let io = |source| TrainError::Io { path: path.clone(), source };
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io)?;
            }
            let file =
                OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path).map_err(io)?;
            self.log = Some(BufWriter::new(file));
        }
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn tree(&self) -> &TaxonomyTree {
        &self.tree
    }

    pub fn weights(&self) -> &RelationWeights {
        &self.weights
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(self.hash.clone(), self.config.seed, self.step, self.params.clone(), self.velocity.clone())
    }

    /// Runs until `stop` steps are complete (clamped to `total_steps`).
    pub fn run_until(&mut self, stop: usize) -> Result<(), TrainError> {
        let stop = stop.min(self.config.total_steps);
        while self.step < stop {
            self.train_step()?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) {
                self.save_checkpoint()?;
            }
            if self.config.eval_every > 0
                && (self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.total_steps)
            {
                self.record_eval()?;
            }
        }
        self.flush()?;
        Ok(())
    }

    /// Runs to `total_steps` and returns the final state.
    pub fn run(mut self) -> Result<TrainOutcome<T>, TrainError> {
        self.run_until(self.config.total_steps)?;
        self.save_checkpoint()?;
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome<T> {
        TrainOutcome {
            checkpoint: self.checkpoint(),
            metrics: self.metrics,
            curve: self.curve,
            weights: self.weights,
            tree: self.tree,
        }
    }

    pub fn save_checkpoint(&self) -> Result<(), TrainError> {
        match &self.config.checkpoint_path {
            Some(path) => self.checkpoint().save(path),
            None => Ok(()),
        }
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        if let (Some(log), Some(path)) = (self.log.as_mut(), &self.config.metrics_path) {
            log.flush().map_err(|source| TrainError::Io { path: path.clone(), source })?;
        }
        Ok(())
    }

    fn record_eval(&mut self) -> Result<(), TrainError> {
        if self.split.test_in.is_empty() {
            return Ok(());
        }
        let index = self.split.category_index();
        let k5 = 5.min(self.split.num_categories());
        self.curve.push(CurvePoint {
            step: self.step,
            top1: topk_accuracy(&self.params, &self.split.test_in, &index, 1)?,
            top5: topk_accuracy(&self.params, &self.split.test_in, &index, k5)?,
        });
        Ok(())
    }

    fn train_step(&mut self) -> Result<(), TrainError> {
        let step = self.step;
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, step as u64);
        let lr = cosine_lr(step, cfg.total_steps, cfg.base_lr)?;
        let batch = sample_batch(self.split, cfg.batch_size, cfg.mu, cfg.unlabeled_pool, &mut rng)?;
        let use_unlabeled = cfg.variant.uses_relations() && step >= cfg.warmup_steps;
        let unlabeled: Vec<&Sample> =
            if use_unlabeled { batch.unlabeled.iter().map(|&i| self.split.unlabeled(i)).collect() } else { Vec::new() };
        let labeled: Vec<&Sample> = batch.labeled.iter().map(|&i| &self.split.labeled[i]).collect();
        let labels: Vec<usize> = batch.labeled.iter().map(|&i| self.classes[i]).collect();
        let labeled_relations =
            labels.iter().map(|&a| labels.iter().map(|&b| self.relations.get(a, b)).collect()).collect();
        let step_batch = StepBatch {
            input: feature_matrix(labeled.iter().copied().chain(unlabeled.iter().copied()), self.split.input_dim()),
            labels,
            n_unlabeled: unlabeled.len(),
            labeled_relations,
        };
        let settings = ObjectiveSettings {
            variant: cfg.variant,
            pseudo: cfg.pseudo(),
            weights: &self.weights,
            full_routing: cfg.full_gradient_routing,
            use_unlabeled,
        };

        let diagnose = |message: String, parts: Option<(f64, f64, f64)>| {
            TrainError::NonFinite(Box::new(Diagnostic {
                step,
                message,
                labeled_ids: labeled.iter().map(|s| s.id.clone()).collect(),
                unlabeled_ids: unlabeled.iter().map(|s| s.id.clone()).collect(),
                l_c: parts.map(|p| p.0),
                l_r: parts.map(|p| p.1),
                l_u: parts.map(|p| p.2),
            }))
        };
        let value = match objective(&self.params, &step_batch, &settings, None, &mut rng) {
            Ok(v) => v,
            Err(TrainError::Numerics(e)) => return Err(self.dump(diagnose(e.to_string(), None))),
            Err(e) => return Err(e),
        };
        let parts = (value.l_c.as_f64(), value.l_r.as_f64(), value.l_u.as_f64());
        let mut report = match total_loss(parts.0, parts.1, parts.2) {
            Ok(r) => r,
            Err(e) => return Err(self.dump(diagnose(e.to_string(), Some(parts)))),
        };
        if let Some(term) = &value.unlabeled_term {
            match cfg.variant {
                super::Variant::RelationPl => report.selected_pair_count = term.selected,
                _ => report.selected_triplet_count = term.selected,
            }
            report.selection_histogram = term.histogram.clone();
        } else {
            report.selection_histogram = vec![0; self.tree.num_levels()];
        }
        let (momentum, decay) = (T::of(cfg.momentum), T::of(cfg.weight_decay));
        if lr > 0.0 {
            if let Err(e) = sgd_momentum_step_grouped(
                &mut self.params,
                &value.grads,
                &mut self.velocity,
                T::of(lr),
                T::of(lr * cfg.transfer_lr_scale),
                momentum,
                decay,
            ) {
                return Err(self.dump(diagnose(e.to_string(), Some(parts))));
            }
        }
        let line = StepMetrics { step, lr, report };
        if let (Some(log), Some(path)) = (self.log.as_mut(), &self.config.metrics_path) {
            let text = serde_json::to_string(&line).expect("metrics serialize");
            writeln!(log, "{text}").map_err(|source| TrainError::Io { path: path.clone(), source })?;
        }
        self.metrics.push(line);
        self.step += 1;
        Ok(())
    }

    /// Writes the diagnostic next to the metrics log, if there is one.
    fn dump(&self, err: TrainError) -> TrainError {
        if let (TrainError::NonFinite(diag), Some(path)) = (&err, &self.config.metrics_path) {
            let target: PathBuf = diagnostic_path(path);
            if let Ok(text) = serde_json::to_string_pretty(diag) {
                if let Err(e) = std::fs::write(&target, text) {
                    log::error!("could not write diagnostic {}: {e}", target.display());
                }
            }
        }
        err
    }
}

pub fn diagnostic_path(metrics: &Path) -> PathBuf {
    metrics.with_extension("diagnostic.json")
}

/// Trains from scratch to `total_steps`.
pub fn train<T: Scalar>(config: TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome<T>, TrainError> {
    Trainer::new(config, split)?.run()
}

/// Continues a checkpointed run to `total_steps`.
pub fn resume<T: Scalar>(
    checkpoint: Checkpoint<T>,
    config: TrainConfig,
    split: &DatasetSplit,
) -> Result<TrainOutcome<T>, TrainError> {
    Trainer::resume(checkpoint, config, split)?.run()
}
