use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use relssl::data::{
    generate_synthetic, load_dataset_dir, save_dataset, DataError, DatasetManifest, DatasetSplit, GeneratorConfig,
};
use relssl::evaluation::{
    emit_report, evaluate as eval_model, validate_report_json, CurvePoint, EvalError, EvalOptions, EvalReport,
    QualityOptions, REPORT_FILE,
};
use relssl::taxonomy::{parse_newick, verify_triplet_consistency, TaxonomyTree};
use relssl::training::{Checkpoint, TrainConfig, TrainError, Trainer, Variant};

use crate::config::{self, GENERATOR_KEYS, TRAIN_KEYS};
use crate::{
    AblateArgs, Axis, CliError, ConfigArgs, EvaluateArgs, GenerateArgs, ModelFlags, TrainArgs, VerifyTreeArgs,
};

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const METRICS_FILE: &str = "metrics.jsonl";
const CURVE_JSON: &str = "curve.json";
const RUN_MANIFEST: &str = "run.json";

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::missing(&path, source)
            }
            DataError::Config(m) => CliError::BadConfig(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::BadConfig(m),
            TrainError::HashMismatch { expected, found } => CliError::HashMismatch { expected, found },
            TrainError::Data(d) => d.into(),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Invariant(m) => CliError::Invariant(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Run(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Refuses to write into a non-empty directory unless forced.
fn claim_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(CliError::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn seed_flag(args: &ConfigArgs) -> Vec<(&'static str, toml::Value)> {
    args.seed.map(|s| ("seed", toml::Value::Integer(s as i64))).into_iter().collect()
}

fn train_config(args: &ConfigArgs, model: &ModelFlags) -> Result<TrainConfig, CliError> {
    let mut flags = seed_flag(args);
    if let Some(v) = &model.variant {
        flags.push(("variant", toml::Value::String(v.clone())));
    }
    if let Some(d) = model.tree_depth {
        flags.push(("tree_depth", toml::Value::Integer(d as i64)));
    }
    let config: TrainConfig = config::resolve(args.config.as_deref(), &args.overrides, flags, TRAIN_KEYS)?;
    config.validate()?;
    Ok(config)
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let gen: GeneratorConfig = config::resolve(
        args.config.config.as_deref(),
        &args.config.overrides,
        seed_flag(&args.config),
        GENERATOR_KEYS,
    )?;
    gen.validate()?;
    claim_dir(&args.output.out, args.output.force)?;
    let (_, split) = generate_synthetic(&gen)?;
    let manifest = save_dataset(&split, &args.output.out, Some(&gen))?;
    let path = args.output.out.join(CONFIG_FILE);
    fs::write(&path, config::to_toml(&gen)).map_err(io_err(&path))?;
    println!(
        "wrote {}: {} species ({} in label space), {} labeled, {} unlabeled, {} test",
        args.output.out.display(),
        split.tree.leaves().len(),
        manifest.in_label_space.len(),
        manifest.counts.labeled,
        manifest.counts.unlabeled_in + manifest.counts.unlabeled_out,
        manifest.counts.test_in + manifest.counts.test_out,
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunManifest {
    config_hash: String,
    seed: u64,
    variant: Variant,
    steps: usize,
    data_dir: PathBuf,
    dataset: DatasetManifest,
    final_loss: Option<f64>,
}

/// Trains into `out` and returns the final checkpoint.
fn run_training(
    config: TrainConfig,
    split: &DatasetSplit,
    dataset: &DatasetManifest,
    data_dir: &Path,
    out: &Path,
    resume: bool,
) -> Result<Checkpoint<f64>, CliError> {
    let config = TrainConfig {
        checkpoint_path: Some(out.join(CHECKPOINT_FILE)),
        metrics_path: Some(out.join(METRICS_FILE)),
        ..config
    };
    let trainer = if resume {
        let path = out.join(CHECKPOINT_FILE);
        if !path.exists() {
            return Err(CliError::missing(&path, "no checkpoint to resume from"));
        }
        Trainer::resume(Checkpoint::load(&path)?, config.clone(), split)?
    } else {
        Trainer::new(config.clone(), split)?
    };
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, config::to_toml(&config)).map_err(io_err(&config_path))?;
    let start = trainer.step();
    let outcome = trainer.run()?;
    if !outcome.curve.is_empty() || !resume {
        write_json(&out.join(CURVE_JSON), &outcome.curve)?;
    }
    let manifest = RunManifest {
        config_hash: config.hash(),
        seed: config.seed,
        variant: config.variant,
        steps: config.total_steps,
        data_dir: data_dir.to_path_buf(),
        dataset: dataset.clone(),
        final_loss: outcome.metrics.last().map(|m| m.report.total),
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    log::info!("trained steps {start}..{} into {}", config.total_steps, out.display());
    Ok(outcome.checkpoint)
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let config = train_config(&args.config, &args.model)?;
    let (split, dataset) = load_dataset_dir(&args.data)?;
    if args.resume {
        fs::create_dir_all(&args.output.out).map_err(io_err(&args.output.out))?;
    } else {
        claim_dir(&args.output.out, args.output.force)?;
    }
    let variant = config.variant;
    let steps = config.total_steps;
    let ckpt = run_training(config, &split, &dataset, &args.data, &args.output.out, args.resume)?;
    println!("trained {variant} for {steps} steps (now at step {}) into {}", ckpt.step, args.output.out.display());
    Ok(())
}

fn model_tree(split: &DatasetSplit, config: &TrainConfig) -> Result<TaxonomyTree, CliError> {
    match config.tree_depth {
        Some(d) => split.tree.truncate(d).map_err(|e| CliError::BadConfig(e.to_string())),
        None => Ok(split.tree.clone()),
    }
}

/// Evaluates the run in `run` and writes the report into `out`.
fn evaluate_run(split: &DatasetSplit, run: &Path, out: &Path, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let config_path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path).map_err(|e| CliError::missing(&config_path, e))?;
    let config: TrainConfig =
        toml::from_str(&text).map_err(|e| CliError::BadConfig(format!("{}: {e}", config_path.display())))?;
    let ckpt_path = run.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        return Err(CliError::missing(&ckpt_path, "no checkpoint"));
    }
    let ckpt: Checkpoint<f64> = Checkpoint::load(&ckpt_path)?;
    let expected = config.hash();
    if ckpt.config_hash != expected {
        return Err(CliError::HashMismatch { expected, found: ckpt.config_hash });
    }
    let tree = model_tree(split, &config)?;
    let mut report = eval_model(&ckpt.params, &tree, split, opts)?;
    let curve_path = run.join(CURVE_JSON);
    if let Ok(text) = fs::read_to_string(&curve_path) {
        report.curve = serde_json::from_str::<Vec<CurvePoint>>(&text)
            .map_err(|e| CliError::Run(format!("{}: {e}", curve_path.display())))?;
    }
    emit_report(&report, out)?;
    // read back what was written and hold it to the schema
    let written = out.join(REPORT_FILE);
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&written).map_err(io_err(&written))?)
        .map_err(|e| CliError::Run(e.to_string()))?;
    validate_report_json(&value)?.check_invariants()?;
    Ok(report)
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let (split, _) = load_dataset_dir(&args.data)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.join("eval"));
    claim_dir(&out, args.force)?;
    let opts = EvalOptions {
        pseudo_labels: (!args.no_pseudo_labels)
            .then(|| QualityOptions { seed: args.seed, ..QualityOptions::default() }),
    };
    let report = evaluate_run(&split, &args.run, &out, &opts)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "top1 {:.4} top5 {:.4} kl_id {} kl_ood {}; report in {}",
        report.top1,
        report.top5,
        show(report.kl_dispersion_id),
        show(report.kl_dispersion_ood),
        out.display()
    );
    Ok(())
}

pub fn verify_tree(args: VerifyTreeArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.tree).map_err(|e| CliError::missing(&args.tree, e))?;
    let tree = parse_newick(text.trim()).map_err(|e| CliError::Run(format!("{}: {e}", args.tree.display())))?;
    let report =
        verify_triplet_consistency(&tree, args.samples, args.seed).map_err(|e| CliError::Run(e.to_string()))?;
    if let Some(path) = &args.out {
        if path.exists() && !args.force {
            return Err(CliError::OutputExists(path.clone()));
        }
        write_json(path, &report)?;
    }
    println!(
        "{} leaves, {} levels; {} triples checked ({}), {} violations",
        tree.leaves().len(),
        tree.num_levels(),
        report.checked,
        if report.exhaustive { "exhaustive" } else { "sampled" },
        report.violations.len()
    );
    for v in report.violations.iter().take(10) {
        println!("  {} {} {}: depths ab {} ac {} bc {}", v.a, v.b, v.c, v.depth_ab, v.depth_ac, v.depth_bc);
    }
    if report.is_consistent() {
        Ok(())
    } else {
        Err(CliError::Violations(report.violations.len()))
    }
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    axis: &'static str,
    value: String,
    seed: u64,
    top1: f64,
    top5: f64,
    kl_dispersion_id: Option<f64>,
    kl_dispersion_ood: Option<f64>,
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let base = train_config(&args.config, &args.model)?;
    let (split, dataset) = load_dataset_dir(&args.data)?;
    claim_dir(&args.output.out, args.output.force)?;

    let cells: Vec<(String, TrainConfig)> = match args.axis {
        Axis::Variant => {
            Variant::ALL.iter().map(|&v| (v.name().to_string(), TrainConfig { variant: v, ..base.clone() })).collect()
        }
        Axis::TreeDepth => (2..=split.tree.num_levels())
            .map(|d| (d.to_string(), TrainConfig { tree_depth: Some(d), ..base.clone() }))
            .collect(),
    };
    let axis = match args.axis {
        Axis::Variant => "variant",
        Axis::TreeDepth => "tree_depth",
    };
    let opts = EvalOptions { pseudo_labels: None };
    let mut rows = Vec::new();
    for (label, cell) in &cells {
        for k in 0..args.seeds {
            let seed = base.seed + k;
            let dir = args.output.out.join(format!("{axis}-{label}")).join(format!("seed{seed}"));
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            run_training(TrainConfig { seed, ..cell.clone() }, &split, &dataset, &args.data, &dir, false)?;
            let report = evaluate_run(&split, &dir, &dir.join("eval"), &opts)?;
            println!("{axis} {label} seed {seed}: top1 {:.4} top5 {:.4}", report.top1, report.top5);
            rows.push(SummaryRow {
                axis,
                value: label.clone(),
                seed,
                top1: report.top1,
                top5: report.top5,
                kl_dispersion_id: report.kl_dispersion_id,
                kl_dispersion_ood: report.kl_dispersion_ood,
            });
        }
    }
    let path = args.output.out.join("summary.csv");
    let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| CliError::Run(e.to_string()))?;
    }
    writer.flush().map_err(io_err(&path))?;
    println!("{} runs; summary in {}", rows.len(), path.display());
    Ok(())
}
