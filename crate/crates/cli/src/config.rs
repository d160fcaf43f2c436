//! Flat key-value configuration: a TOML file of top-level keys, then
//! `--set key=value` overrides, then dedicated flags.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

/// Where a default comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// The value the method itself prescribes.
    Method,
    /// Chosen so a run fits on one CPU in seconds to minutes.
    Desk,
    /// A knob the method does not have; its default leaves the method unchanged.
    Extension,
    /// Bookkeeping with no effect on the trajectory.
    Harness,
}

impl Origin {
    fn label(self) -> &'static str {
        match self {
            Origin::Method => "method",
            Origin::Desk => "desk-scale",
            Origin::Extension => "extension",
            Origin::Harness => "harness",
        }
    }
}

pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub origin: Origin,
    pub about: &'static str,
}

const fn doc(key: &'static str, default: &'static str, origin: Origin, about: &'static str) -> KeyDoc {
    KeyDoc { key, default, origin, about }
}

pub const TRAIN_KEYS: &[KeyDoc] = &[
    doc("variant", "label_transfer", Origin::Method, "baseline_supervised | relation_pl | triplet_cr | label_transfer"),
    doc("total_steps", "5000", Origin::Desk, "optimizer steps (the method trains for 100k)"),
    doc("base_lr", "0.01", Origin::Desk, "peak learning rate of the cosine schedule"),
    doc("transfer_lr_scale", "1.0", Origin::Extension, "learning-rate multiplier for the transfer tensor"),
    doc("momentum", "0.9", Origin::Method, "SGD momentum"),
    doc("weight_decay", "0.0001", Origin::Desk, "L2 weight decay on every parameter"),
    doc("batch_size", "32", Origin::Method, "labeled samples per batch"),
    doc("mu", "4", Origin::Desk, "unlabeled-to-labeled ratio per batch (the method uses 10)"),
    doc("confidence_threshold", "0.95", Origin::Desk, "max-probability gate for relation pseudo-labels"),
    doc("expectation_margin", "1.0", Origin::Method, "relation-expectation gap that triggers label transfer"),
    doc("triplet_samples", "4096", Origin::Desk, "ordered unlabeled triples sampled per step"),
    doc("transfer_cap", "262144", Origin::Desk, "label-transfer triples enumerated per step before sampling"),
    doc("tree_depth", "unset (full tree)", Origin::Method, "cut the taxonomy to this many relation levels"),
    doc("warmup_steps", "0", Origin::Extension, "steps before unlabeled losses switch on"),
    doc("full_gradient_routing", "false", Origin::Extension, "let every loss update every parameter"),
    doc("unlabeled_pool", "pooled", Origin::Desk, "pooled (in + out of label space) | in_only"),
    doc("weight_rule", "complement", Origin::Desk, "relation weights: complement (1 - f) | inverse_frequency (1 / f)"),
    doc("hidden_dims", "[64, 64]", Origin::Desk, "extractor layer widths"),
    doc("eval_every", "0", Origin::Harness, "held-out accuracy every N steps (0 = off)"),
    doc("checkpoint_every", "0", Origin::Harness, "checkpoint every N steps (0 = final only)"),
    doc("checkpoint_path", "<out>/checkpoint.json", Origin::Harness, "set by the command"),
    doc("metrics_path", "<out>/metrics.jsonl", Origin::Harness, "set by the command"),
    doc("seed", "0", Origin::Harness, "initialization and batch sampling seed"),
];

pub const GENERATOR_KEYS: &[KeyDoc] = &[
    doc("branching", "[4, 3, 3, 3]", Origin::Desk, "children per node at each level (108 species)"),
    doc("input_dim", "32", Origin::Desk, "feature dimension"),
    doc("level_sigma", "[2.0, 1.5, 1.0, 0.7]", Origin::Desk, "mean offset scale per tree level"),
    doc("leaf_sigma", "1.5", Origin::Desk, "per-sample noise around the species mean"),
    doc("labeled_per_species", "5", Origin::Desk, "labeled samples per in-space species"),
    doc("unlabeled_per_species", "20", Origin::Desk, "unlabeled samples per in-space species"),
    doc("ood_unlabeled_per_species", "25", Origin::Desk, "unlabeled samples per out-of-space species"),
    doc("test_per_species", "10", Origin::Desk, "held-out samples per species"),
    doc("ood_fraction", "0.25", Origin::Desk, "share of species kept out of the label space"),
    doc("seed", "0", Origin::Harness, "generator seed"),
];

/// Help text listing every key with its default and origin.
pub fn key_table(title: &str, keys: &[KeyDoc]) -> String {
    let mut out = format!("{title}:\n");
    let width = keys.iter().map(|k| k.key.len()).max().unwrap_or(0);
    for k in keys {
        writeln!(out, "  {:<width$}  {} [{}; default {}]", k.key, k.about, k.origin.label(), k.default).unwrap();
    }
    out
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string so `variant=triplet_cr` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Layered config: file, then `--set` overrides, then `flags` (already
/// typed). Every key is checked against `keys`.
pub fn resolve<C: DeserializeOwned + Serialize>(
    file: Option<&Path>,
    overrides: &[String],
    flags: Vec<(&str, toml::Value)>,
    keys: &[KeyDoc],
) -> Result<C, CliError> {
    let known = |k: &str| keys.iter().any(|d| d.key == k);
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
            text.parse::<toml::Table>().map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(bad) = table.keys().find(|k| !known(k)) {
        return Err(CliError::UnknownKey(bad.clone()));
    }
    for o in overrides {
        let (key, raw) =
            o.split_once('=').ok_or_else(|| CliError::BadConfig(format!("override '{o}' is not key=value")))?;
        let key = key.trim();
        if !known(key) {
            return Err(CliError::UnknownKey(key.to_string()));
        }
        table.insert(key.to_string(), parse_value(raw.trim()));
    }
    for (key, value) in flags {
        table.insert(key.to_string(), value);
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::BadConfig(e.message().to_string()))
}

/// The resolved config as a flat TOML file.
pub fn to_toml<C: Serialize>(config: &C) -> String {
    toml::to_string(config).expect("configs serialize to flat TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use relssl::data::GeneratorConfig;
    use relssl::training::{TrainConfig, Variant};
    use std::collections::BTreeSet;

    fn keys_of<C: Serialize>(c: &C) -> BTreeSet<String> {
        toml::Value::try_from(c).unwrap().as_table().unwrap().keys().cloned().collect()
    }

    #[test]
    fn documented_keys_match_the_structs() {
        let full = TrainConfig {
            tree_depth: Some(3),
            checkpoint_path: Some("c".into()),
            metrics_path: Some("m".into()),
            ..Default::default()
        };
        let documented: BTreeSet<String> = TRAIN_KEYS.iter().map(|k| k.key.to_string()).collect();
        assert_eq!(keys_of(&full), documented);
        let documented: BTreeSet<String> = GENERATOR_KEYS.iter().map(|k| k.key.to_string()).collect();
        assert_eq!(keys_of(&GeneratorConfig::default()), documented);
    }

    #[test]
    fn documented_defaults_are_the_real_ones() {
        let train = TrainConfig::default();
        let as_toml = toml::Value::try_from(&train).unwrap();
        for k in TRAIN_KEYS {
            if let Some(v) = as_toml.get(k.key) {
                assert_eq!(&parse_value(k.default), v, "train key {}", k.key);
            }
        }
        let generator = toml::Value::try_from(GeneratorConfig::default()).unwrap();
        for k in GENERATOR_KEYS {
            assert_eq!(&parse_value(k.default), generator.get(k.key).unwrap(), "generator key {}", k.key);
        }
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "base_lr = 0.5\nseed = 3\nvariant = \"triplet_cr\"\n").unwrap();
        let c: TrainConfig =
            resolve(Some(&path), &["seed=4".into(), "variant=relation_pl".into()], vec![], TRAIN_KEYS).unwrap();
        assert_eq!((c.base_lr, c.seed, c.variant), (0.5, 4, Variant::RelationPl));
        let c: TrainConfig =
            resolve(Some(&path), &["seed=4".into()], vec![("seed", toml::Value::Integer(9))], TRAIN_KEYS).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.total_steps, 5000);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "learning_rate = 0.5\n").unwrap();
        assert!(
            matches!(resolve::<TrainConfig>(Some(&path), &[], vec![], TRAIN_KEYS), Err(CliError::UnknownKey(k)) if k == "learning_rate")
        );
        assert!(matches!(
            resolve::<TrainConfig>(None, &["lr=1".into()], vec![], TRAIN_KEYS),
            Err(CliError::UnknownKey(_))
        ));
        assert!(matches!(
            resolve::<TrainConfig>(None, &["total_steps=many".into()], vec![], TRAIN_KEYS),
            Err(CliError::BadConfig(_))
        ));
        assert!(matches!(
            resolve::<TrainConfig>(None, &["seed".into()], vec![], TRAIN_KEYS),
            Err(CliError::BadConfig(_))
        ));
        let missing = dir.path().join("nope.toml");
        assert!(matches!(
            resolve::<TrainConfig>(Some(&missing), &[], vec![], TRAIN_KEYS),
            Err(CliError::MissingFile { .. })
        ));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = TrainConfig { tree_depth: Some(4), hidden_dims: vec![8], ..Default::default() };
        let back: TrainConfig = toml::from_str(&to_toml(&c)).unwrap();
        assert_eq!(back, c);
    }
}
