//! CSV sample files, Newick tree file and a JSON manifest.
//!
//! Sample files carry a header `id,species[,latent_species],f_0,...,f_{D-1}`.
//! `species` is empty for unlabeled rows. The optional `latent_species`
//! column holds generator ground truth and is only read by evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetSplit, GeneratorConfig, Sample};
use crate::taxonomy::{parse_newick, TaxonomyTree};

pub const TREE_FILE: &str = "tree.nwk";
pub const LABELED_FILE: &str = "labeled.csv";
pub const UNLABELED_FILE: &str = "unlabeled.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled_in: usize,
    pub unlabeled_out: usize,
    pub test_in: usize,
    pub test_out: usize,
}

impl SplitCounts {
    pub fn of(split: &DatasetSplit) -> Self {
        Self {
            labeled: split.labeled.len(),
            unlabeled_in: split.unlabeled_in.len(),
            unlabeled_out: split.unlabeled_out.len(),
            test_in: split.test_in.len(),
            test_out: split.test_out.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorConfig>,
    pub input_dim: usize,
    pub num_levels: usize,
    pub counts: SplitCounts,
    pub in_label_space: Vec<String>,
    pub ood_species: Vec<String>,
}

impl DatasetManifest {
    pub fn describe(split: &DatasetSplit, generator: Option<&GeneratorConfig>) -> Self {
        let ood: BTreeSet<&str> =
            split.unlabeled_out.iter().chain(&split.test_out).filter_map(|s| s.latent_species.as_deref()).collect();
        Self {
            format_version: 1,
            seed: generator.map(|g| g.seed),
            generator: generator.cloned(),
            input_dim: split.input_dim(),
            num_levels: split.tree.num_levels(),
            counts: SplitCounts::of(split),
            in_label_space: split.categories(),
            ood_species: ood.into_iter().map(str::to_string).collect(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn write_samples(path: &Path, samples: &[&Sample], dim: usize) -> Result<(), DataError> {
    let mut out = String::from("id,species,latent_species");
    for i in 0..dim {
        out.push_str(&format!(",f_{i}"));
    }
    out.push('\n');
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for s in samples {
        let mut record =
            vec![s.id.clone(), s.species.clone().unwrap_or_default(), s.latent_species.clone().unwrap_or_default()];
        // Display for f64 prints the shortest string that parses back exactly
        record.extend(s.features.iter().map(|x| x.to_string()));
        writer.write_record(&record).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    }
    let body = writer.into_inner().map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    out.push_str(&String::from_utf8_lossy(&body));
    fs::write(path, out).map_err(io_err(path))
}

/// Writes tree, sample files and manifest into `dir` (created if missing).
pub fn save_dataset(
    split: &DatasetSplit,
    dir: &Path,
    generator: Option<&GeneratorConfig>,
) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tree_path = dir.join(TREE_FILE);
    fs::write(&tree_path, split.tree.to_newick() + "\n").map_err(io_err(&tree_path))?;
    let dim = split.input_dim();
    write_samples(&dir.join(LABELED_FILE), &split.labeled.iter().collect::<Vec<_>>(), dim)?;
    write_samples(
        &dir.join(UNLABELED_FILE),
        &split.unlabeled_in.iter().chain(&split.unlabeled_out).collect::<Vec<_>>(),
        dim,
    )?;
    write_samples(&dir.join(TEST_FILE), &split.test_in.iter().chain(&split.test_out).collect::<Vec<_>>(), dim)?;
    let manifest = DatasetManifest::describe(split, generator);
    let path = dir.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|source| DataError::Manifest { path: path.clone(), source })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

struct Layout {
    latent: bool,
    dim: usize,
}

fn read_layout(path: &Path, headers: &csv::StringRecord) -> Result<Layout, DataError> {
    let bad = |message: String| DataError::Header { path: path.to_path_buf(), message };
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names.len() < 2 || names[0] != "id" || names[1] != "species" {
        return Err(bad(format!("expected 'id,species,...', got '{}'", names.join(","))));
    }
    let latent = names.get(2) == Some(&"latent_species");
    let first = if latent { 3 } else { 2 };
    for (i, name) in names[first..].iter().enumerate() {
        if *name != format!("f_{i}") {
            return Err(bad(format!("column {} is '{name}', expected 'f_{i}'", first + i + 1)));
        }
    }
    Ok(Layout { latent, dim: names.len() - first })
}

/// Reads one sample file. Species names are checked against `tree`; an
/// `expected_dim` of `None` accepts whatever the header declares.
fn read_samples(
    path: &Path,
    tree: &TaxonomyTree,
    expected_dim: Option<usize>,
) -> Result<(Vec<Sample>, usize), DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Ok((Vec::new(), expected_dim.unwrap_or(0)));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DataError::Parse { path: path.to_path_buf(), line: 1, message: e.to_string() })?
        .clone();
    let layout = read_layout(path, &headers)?;
    if let Some(expected) = expected_dim {
        if expected != layout.dim && expected != 0 {
            return Err(DataError::Dimension { path: path.to_path_buf(), line: 1, expected, got: layout.dim });
        }
    }
    let first = if layout.latent { 3 } else { 2 };
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != first + layout.dim {
            return Err(DataError::Dimension {
                path: path.to_path_buf(),
                line,
                expected: layout.dim,
                got: record.len().saturating_sub(first),
            });
        }
        let species_field = |i: usize| -> Result<Option<String>, DataError> {
            let name = record[i].trim();
            if name.is_empty() {
                return Ok(None);
            }
            if !tree.contains_species(name) {
                return Err(DataError::UnknownSpecies { path: path.to_path_buf(), line, species: name.to_string() });
            }
            Ok(Some(name.to_string()))
        };
        let species = species_field(1)?;
        let latent_species = if layout.latent { species_field(2)? } else { None };
        let mut features = Vec::with_capacity(layout.dim);
        for (i, field) in record.iter().skip(first).enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("f_{i} = '{field}' is not a number"),
            })?;
            if !value.is_finite() {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("f_{i} is not finite"),
                });
            }
            features.push(value);
        }
        out.push(Sample { id: record[0].trim().to_string(), features, species, latent_species });
    }
    Ok((out, layout.dim))
}

fn read_tree(path: &Path) -> Result<TaxonomyTree, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_newick(&text)?)
}

/// Loads a tree plus labeled and unlabeled sample files. The label space is
/// the set of labeled species. Unlabeled rows whose latent species is known
/// and outside the label space go to `unlabeled_out`, all others to
/// `unlabeled_in`.
pub fn load_dataset(
    tree_path: &Path,
    labeled_path: &Path,
    unlabeled_path: &Path,
) -> Result<(TaxonomyTree, DatasetSplit), DataError> {
    let tree = read_tree(tree_path)?;
    let (labeled, dim) = read_samples(labeled_path, &tree, None)?;
    if let Some(s) = labeled.iter().find(|s| s.species.is_none()) {
        return Err(DataError::Invalid(format!("{}: labeled row '{}' has no species", labeled_path.display(), s.id)));
    }
    let in_label_space: BTreeSet<String> = labeled.iter().filter_map(|s| s.species.clone()).collect();
    let (unlabeled, _) = read_samples(unlabeled_path, &tree, Some(dim))?;
    let split = assemble(tree.clone(), labeled, unlabeled, Vec::new(), in_label_space);
    split.validate()?;
    Ok((tree, split))
}

fn assemble(
    tree: TaxonomyTree,
    labeled: Vec<Sample>,
    unlabeled: Vec<Sample>,
    test: Vec<Sample>,
    in_label_space: BTreeSet<String>,
) -> DatasetSplit {
    let outside = |s: &Sample| s.latent_species.as_ref().is_some_and(|l| !in_label_space.contains(l));
    let (unlabeled_out, unlabeled_in): (Vec<_>, Vec<_>) = unlabeled.into_iter().partition(|s| outside(s));
    let (test_out, test_in): (Vec<_>, Vec<_>) = test.into_iter().partition(|s| outside(s));
    DatasetSplit { tree, labeled, unlabeled_in, unlabeled_out, test_in, test_out, in_label_space }
}

/// Loads a directory written by [`save_dataset`]. The manifest's label space
/// takes precedence over the labeled species (they coincide for generated data).
pub fn load_dataset_dir(dir: &Path) -> Result<(DatasetSplit, DatasetManifest), DataError> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| DataError::Manifest { path: manifest_path.clone(), source })?;
    let tree = read_tree(&dir.join(TREE_FILE))?;
    let dim = Some(manifest.input_dim);
    let (labeled, _) = read_samples(&dir.join(LABELED_FILE), &tree, dim)?;
    let (unlabeled, _) = read_samples(&dir.join(UNLABELED_FILE), &tree, dim)?;
    let test_path = dir.join(TEST_FILE);
    let test = if test_path.exists() { read_samples(&test_path, &tree, dim)?.0 } else { Vec::new() };
    let space = manifest.in_label_space.iter().cloned().collect();
    let split = assemble(tree, labeled, unlabeled, test, space);
    split.validate()?;
    Ok((split, manifest))
}
