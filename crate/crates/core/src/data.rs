//! Count dataset model: loading, validation, filtering, and group
//! aggregation.
//!
//! A dataset is a nested collection of nonnegative integer count matrices
//! indexed by experimental condition `k`, species `l`, and replicate `i`.
//! All conditions observe the same `L` species with the same per-species
//! feature dimension `d_l`; replicate counts `I_k` may differ per condition.
//!
//! The on-disk layout is a JSON manifest
//! `{"conditions": [{"label", "species": [{"label", "counts_csv"}]}]}`
//! referencing one CSV per (condition, species): a header row of feature
//! labels followed by one integer row per replicate. CSV paths are resolved
//! relative to the manifest's directory.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Multi-source count data shared by all other modules. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDataset {
    condition_labels: Vec<String>,
    species_labels: Vec<String>,
    dims: Vec<usize>,
    feature_labels: Vec<Vec<String>>,
    replicates: Vec<usize>,
    /// `counts[k][l]` has shape `I_k x d_l`.
    counts: Vec<Vec<DMatrix<u64>>>,
}

/// Shape and label digest identifying the dataset a model was fitted to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub dims: Vec<usize>,
    pub replicates: Vec<usize>,
    pub labels_sha256: String,
}

impl CountDataset {
    /// Builds a dataset after validating all shape invariants.
    pub fn new(
        condition_labels: Vec<String>,
        species_labels: Vec<String>,
        feature_labels: Vec<Vec<String>>,
        counts: Vec<Vec<DMatrix<u64>>>,
    ) -> Result<Self> {
        if condition_labels.is_empty() {
            return Err(Error::InvalidDataset("no conditions".into()));
        }
        if species_labels.is_empty() {
            return Err(Error::InvalidDataset("no species".into()));
        }
        if feature_labels.len() != species_labels.len() {
            return Err(Error::InvalidDataset(
                "feature label lists do not match species count".into(),
            ));
        }
        let dims: Vec<usize> = feature_labels.iter().map(|f| f.len()).collect();
        if dims.contains(&0) {
            return Err(Error::InvalidDataset("species with zero features".into()));
        }
        if counts.len() != condition_labels.len() {
            return Err(Error::InvalidDataset(
                "count blocks do not match condition count".into(),
            ));
        }
        let mut replicates = Vec::with_capacity(condition_labels.len());
        for (k, blocks) in counts.iter().enumerate() {
            if blocks.len() != species_labels.len() {
                return Err(Error::InvalidDataset(format!(
                    "condition {k} has {} species blocks, expected {}",
                    blocks.len(),
                    species_labels.len()
                )));
            }
            let i_k = blocks[0].nrows();
            for (l, block) in blocks.iter().enumerate() {
                if block.nrows() != i_k {
                    return Err(Error::InvalidDataset(format!(
                        "condition {k} has inconsistent replicate counts ({} vs {i_k})",
                        block.nrows()
                    )));
                }
                if block.ncols() != dims[l] {
                    return Err(Error::InvalidDataset(format!(
                        "condition {k}, species {l}: {} columns, expected {}",
                        block.ncols(),
                        dims[l]
                    )));
                }
            }
            if i_k == 0 {
                return Err(Error::InvalidDataset(format!(
                    "condition {k} has no replicates"
                )));
            }
            replicates.push(i_k);
        }
        Ok(Self {
            condition_labels,
            species_labels,
            dims,
            feature_labels,
            replicates,
            counts,
        })
    }

    pub fn n_conditions(&self) -> usize {
        self.condition_labels.len()
    }

    pub fn n_species(&self) -> usize {
        self.species_labels.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn replicates(&self) -> &[usize] {
        &self.replicates
    }

    pub fn condition_labels(&self) -> &[String] {
        &self.condition_labels
    }

    pub fn species_labels(&self) -> &[String] {
        &self.species_labels
    }

    pub fn feature_labels(&self, species: usize) -> &[String] {
        &self.feature_labels[species]
    }

    pub fn counts(&self, condition: usize, species: usize) -> &DMatrix<u64> {
        &self.counts[condition][species]
    }

    /// Row total `N_{kl,i}`.
    pub fn row_total(&self, condition: usize, species: usize, replicate: usize) -> u64 {
        self.counts[condition][species].row(replicate).iter().sum()
    }

    /// One replicate's counts for one species, cast to `f64`.
    pub fn sample_vector(&self, condition: usize, species: usize, replicate: usize) -> DVector<f64> {
        let row = self.counts[condition][species].row(replicate);
        DVector::from_fn(self.dims[species], |d, _| row[d] as f64)
    }

    /// Digest of shapes and labels, stored with fitted models so downstream
    /// commands can detect model/data mismatches.
    pub fn fingerprint(&self) -> DatasetFingerprint {
        let mut hasher = Sha256::new();
        for label in &self.condition_labels {
            hasher.update(label.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update([1u8]);
        for (species, features) in self.species_labels.iter().zip(&self.feature_labels) {
            hasher.update(species.as_bytes());
            hasher.update([0u8]);
            for f in features {
                hasher.update(f.as_bytes());
                hasher.update([0u8]);
            }
            hasher.update([1u8]);
        }
        DatasetFingerprint {
            dims: self.dims.clone(),
            replicates: self.replicates.clone(),
            labels_sha256: hex::encode(hasher.finalize()),
        }
    }

    /// Writes the dataset as `manifest.json` plus one counts CSV per
    /// (condition, species) under `dir`, returning the manifest path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut conditions = Vec::new();
        for k in 0..self.n_conditions() {
            let mut species = Vec::new();
            for l in 0..self.n_species() {
                let file_name = format!("counts_k{k}_l{l}.csv");
                let path = dir.join(&file_name);
                let mut body = String::new();
                body.push_str(&self.feature_labels[l].join(","));
                body.push('\n');
                let block = &self.counts[k][l];
                for i in 0..block.nrows() {
                    let row: Vec<String> =
                        (0..block.ncols()).map(|j| block[(i, j)].to_string()).collect();
                    body.push_str(&row.join(","));
                    body.push('\n');
                }
                std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
                species.push(ManifestSpecies {
                    label: self.species_labels[l].clone(),
                    counts_csv: file_name,
                });
            }
            conditions.push(ManifestCondition {
                label: self.condition_labels[k].clone(),
                species,
            });
        }
        let manifest = Manifest { conditions };
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    conditions: Vec<ManifestCondition>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCondition {
    label: String,
    species: Vec<ManifestSpecies>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSpecies {
    label: String,
    counts_csv: String,
}

/// Loads and validates a dataset from a JSON manifest.
///
/// Dimensions are inferred from the CSV headers and cross-checked across
/// conditions; loading is deterministic.
pub fn load_dataset(manifest_path: &Path) -> Result<CountDataset> {
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.conditions.is_empty() {
        return Err(Error::Manifest {
            path: manifest_path.into(),
            msg: "no conditions".into(),
        });
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let species_labels: Vec<String> = manifest.conditions[0]
        .species
        .iter()
        .map(|s| s.label.clone())
        .collect();
    if species_labels.is_empty() {
        return Err(Error::Manifest {
            path: manifest_path.into(),
            msg: "condition lists no species".into(),
        });
    }
    for cond in &manifest.conditions {
        let labels: Vec<String> = cond.species.iter().map(|s| s.label.clone()).collect();
        if labels != species_labels {
            return Err(Error::Manifest {
                path: manifest_path.into(),
                msg: format!(
                    "condition '{}' lists species {labels:?}, expected {species_labels:?}",
                    cond.label
                ),
            });
        }
    }

    let mut feature_labels: Vec<Vec<String>> = Vec::new();
    let mut counts: Vec<Vec<DMatrix<u64>>> = Vec::new();
    for (k, cond) in manifest.conditions.iter().enumerate() {
        let mut blocks = Vec::new();
        for (l, sp) in cond.species.iter().enumerate() {
            let csv_path = base.join(&sp.counts_csv);
            let (labels, block) = read_counts_csv(&csv_path)?;
            if k == 0 {
                feature_labels.push(labels);
            } else if labels != feature_labels[l] {
                return Err(Error::Manifest {
                    path: manifest_path.into(),
                    msg: format!(
                        "feature labels of species '{}' differ between conditions",
                        sp.label
                    ),
                });
            }
            blocks.push(block);
        }
        counts.push(blocks);
    }

    let condition_labels = manifest.conditions.iter().map(|c| c.label.clone()).collect();
    CountDataset::new(condition_labels, species_labels, feature_labels, counts)
}

fn read_counts_csv(path: &Path) -> Result<(Vec<String>, DMatrix<u64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Csv {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let labels: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let width = labels.len();

    let mut rows: Vec<u64> = Vec::new();
    let mut n_rows = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::Csv {
                path: path.into(),
                line: idx + 1,
                msg: format!("ragged row: {} fields, header has {width}", fields.len()),
            });
        }
        for field in &fields {
            let token = field.trim();
            let value: i64 = token.parse().map_err(|_| Error::Csv {
                path: path.into(),
                line: idx + 1,
                msg: format!("non-integer count '{token}'"),
            })?;
            if value < 0 {
                return Err(Error::Csv {
                    path: path.into(),
                    line: idx + 1,
                    msg: format!("negative count {value}"),
                });
            }
            rows.push(value as u64);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::Csv {
            path: path.into(),
            line: 1,
            msg: "no data rows".into(),
        });
    }
    Ok((labels, DMatrix::from_row_slice(n_rows, width, &rows)))
}

/// Per-species mapping from feature identifier to group identifier, with a
/// sentinel group that absorbs unmapped features so totals are conserved.
#[derive(Debug, Clone)]
pub struct GroupMap {
    per_species: Vec<HashMap<String, String>>,
    sentinel: String,
}

impl GroupMap {
    pub fn new(per_species: Vec<HashMap<String, String>>, sentinel: impl Into<String>) -> Self {
        Self {
            per_species,
            sentinel: sentinel.into(),
        }
    }

    /// Maps every feature to itself (aggregation becomes a relabeling no-op).
    pub fn identity(ds: &CountDataset) -> Self {
        let per_species = (0..ds.n_species())
            .map(|l| {
                ds.feature_labels(l)
                    .iter()
                    .map(|f| (f.clone(), f.clone()))
                    .collect()
            })
            .collect();
        Self::new(per_species, "UNMAPPED")
    }

    pub fn sentinel(&self) -> &str {
        &self.sentinel
    }

    /// Group of a feature; the sentinel when the feature is unmapped.
    pub fn group_of(&self, species: usize, feature: &str) -> &str {
        self.per_species[species]
            .get(feature)
            .map(String::as_str)
            .unwrap_or(&self.sentinel)
    }
}

/// Removes, per species, every feature whose count is zero in all replicates
/// of all conditions. Returns the reduced dataset and the removed feature
/// labels per species.
pub fn filter_zero_features(ds: &CountDataset) -> Result<(CountDataset, Vec<Vec<String>>)> {
    let mut keep: Vec<Vec<usize>> = Vec::new();
    let mut removed: Vec<Vec<String>> = Vec::new();
    for l in 0..ds.n_species() {
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..ds.dims()[l] {
            let nonzero = (0..ds.n_conditions())
                .any(|k| ds.counts(k, l).column(j).iter().any(|&v| v > 0));
            if nonzero {
                kept.push(j);
            } else {
                dropped.push(ds.feature_labels(l)[j].clone());
            }
        }
        if kept.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "species '{}' emptied by filtering",
                ds.species_labels()[l]
            )));
        }
        keep.push(kept);
        removed.push(dropped);
    }

    let feature_labels: Vec<Vec<String>> = keep
        .iter()
        .enumerate()
        .map(|(l, kept)| {
            kept.iter()
                .map(|&j| ds.feature_labels(l)[j].clone())
                .collect()
        })
        .collect();
    let counts: Vec<Vec<DMatrix<u64>>> = (0..ds.n_conditions())
        .map(|k| {
            (0..ds.n_species())
                .map(|l| {
                    let block = ds.counts(k, l);
                    DMatrix::from_fn(block.nrows(), keep[l].len(), |i, j| {
                        block[(i, keep[l][j])]
                    })
                })
                .collect()
        })
        .collect();

    let reduced = CountDataset::new(
        ds.condition_labels().to_vec(),
        ds.species_labels().to_vec(),
        feature_labels,
        counts,
    )?;
    Ok((reduced, removed))
}

/// Sums features column-wise into their groups; group identifiers become the
/// new feature labels (in lexicographic order). With `shared_only`, only
/// groups present in every species are kept.
pub fn aggregate_by_groups(
    ds: &CountDataset,
    gm: &GroupMap,
    shared_only: bool,
) -> Result<CountDataset> {
    if gm.per_species.len() != ds.n_species() {
        return Err(Error::InvalidConfig(format!(
            "group map covers {} species, dataset has {}",
            gm.per_species.len(),
            ds.n_species()
        )));
    }
    // Group sets per species, in deterministic lexicographic order.
    let group_sets: Vec<BTreeSet<String>> = (0..ds.n_species())
        .map(|l| {
            ds.feature_labels(l)
                .iter()
                .map(|f| gm.group_of(l, f).to_string())
                .collect()
        })
        .collect();

    let kept_groups: Vec<Vec<String>> = if shared_only {
        let mut shared = group_sets[0].clone();
        for set in &group_sets[1..] {
            shared = shared.intersection(set).cloned().collect();
        }
        if shared.is_empty() {
            return Err(Error::InvalidDataset(
                "no groups shared by all species".into(),
            ));
        }
        let shared: Vec<String> = shared.into_iter().collect();
        vec![shared; ds.n_species()]
    } else {
        group_sets
            .iter()
            .map(|set| set.iter().cloned().collect())
            .collect()
    };

    let mut counts: Vec<Vec<DMatrix<u64>>> = Vec::new();
    for k in 0..ds.n_conditions() {
        let mut blocks = Vec::new();
        for l in 0..ds.n_species() {
            let index_of: HashMap<&str, usize> = kept_groups[l]
                .iter()
                .enumerate()
                .map(|(j, g)| (g.as_str(), j))
                .collect();
            let block = ds.counts(k, l);
            let mut agg = DMatrix::<u64>::zeros(block.nrows(), kept_groups[l].len());
            for (j, feature) in ds.feature_labels(l).iter().enumerate() {
                if let Some(&g) = index_of.get(gm.group_of(l, feature)) {
                    for i in 0..block.nrows() {
                        agg[(i, g)] += block[(i, j)];
                    }
                }
            }
            blocks.push(agg);
        }
        counts.push(blocks);
    }

    CountDataset::new(
        ds.condition_labels().to_vec(),
        ds.species_labels().to_vec(),
        kept_groups,
        counts,
    )
}

/// Per-species share of the total counts of condition `k`, normalized to sum
/// to one over species.
pub fn relative_abundance(ds: &CountDataset, k: usize) -> Result<Vec<f64>> {
    if k >= ds.n_conditions() {
        return Err(Error::InvalidConfig(format!(
            "condition index {k} out of range ({} conditions)",
            ds.n_conditions()
        )));
    }
    let totals: Vec<f64> = (0..ds.n_species())
        .map(|l| ds.counts(k, l).iter().map(|&v| v as f64).sum())
        .collect();
    let grand: f64 = totals.iter().sum();
    if grand <= 0.0 {
        return Err(Error::InvalidDataset(format!(
            "condition {k} has zero total count"
        )));
    }
    Ok(totals.into_iter().map(|t| t / grand).collect())
}
