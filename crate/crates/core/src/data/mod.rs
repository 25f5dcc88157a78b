//! Interaction and feature ingestion, splits, dataset directories and triple sampling.
//!
//! A prepared dataset directory contains:
//!
//! ```text
//! train.tsv val.tsv test.tsv   user<TAB>item, external ids
//! user_map.tsv item_map.tsv    external<TAB>dense
//! features.tsv                 name<TAB>relative path, one line per modality
//! features/<name>.ibmf         N x d_k feature matrix, rows in dense item order
//! summary.json                 users, items, interactions, density, modalities
//! ```

pub mod ibmf;
mod interactions;
mod sampler;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ibmf::{load_feature_matrix, Precision};
pub use interactions::{
    load_interactions, parse_interactions, split_interactions, InteractionSet, RawInteractions,
    Split, SplitRatios,
};
pub use sampler::{sample_bpr_triples, TripleBatch};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Per-modality item feature matrices, all with one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub modalities: Vec<(String, Matrix)>,
}

impl ModalityFeatures {
    pub fn new(modalities: Vec<(String, Matrix)>) -> Result<Self> {
        let f = ModalityFeatures { modalities };
        f.validate(None)?;
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn matrix(&self, k: usize) -> &Matrix {
        &self.modalities[k].1
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|(_, m)| m.cols()).collect()
    }

    /// Checks K ≥ 1, finiteness, and (if given) the item count of every modality.
    pub fn validate(&self, num_items: Option<usize>) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Consistency(
                "at least one modality is required".into(),
            ));
        }
        let rows = num_items.unwrap_or_else(|| self.modalities[0].1.rows());
        for (name, m) in &self.modalities {
            if m.rows() != rows {
                return Err(Error::Consistency(format!(
                    "modality `{name}` has {} rows but there are {rows} items",
                    m.rows()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Data(format!(
                    "modality `{name}` has non-finite entries"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub name: String,
    pub dim: usize,
}

/// Dataset statistics in the shape of a benchmark statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
    pub modalities: Vec<ModalitySummary>,
}

/// Interactions plus features: everything training needs from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub interactions: InteractionSet,
    pub features: ModalityFeatures,
}

impl Dataset {
    pub fn new(interactions: InteractionSet, features: ModalityFeatures) -> Result<Self> {
        interactions.validate()?;
        features.validate(Some(interactions.num_items()))?;
        Ok(Dataset {
            interactions,
            features,
        })
    }

    pub fn summary(&self) -> DatasetSummary {
        let (m, n) = (self.interactions.num_users(), self.interactions.num_items());
        let interactions = self.interactions.num_interactions();
        DatasetSummary {
            users: m,
            items: n,
            interactions,
            density: interactions as f64 / (m as f64 * n as f64),
            modalities: self
                .features
                .modalities
                .iter()
                .map(|(name, mat)| ModalitySummary {
                    name: name.clone(),
                    dim: mat.cols(),
                })
                .collect(),
        }
    }

    /// Writes the directory layout described in the module docs.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        self.interactions.save(dir)?;
        let mut listing = String::new();
        for (name, m) in &self.features.modalities {
            if name.is_empty() || name.contains(['/', '\t', '\n', '\\']) {
                return Err(Error::Config(format!("invalid modality name `{name}`")));
            }
            let rel = format!("features/{name}.ibmf");
            ibmf::write_matrix(&dir.join(&rel), m, Precision::F32)?;
            listing.push_str(&format!("{name}\t{rel}\n"));
        }
        let listing_path = dir.join("features.tsv");
        fs::write(&listing_path, listing).map_err(|e| Error::io(&listing_path, e))?;
        let summary_path = dir.join("summary.json");
        let json = serde_json::to_string_pretty(&self.summary())? + "\n";
        fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "dataset directory `{}` does not exist",
                dir.display()
            )));
        }
        let interactions = InteractionSet::load(dir)?;
        let listing_path = dir.join("features.tsv");
        let listing = fs::read_to_string(&listing_path).map_err(|e| Error::io(&listing_path, e))?;
        let mut modalities = Vec::new();
        for (n, line) in listing.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, rel) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: listing_path.clone(),
                line: n + 1,
                detail: "expected `name<TAB>path`".into(),
            })?;
            modalities.push((name.to_string(), load_feature_matrix(&dir.join(rel))?));
        }
        Dataset::new(interactions, ModalityFeatures { modalities })
    }
}
