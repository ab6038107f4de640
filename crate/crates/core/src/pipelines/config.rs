//! Run configuration shared by every pipeline.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{BackboneSpec, MatchingConfig, Readout};

/// Which records `cluster_eval` embeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterSubset {
    All,
    Test,
}

/// Every knob of a run. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class in training episodes.
    pub q_queries: usize,
    /// Queries per class in evaluation episodes.
    pub eval_queries: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub eval_episodes: usize,
    pub lr: f64,
    pub margin: f64,
    pub embedding_dim: usize,
    pub filters: usize,
    pub fce_enabled: bool,
    pub fce_steps: usize,
    pub augment: bool,
    pub augment_multiplier: usize,
    pub pair_batch: usize,
    pub positive_fraction: f64,
    /// `0/0/0` picks `test = max(n_way, 2C/5)` and puts the rest in base.
    pub split_base: usize,
    pub split_validation: usize,
    pub split_test: usize,
    pub split_file: Option<PathBuf>,
    pub data_root: PathBuf,
    pub initial_weights: Option<PathBuf>,
    /// Stop when the epoch loss has not improved for this many epochs; 0 disables.
    pub patience: usize,
    pub cluster_subset: ClusterSubset,
    /// Cluster count; 0 means the number of classes in the subset.
    pub cluster_k: usize,
    pub kmeans_restarts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            n_way: 5,
            k_shot: 5,
            q_queries: 5,
            eval_queries: 15,
            episodes_per_epoch: 100,
            epochs: 250,
            eval_episodes: 600,
            lr: 1e-3,
            margin: 1.0,
            embedding_dim: 64,
            filters: 64,
            fce_enabled: true,
            fce_steps: 3,
            augment: false,
            augment_multiplier: 2,
            pair_batch: 32,
            positive_fraction: 0.5,
            split_base: 0,
            split_validation: 0,
            split_test: 0,
            split_file: None,
            data_root: PathBuf::from("data"),
            initial_weights: None,
            patience: 0,
            cluster_subset: ClusterSubset::Test,
            cluster_k: 0,
            kmeans_restarts: 10,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: Option<usize>, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, line, format!("expected {what}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str, line: Option<usize>) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, line, format!("expected a boolean, got `{value}`"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "image_size",
        "n_way",
        "k_shot",
        "q_queries",
        "eval_queries",
        "episodes_per_epoch",
        "epochs",
        "eval_episodes",
        "lr",
        "margin",
        "embedding_dim",
        "filters",
        "fce_enabled",
        "fce_steps",
        "augment",
        "augment_multiplier",
        "pair_batch",
        "positive_fraction",
        "split_base",
        "split_validation",
        "split_test",
        "split_file",
        "data_root",
        "initial_weights",
        "patience",
        "cluster_subset",
        "cluster_k",
        "kmeans_restarts",
    ];

    /// Assign one key from its textual value, then range-check it.
    pub fn set(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        let v = value.trim();
        let uint = |what| parse::<usize>(key, v, line, what);
        match key {
            "seed" => self.seed = parse(key, v, line, "an unsigned integer")?,
            "image_size" => self.image_size = uint("an unsigned integer")?,
            "n_way" => self.n_way = uint("an unsigned integer")?,
            "k_shot" => self.k_shot = uint("an unsigned integer")?,
            "q_queries" => self.q_queries = uint("an unsigned integer")?,
            "eval_queries" => self.eval_queries = uint("an unsigned integer")?,
            "episodes_per_epoch" => self.episodes_per_epoch = uint("an unsigned integer")?,
            "epochs" => self.epochs = uint("an unsigned integer")?,
            "eval_episodes" => self.eval_episodes = uint("an unsigned integer")?,
            "lr" => self.lr = parse(key, v, line, "a number")?,
            "margin" => self.margin = parse(key, v, line, "a number")?,
            "embedding_dim" => self.embedding_dim = uint("an unsigned integer")?,
            "filters" => self.filters = uint("an unsigned integer")?,
            "fce_enabled" => self.fce_enabled = parse_bool(key, v, line)?,
            "fce_steps" => self.fce_steps = uint("an unsigned integer")?,
            "augment" => self.augment = parse_bool(key, v, line)?,
            "augment_multiplier" => self.augment_multiplier = uint("an unsigned integer")?,
            "pair_batch" => self.pair_batch = uint("an unsigned integer")?,
            "positive_fraction" => self.positive_fraction = parse(key, v, line, "a number")?,
            "split_base" => self.split_base = uint("an unsigned integer")?,
            "split_validation" => self.split_validation = uint("an unsigned integer")?,
            "split_test" => self.split_test = uint("an unsigned integer")?,
            "split_file" => self.split_file = optional_path(v),
            "data_root" => self.data_root = PathBuf::from(v),
            "initial_weights" => self.initial_weights = optional_path(v),
            "patience" => self.patience = uint("an unsigned integer")?,
            "cluster_subset" => {
                self.cluster_subset = match v {
                    "all" => ClusterSubset::All,
                    "test" => ClusterSubset::Test,
                    _ => return Err(Error::config(key, line, format!("expected `all` or `test`, got `{v}`"))),
                }
            }
            "cluster_k" => self.cluster_k = uint("an unsigned integer")?,
            "kmeans_restarts" => self.kmeans_restarts = uint("an unsigned integer")?,
            _ => return Err(Error::config(key, line, "unknown key")),
        }
        self.check_key(key, line)
    }

    fn check_key(&self, key: &str, line: Option<usize>) -> Result<()> {
        let positive = |v: usize| -> Result<()> {
            if v == 0 {
                Err(Error::config(key, line, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        match key {
            "image_size" if self.image_size < 16 => Err(Error::config(key, line, "must be at least 16")),
            "n_way" => positive(self.n_way),
            "k_shot" => positive(self.k_shot),
            "q_queries" => positive(self.q_queries),
            "eval_queries" => positive(self.eval_queries),
            "episodes_per_epoch" => positive(self.episodes_per_epoch),
            "epochs" => positive(self.epochs),
            "eval_episodes" => positive(self.eval_episodes),
            "embedding_dim" => positive(self.embedding_dim),
            "filters" => positive(self.filters),
            "fce_steps" => positive(self.fce_steps),
            "augment_multiplier" => positive(self.augment_multiplier),
            "pair_batch" => positive(self.pair_batch),
            "kmeans_restarts" => positive(self.kmeans_restarts),
            "lr" if !(self.lr.is_finite() && self.lr >= 0.0) => Err(Error::config(key, line, "must be finite and non-negative")),
            "margin" if !(self.margin.is_finite() && self.margin > 0.0) => Err(Error::config(key, line, "must be positive")),
            "positive_fraction" if !(0.0..=1.0).contains(&self.positive_fraction) => {
                Err(Error::config(key, line, "must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Range-check every key.
    pub fn validate(&self) -> Result<()> {
        Self::KEYS.iter().try_for_each(|k| self.check_key(k, None))
    }

    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            input_size: self.image_size,
            filters: self.filters,
            embedding_dim: self.embedding_dim,
            readout: if self.image_size >= 64 {
                Readout::GlobalAvgPool
            } else {
                Readout::Flatten
            },
        }
    }

    pub fn matching(&self) -> MatchingConfig {
        MatchingConfig {
            fce_enabled: self.fce_enabled,
            fce_steps: self.fce_steps,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.n_way, c.k_shot, c.epochs), (5, 5, 250));
        c.validate().unwrap();
    }

    #[test]
    fn set_and_reject() {
        let mut c = RunConfig::default();
        c.set("epochs", "3", Some(1)).unwrap();
        assert_eq!(c.epochs, 3);
        let err = c.set("n_way", "0", Some(4)).unwrap_err();
        assert!(matches!(&err, Error::Config { key, line: Some(4), .. } if key == "n_way"), "{err}");
        assert!(c.set("lr", "fast", None).is_err());
        assert!(c.set("bogus", "1", Some(2)).unwrap_err().to_string().contains("bogus"));
        assert!(c.set("positive_fraction", "1.5", None).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
