//! Versioned JSON run reports.

use serde::{Deserialize, Serialize};

use super::config::{ClusterSubset, RunConfig};
use crate::error::{Error, Result};

pub const REPORT_VERSION: &str = "report_v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub episodes: usize,
    pub episode_mean: f64,
    pub pooled: f64,
    /// Normal-approximation 95% half-width over episode accuracies.
    pub ci95_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub class: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassF1>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub silhouette: f64,
    pub k: usize,
    pub seed: u64,
    pub subset: ClusterSubset,
    pub points: usize,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistanceSummary {
    pub pairs: usize,
    pub positive_mean: f64,
    pub negative_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    /// SHA-256 of the encoded initial weights, when a run started from injected weights.
    pub initial_weights_sha256: Option<String>,
    pub loss_curve: Vec<f64>,
    pub accuracy: Option<AccuracySummary>,
    pub f1: Option<F1Summary>,
    pub cluster: Option<ClusterSummary>,
    pub pair_distance: Option<PairDistanceSummary>,
    pub notes: Vec<String>,
    pub wall_time_secs: f64,
}

impl MetricsReport {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let config_hash = config.hash();
        Self {
            version: REPORT_VERSION.to_string(),
            run_id: format!("{command}-{}-{}", config.seed, &config_hash[..12]),
            command: command.to_string(),
            config_hash,
            seed: config.seed,
            config: config.clone(),
            initial_weights_sha256: None,
            loss_curve: Vec::new(),
            accuracy: None,
            f1: None,
            cluster: None,
            pair_distance: None,
            notes: Vec::new(),
            wall_time_secs: 0.0,
        }
    }

    fn numbers(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = self.loss_curve.iter().map(|&v| ("loss_curve", v)).collect();
        out.push(("config.lr", self.config.lr));
        out.push(("config.margin", self.config.margin));
        out.push(("config.positive_fraction", self.config.positive_fraction));
        if let Some(a) = &self.accuracy {
            out.extend([("accuracy.episode_mean", a.episode_mean), ("accuracy.pooled", a.pooled), ("accuracy.ci95_half_width", a.ci95_half_width)]);
        }
        if let Some(f) = &self.f1 {
            out.extend([("f1.macro_f1", f.macro_f1), ("f1.micro_f1", f.micro_f1)]);
            out.extend(f.per_class.iter().map(|c| ("f1.per_class", c.f1)));
        }
        if let Some(c) = &self.cluster {
            out.extend([("cluster.silhouette", c.silhouette), ("cluster.inertia", c.inertia)]);
        }
        if let Some(p) = &self.pair_distance {
            out.extend([("pair_distance.positive_mean", p.positive_mean), ("pair_distance.negative_mean", p.negative_mean)]);
        }
        out.push(("wall_time_secs", self.wall_time_secs));
        out
    }

    /// Schema checks: version tag, hash consistency, finite numbers.
    pub fn validate(&self) -> Result<()> {
        if self.version != REPORT_VERSION {
            return Err(Error::invalid("report", format!("unknown version `{}`", self.version)));
        }
        if self.config_hash != self.config.hash() {
            return Err(Error::invalid("report", "config hash does not match the embedded config"));
        }
        if let Some((field, v)) = self.numbers().into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("report field {field} = {v}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// JSON with the wall-time field zeroed, for byte comparisons between runs.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        r.to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Mean and normal-approximation 95% half-width of per-episode accuracies.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_key_order() {
        let mut r = MetricsReport::new("eval", &RunConfig::default());
        r.loss_curve = vec![1.0, 0.5];
        let json = r.to_json().unwrap();
        assert!(json.find("\"version\"").unwrap() < json.find("\"run_id\"").unwrap());
        assert_eq!(MetricsReport::from_json(&json).unwrap(), r);
    }

    #[test]
    fn rejects_non_finite_and_tampered_hash() {
        let mut r = MetricsReport::new("eval", &RunConfig::default());
        r.loss_curve = vec![f64::NAN];
        assert!(r.to_json().is_err());
        let mut r = MetricsReport::new("eval", &RunConfig::default());
        r.config.seed = 9;
        assert!(r.validate().is_err());
    }

    #[test]
    fn ci_half_width() {
        assert_eq!(mean_and_ci95(&[0.5]), (0.5, 0.0));
        let (m, h) = mean_and_ci95(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((h - 1.96 * (0.5f64 / 2.0).sqrt()).abs() < 1e-15);
    }
}
