//! Few-shot evaluation over sampled test episodes, and cluster scoring.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ClusterSubset, RunConfig};
use super::data::{held_out_section, Dataset};
use super::report::{mean_and_ci95, AccuracySummary, ClassF1, ClusterSummary, F1Summary, MetricsReport};
use super::train::{episode_forward, EpisodeSampler};
use crate::autodiff::Graph;
use crate::datasets::{DatasetManifest, SplitSection};
use crate::episodes::{predicted_labels, Episode};
use crate::error::{Error, Result};
use crate::metrics::{confusion, f1_scores, kmeans, silhouette, KMeansConfig};
use crate::models::{matching_predict, FewShotNet, NetworkWeights, BACKBONE_PREFIX, SIAMESE_PREFIX};
use crate::tensor::Tensor;

/// Source of per-record embedding rows.
pub trait Embedder {
    /// `[records.len(), D]`, one row per record index.
    fn embed(&self, records: &[usize]) -> Result<Tensor<f32>>;
}

/// Embeddings precomputed for a set of records.
pub struct TableEmbedder {
    row_of: Vec<usize>,
    table: Tensor<f32>,
}

impl TableEmbedder {
    pub fn new(record_count: usize, records: &[usize], table: Tensor<f32>) -> Result<Self> {
        if table.rank() != 2 || table.shape()[0] != records.len() {
            return Err(Error::shape("embedding table", table.shape(), &[records.len()]));
        }
        let mut row_of = vec![usize::MAX; record_count];
        for (row, &r) in records.iter().enumerate() {
            row_of[r] = row;
        }
        Ok(Self { row_of, table })
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, records: &[usize]) -> Result<Tensor<f32>> {
        let d = self.table.shape()[1];
        let mut data = Vec::with_capacity(records.len() * d);
        for &r in records {
            match self.row_of.get(r) {
                Some(&row) if row != usize::MAX => data.extend_from_slice(self.table.row(row)),
                _ => return Err(Error::invalid("embedder", format!("record {r} was not embedded"))),
            }
        }
        Tensor::new(&[records.len(), d], data)
    }
}

/// What turns episode embeddings into class distributions.
pub enum EpisodeHead<'a> {
    /// Cosine attention directly on the embeddings.
    Cosine,
    /// The trained head (adapter, FCE, cosine attention) of a network.
    Network {
        net: &'a FewShotNet,
        weights: &'a NetworkWeights,
    },
}

impl EpisodeHead<'_> {
    fn predict(&self, support: Tensor<f32>, query: Tensor<f32>, episode: &Episode) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let (s, q) = (g.constant(support), g.constant(query));
        let out = match self {
            EpisodeHead::Cosine => matching_predict(&mut g, q, s, &episode.support_one_hot())?,
            EpisodeHead::Network { net, weights } => {
                let params = weights.bind(&mut g, &net.head_names(), false)?;
                episode_forward(net, &mut g, &params, s, q, episode)?
            }
        };
        Ok(g.value(out).clone())
    }
}

/// Per-episode evaluation record. Labels are episode-local.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub classes: Vec<usize>,
    pub query: Vec<usize>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub log: Vec<EpisodeLog>,
}

/// Run `config.eval_episodes` episodes from `section` through `embedder` and `head`.
pub fn run_episodes(
    manifest: &DatasetManifest,
    section: SplitSection,
    config: &RunConfig,
    embedder: &dyn Embedder,
    head: &EpisodeHead,
) -> Result<Vec<EpisodeLog>> {
    let mut sampler = EpisodeSampler::evaluation(manifest, section, config)?;
    let mut log = Vec::with_capacity(config.eval_episodes);
    for _ in 0..config.eval_episodes {
        let episode = sampler.next_episode()?;
        let probs = head.predict(embedder.embed(&episode.support)?, embedder.embed(&episode.query)?, &episode)?;
        if !probs.is_finite() {
            return Err(Error::NonFinite("episode predictions".into()));
        }
        log.push(EpisodeLog {
            predicted: predicted_labels(&probs, &episode)?,
            truth: episode.query_labels(),
            classes: episode.classes,
            query: episode.query,
        });
    }
    Ok(log)
}

/// Accuracy and F1 figures recomputed from an episode log. The confusion
/// matrix is pooled over global classes that appear in the log.
pub fn summarize(log: &[EpisodeLog], class_names: &[String]) -> Result<(AccuracySummary, F1Summary)> {
    let mut index: BTreeMap<usize, usize> = BTreeMap::new();
    for e in log {
        for &c in &e.classes {
            index.insert(c, 0);
        }
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let mut per_episode = Vec::with_capacity(log.len());
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for e in log {
        let correct = e.truth.iter().zip(&e.predicted).filter(|(t, p)| t == p).count();
        per_episode.push(correct as f64 / e.truth.len().max(1) as f64);
        truth.extend(e.truth.iter().map(|&t| index[&e.classes[t]]));
        pred.extend(e.predicted.iter().map(|&p| index[&e.classes[p]]));
    }
    let cm = confusion(&pred, &truth, index.len())?;
    let f1 = f1_scores(&cm);
    let (episode_mean, ci95_half_width) = mean_and_ci95(&per_episode);
    let accuracy = AccuracySummary {
        episodes: log.len(),
        episode_mean,
        pooled: cm.accuracy(),
        ci95_half_width,
    };
    let per_class = index
        .keys()
        .zip(&f1.per_class)
        .map(|(&c, &f)| ClassF1 {
            class: class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
            f1: f,
        })
        .collect();
    Ok((
        accuracy,
        F1Summary {
            macro_f1: f1.macro_f1,
            micro_f1: f1.micro_f1,
            per_class,
        },
    ))
}

/// Network described by a weight set: a trainable backbone if `backbone.*`
/// tensors are present, otherwise a stacked network over `siamese.*`.
pub fn network_for(config: &RunConfig, weights: &NetworkWeights) -> Result<FewShotNet> {
    let spec = config.backbone();
    let net = if weights.contains(&crate::models::BackboneSpec::conv_weight(BACKBONE_PREFIX, 0)) {
        FewShotNet::matching(spec, config.matching())
    } else if weights.contains(&crate::models::BackboneSpec::conv_weight(SIAMESE_PREFIX, 0)) {
        FewShotNet::stacked(spec, config.matching(), config.embedding_dim)
    } else {
        return Err(Error::MissingWeight(crate::models::BackboneSpec::conv_weight(BACKBONE_PREFIX, 0)));
    };
    net.check_weights(weights)?;
    Ok(net)
}

/// Mean episode accuracy, pooled accuracy and F1 over test episodes.
pub fn evaluate_fewshot(config: &RunConfig, data: &Dataset, weights: &NetworkWeights) -> Result<EvalOutcome> {
    let start = Instant::now();
    config.validate()?;
    let net = network_for(config, weights)?;
    let section = held_out_section(&data.manifest);
    let records = data.manifest.section_records(section);
    let table = data.embed(&net.backbone, weights, net.prefix(), &records)?;
    let embedder = TableEmbedder::new(data.manifest.len(), &records, table)?;
    let head = EpisodeHead::Network { net: &net, weights };
    let mut outcome = evaluate_with(config, &data.manifest, section, &embedder, &head)?;
    if section != SplitSection::Test {
        outcome
            .report
            .notes
            .push(format!("no test classes; evaluated on the {} split", section.name()));
    }
    outcome.report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Evaluation with a caller-supplied embedder and head.
pub fn evaluate_with(
    config: &RunConfig,
    manifest: &DatasetManifest,
    section: SplitSection,
    embedder: &dyn Embedder,
    head: &EpisodeHead,
) -> Result<EvalOutcome> {
    let log = run_episodes(manifest, section, config, embedder, head)?;
    let (accuracy, f1) = summarize(&log, &manifest.classes)?;
    let mut report = MetricsReport::new("eval", config);
    report.accuracy = Some(accuracy);
    report.f1 = Some(f1);
    Ok(EvalOutcome { report, log })
}

/// Encoder prefix of a weight set, preferring the Siamese encoder.
pub fn encoder_prefix(weights: &NetworkWeights) -> &'static str {
    if weights.contains(&crate::models::BackboneSpec::conv_weight(SIAMESE_PREFIX, 0)) {
        SIAMESE_PREFIX
    } else {
        BACKBONE_PREFIX
    }
}

/// Original (non-augmented) records of a cluster subset.
pub fn subset_records(manifest: &DatasetManifest, subset: ClusterSubset) -> Vec<usize> {
    let section = match subset {
        ClusterSubset::All => SplitSection::All,
        ClusterSubset::Test => SplitSection::Test,
    };
    manifest
        .section_records(section)
        .into_iter()
        .filter(|&r| manifest.records[r].variant == 0)
        .collect()
}

/// k-means over points, then the silhouette of the resulting clustering.
pub fn cluster_points(points: &Tensor<f64>, k: usize, config: &RunConfig, subset: ClusterSubset) -> Result<ClusterSummary> {
    if k < 2 {
        return Err(Error::invalid("cluster_eval", format!("silhouette is undefined for k={k}")));
    }
    let assignment = kmeans(
        points,
        k,
        config.seed,
        KMeansConfig {
            restarts: config.kmeans_restarts,
            ..KMeansConfig::default()
        },
    )?;
    Ok(ClusterSummary {
        silhouette: silhouette(points, &assignment.labels)?,
        k,
        seed: config.seed,
        subset,
        points: points.shape()[0],
        inertia: assignment.inertia,
    })
}

/// Embed a subset with the weights' encoder, cluster into `k` groups (the
/// subset's class count unless overridden) and report the silhouette.
pub fn cluster_eval(config: &RunConfig, data: &Dataset, weights: &NetworkWeights, subset: ClusterSubset, k: Option<usize>) -> Result<MetricsReport> {
    let start = Instant::now();
    config.validate()?;
    let prefix = encoder_prefix(weights);
    let spec = config.backbone();
    spec.check_weights(weights, prefix)?;
    let records = subset_records(&data.manifest, subset);
    if records.is_empty() {
        return Err(Error::Data(format!("cluster subset `{subset:?}` has no records")));
    }
    let mut classes: Vec<usize> = records.iter().map(|&r| data.manifest.records[r].class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("cluster subset needs at least 2 classes".into()));
    }
    let k = k.unwrap_or(classes.len());
    let points = data.embed(&spec, weights, prefix, &records)?.cast::<f64>();
    let mut report = MetricsReport::new("cluster-score", config);
    report.cluster = Some(cluster_points(&points, k, config, subset)?);
    report.notes.push(format!("encoder `{prefix}`"));
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
