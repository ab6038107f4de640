//! Siamese, Matching and stacked (SSM) training loops.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::{held_out_section, Dataset};
use super::report::{MetricsReport, PairDistanceSummary};
use super::trainer::{Patience, Trainer};
use crate::autodiff::{Graph, Var};
use crate::datasets::{DatasetManifest, SplitSection};
use crate::episodes::{one_hot, sample_episode, sample_pairs, Episode};
use crate::error::{Error, Result};
use crate::models::{
    contrastive_loss, siamese_forward_pair, Bound, FewShotNet, NetworkWeights, Role, BACKBONE_PREFIX,
    SIAMESE_PREFIX, SIAMESE_TRAINED_MARKER,
};
use crate::tensor::Tensor;

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_TRAIN: u64 = 1;
pub(crate) const STREAM_EVAL: u64 = 2;
pub(crate) const STREAM_PAIRS: u64 = 3;

/// Independent rng stream `stream` of a run seed.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Episode source shared by training and evaluation.
pub struct EpisodeSampler<'a> {
    manifest: &'a DatasetManifest,
    section: SplitSection,
    way: usize,
    shot: usize,
    queries: usize,
    rng: ChaCha8Rng,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(manifest: &'a DatasetManifest, section: SplitSection, way: usize, shot: usize, queries: usize, rng: ChaCha8Rng) -> Result<Self> {
        // Dry run on a copy of the rng so shape errors surface before any work.
        sample_episode(manifest, section, way, shot, queries, &mut rng.clone())?;
        Ok(Self {
            manifest,
            section,
            way,
            shot,
            queries,
            rng,
        })
    }

    /// Training episodes for `config`.
    pub fn training(manifest: &'a DatasetManifest, config: &RunConfig) -> Result<Self> {
        Self::new(manifest, SplitSection::Base, config.n_way, config.k_shot, config.q_queries, run_rng(config.seed, STREAM_TRAIN))
    }

    /// Evaluation episodes for `config` drawn from `section`.
    pub fn evaluation(manifest: &'a DatasetManifest, section: SplitSection, config: &RunConfig) -> Result<Self> {
        Self::new(manifest, section, config.n_way, config.k_shot, config.eval_queries, run_rng(config.seed, STREAM_EVAL))
    }

    pub fn next_episode(&mut self) -> Result<Episode> {
        sample_episode(self.manifest, self.section, self.way, self.shot, self.queries, &mut self.rng)
    }
}

/// Class distributions `[N·Q, N]` for one episode from encoder outputs.
/// Training and evaluation both go through here.
pub fn episode_forward(net: &FewShotNet, graph: &mut Graph<f32>, params: &Bound, support: Var, query: Var, episode: &Episode) -> Result<Var> {
    let s = net.adapt(graph, params, support)?;
    let q = net.adapt(graph, params, query)?;
    net.classify(graph, params, s, q, &episode.support_one_hot())
}

fn episode_loss(graph: &mut Graph<f32>, probs: Var, episode: &Episode) -> Result<Var> {
    let targets = one_hot::<f32>(&episode.query_labels(), episode.way);
    graph.softmax_cross_entropy(probs, &targets, true)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    pub report: MetricsReport,
    /// Training episodes in the order they were used (empty for pair training).
    pub episodes: Vec<Episode>,
}

fn weights_digest(w: &NetworkWeights) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(crate::models::encode(w)?)))
}

/// Overwrite tensors of `target` with same-named tensors of `source`,
/// reading `from_prefix.*` as `to_prefix.*`. Returns how many were copied.
fn inject(target: &mut NetworkWeights, source: &NetworkWeights, from_prefix: &str, to_prefix: &str) -> Result<usize> {
    let mut copied = 0;
    for e in source.entries() {
        let name = match e.name.strip_prefix(from_prefix) {
            Some(rest) if rest.starts_with('.') => format!("{to_prefix}{rest}"),
            _ => e.name.clone(),
        };
        if !target.contains(&name) || name == SIAMESE_TRAINED_MARKER {
            continue;
        }
        let slot = target.typed_mut::<f32>(&name)?;
        if slot.shape() != e.tensor.shape() {
            return Err(Error::shape("initial weights", slot.shape(), e.tensor.shape()));
        }
        *slot = e.tensor.to_typed::<f32>();
        copied += 1;
    }
    if copied == 0 {
        return Err(Error::Data("initial weights share no tensors with the network".into()));
    }
    Ok(copied)
}

fn run_epochs(
    config: &RunConfig,
    report: &mut MetricsReport,
    mut step: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<()> {
    let mut patience = Patience::new(config.patience);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for batch in 0..config.episodes_per_epoch {
            total += step(epoch, batch)?;
        }
        let mean = total / config.episodes_per_epoch as f64;
        log::info!("{} epoch {}/{}: loss {mean:.5}", report.command, epoch + 1, config.epochs);
        report.loss_curve.push(mean);
        if patience.observe(mean) {
            report.notes.push(format!("early stop after epoch {}", epoch + 1));
            break;
        }
    }
    Ok(())
}

/// Fresh Siamese encoder weights for `config`.
pub fn init_siamese(config: &RunConfig) -> Result<NetworkWeights> {
    let spec = config.backbone();
    spec.validate()?;
    spec.init::<f32, _>(SIAMESE_PREFIX, Role::SiameseHead, &mut run_rng(config.seed, STREAM_INIT))
}

/// Fresh Matching Network weights (backbone, FCE) for `config`.
pub fn init_matching(config: &RunConfig) -> Result<NetworkWeights> {
    let net = FewShotNet::matching(config.backbone(), config.matching());
    net.backbone.validate()?;
    net.init::<f32, _>(&mut run_rng(config.seed, STREAM_INIT))
}

/// Contrastive training of the weight-shared encoder on base-class pairs.
pub fn train_siamese(config: &RunConfig, data: &Dataset, initial: Option<&NetworkWeights>) -> Result<TrainOutcome> {
    let start = Instant::now();
    config.validate()?;
    let manifest = &data.manifest;
    let usable = manifest
        .split
        .base
        .iter()
        .filter(|&&c| manifest.records_of_class(c).len() >= 2)
        .count();
    if manifest.split.base.len() < 2 || (config.positive_fraction > 0.0 && usable == 0) {
        return Err(Error::Data(format!(
            "siamese training needs 2 base classes with 2 images each; base has {} classes, {usable} with 2+ images",
            manifest.split.base.len()
        )));
    }
    let spec = config.backbone();
    let mut report = MetricsReport::new("train-siamese", config);
    let mut weights = init_siamese(config)?;
    if let Some(init) = initial {
        let n = inject(&mut weights, init, BACKBONE_PREFIX, SIAMESE_PREFIX)?;
        report.initial_weights_sha256 = Some(weights_digest(init)?);
        report.notes.push(format!("{n} tensors loaded from initial weights"));
    }
    let mut trainer = Trainer::new(weights, spec.param_names(SIAMESE_PREFIX), Vec::new(), config.lr)?;
    let mut rng = run_rng(config.seed, STREAM_TRAIN);
    run_epochs(config, &mut report, |epoch, batch| {
        let pairs = sample_pairs(manifest, SplitSection::Base, config.pair_batch, config.positive_fraction, &mut rng)?;
        let a: Vec<usize> = pairs.pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.pairs.iter().map(|p| p.1).collect();
        let (xa, xb) = (data.batch(&a)?, data.batch(&b)?);
        let y = pairs.same_labels::<f32>();
        trainer.step(epoch, batch, |g, p| {
            let (va, vb) = (g.constant(xa), g.constant(xb));
            let out = siamese_forward_pair(g, &spec, p, SIAMESE_PREFIX, va, vb)?;
            contrastive_loss(g, out.distance, &y, config.margin)
        })
    })?;
    let mut weights = trainer.weights;
    weights.insert(SIAMESE_TRAINED_MARKER, Role::None, Tensor::<f32>::scalar(1.0))?;
    report.pair_distance = Some(held_out_pair_distances(config, data, &weights, SIAMESE_PREFIX)?);
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        weights,
        report,
        episodes: Vec::new(),
    })
}

/// Mean embedding distance of positive and negative pairs drawn from the held-out classes.
pub fn held_out_pair_distances(config: &RunConfig, data: &Dataset, weights: &NetworkWeights, prefix: &str) -> Result<PairDistanceSummary> {
    const PAIRS: usize = 200;
    let section = held_out_section(&data.manifest);
    let batch = sample_pairs(&data.manifest, section, PAIRS, 0.5, &mut run_rng(config.seed, STREAM_PAIRS))?;
    let records: Vec<usize> = batch.pairs.iter().flat_map(|p| [p.0, p.1]).collect();
    let emb = data.embed(&config.backbone(), weights, prefix, &records)?;
    let (mut pos, mut neg) = ((0.0, 0usize), (0.0, 0usize));
    for (i, p) in batch.pairs.iter().enumerate() {
        let d = emb
            .row(2 * i)
            .iter()
            .zip(emb.row(2 * i + 1))
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let slot = if p.2 == 1 { &mut pos } else { &mut neg };
        slot.0 += d;
        slot.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(PairDistanceSummary {
        pairs: batch.pairs.len(),
        positive_mean: mean(pos),
        negative_mean: mean(neg),
    })
}

/// Episodic training of backbone and head end to end.
pub fn train_matching(config: &RunConfig, data: &Dataset, initial: Option<&NetworkWeights>) -> Result<TrainOutcome> {
    let start = Instant::now();
    config.validate()?;
    let mut sampler = EpisodeSampler::training(&data.manifest, config)?;
    let net = FewShotNet::matching(config.backbone(), config.matching());
    let mut report = MetricsReport::new("train-matching", config);
    let mut weights = init_matching(config)?;
    if let Some(init) = initial {
        let n = inject(&mut weights, init, SIAMESE_PREFIX, BACKBONE_PREFIX)?;
        report.initial_weights_sha256 = Some(weights_digest(init)?);
        report.notes.push(format!("{n} tensors loaded from initial weights"));
    }
    let mut trainer = Trainer::new(weights, net.trainable_names(), Vec::new(), config.lr)?;
    let mut episodes = Vec::new();
    run_epochs(config, &mut report, |epoch, batch| {
        let episode = sampler.next_episode()?;
        let records: Vec<usize> = episode.support.iter().chain(&episode.query).copied().collect();
        let images = data.batch(&records)?;
        let ns = episode.support.len();
        let loss = trainer.step(epoch, batch, |g, p| {
            let x = g.constant(images);
            let e = net.backbone.forward(g, p, net.prefix(), x)?;
            let s = g.gather_rows(e, &(0..ns).collect::<Vec<_>>())?;
            let q = g.gather_rows(e, &(ns..records.len()).collect::<Vec<_>>())?;
            let probs = episode_forward(&net, g, p, s, q, &episode)?;
            episode_loss(g, probs, &episode)
        })?;
        episodes.push(episode);
        Ok(loss)
    })?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        weights: trainer.weights,
        report,
        episodes,
    })
}

/// Train the matching head on embeddings from a frozen Siamese encoder.
/// The returned weights hold the head plus an untouched copy of the encoder.
pub fn train_ssm(config: &RunConfig, data: &Dataset, siamese: &NetworkWeights) -> Result<TrainOutcome> {
    let start = Instant::now();
    config.validate()?;
    let spec = config.backbone();
    spec.check_weights(siamese, SIAMESE_PREFIX).map_err(|e| match e {
        Error::MissingWeight(name) => Error::Data(format!("siamese weights are missing `{name}`")),
        other => other,
    })?;
    let mut sampler = EpisodeSampler::training(&data.manifest, config)?;
    let net = FewShotNet::stacked(spec, config.matching(), config.embedding_dim);
    let trainable = net.trainable_names();
    if trainable.is_empty() {
        return Err(Error::config(
            "fce_enabled",
            None,
            "the stacked network has no trainable parameters without FCE or an adapter",
        ));
    }
    let mut report = MetricsReport::new("train-ssm", config);
    report.initial_weights_sha256 = Some(weights_digest(siamese)?);
    report.notes.push(if net.has_adapter() {
        format!("adapter: linear {} -> {}", spec.embedding_dim, net.head_dim)
    } else {
        "adapter: identity".to_string()
    });
    if !siamese.is_siamese_trained() {
        log::warn!("siamese weights are not flagged as trained");
        report.notes.push("siamese weights are not flagged as trained".into());
    }
    let mut weights = net.init::<f32, _>(&mut run_rng(config.seed, STREAM_INIT))?;
    weights.extend(&siamese.filtered(|e| e.name.starts_with("siamese.") || e.name == SIAMESE_TRAINED_MARKER))?;

    let base = data.manifest.section_records(SplitSection::Base);
    let table = data.embed(&spec, siamese, SIAMESE_PREFIX, &base)?;
    let mut row_of = vec![usize::MAX; data.manifest.len()];
    for (row, &r) in base.iter().enumerate() {
        row_of[r] = row;
    }
    let gather = |records: &[usize]| -> Result<Tensor<f32>> {
        let items: Vec<f32> = records.iter().flat_map(|&r| table.row(row_of[r]).iter().copied()).collect();
        Tensor::new(&[records.len(), spec.embedding_dim], items)
    };

    let mut trainer = Trainer::new(weights, trainable, Vec::new(), config.lr)?;
    let mut episodes = Vec::new();
    run_epochs(config, &mut report, |epoch, batch| {
        let episode = sampler.next_episode()?;
        let (es, eq) = (gather(&episode.support)?, gather(&episode.query)?);
        let loss = trainer.step(epoch, batch, |g, p| {
            let (s, q) = (g.constant(es), g.constant(eq));
            let probs = episode_forward(&net, g, p, s, q, &episode)?;
            episode_loss(g, probs, &episode)
        })?;
        episodes.push(episode);
        Ok(loss)
    })?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        weights: trainer.weights,
        report,
        episodes,
    })
}
