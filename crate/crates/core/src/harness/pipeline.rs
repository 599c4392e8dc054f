use std::path::Path;

use crate::adaption::{adapt_prototypes, fit_adaption, partition_labels, select_alpha, AdaptionContext, AdaptionMap};
use crate::corpus::{sample_episode, BioTag, Episode, Vocab};
use crate::diffmath::{adam_step, AdamState, Graph, NodeId, ParamStore};
use crate::encoder::{encode_values, init_encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::memory::{memory_loss, MemoryStore};
use crate::protonet::{
    classify, compute_prototype_values, compute_prototypes, ner_loss, similarity, similarity_values, PrototypeNodes,
    PrototypeSet,
};

use super::checkpoint::write_checkpoint;
use super::config::{derive_seed, streams, Dataset, Mode, RunConfig};
use super::spans::{spans_from_bio, SpanCounts};

/// Encoder parameters plus the vocabulary that indexes the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub vocab: Vocab,
}

impl Model {
    pub fn init(vocab: &Vocab, d_e: usize, d_h: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = init_encoder(&mut params, vocab.len(), d_e, d_h, seed)?;
        Ok(Model {
            params,
            encoder,
            vocab: vocab.clone(),
        })
    }

    /// Wraps loaded parameters; the embedding table must match `vocab`.
    pub fn from_params(params: ParamStore, vocab: &Vocab) -> Result<Self> {
        let encoder = EncoderParams::locate(&params)?;
        if encoder.dims.vocab_size != vocab.len() {
            return Err(Error::shape(
                "checkpoint",
                format!("embedding rows {}", encoder.dims.vocab_size),
                format!("vocabulary size {}", vocab.len()),
            ));
        }
        Ok(Model {
            params,
            encoder,
            vocab: vocab.clone(),
        })
    }

    pub fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        encode_values(&self.params, &self.encoder, &self.vocab.encode(tokens))
    }
}

/// Labels of `episode.label_set` that actually occur in the support set.
fn support_labels(episode: &Episode) -> Vec<BioTag> {
    episode
        .label_set
        .iter()
        .filter(|l| episode.support.iter().any(|s| s.tags.contains(l)))
        .cloned()
        .collect()
}

struct Forward {
    prototypes: PrototypeNodes,
    ner: NodeId,
}

fn forward(g: &mut Graph<'_>, model: &Model, episode: &Episode, cfg: &RunConfig) -> Result<Forward> {
    let labels = support_labels(episode);
    let mut embedded = Vec::new();
    let mut token_labels = Vec::new();
    for s in &episode.support {
        embedded.extend(model.encoder.encode(g, &model.vocab.encode(&s.tokens))?);
        token_labels.extend(s.tags.iter().cloned());
    }
    let prototypes = compute_prototypes(g, &embedded, &token_labels, &labels)?;
    let mut scores = Vec::new();
    let mut gold = Vec::new();
    for s in &episode.query {
        let h = model.encoder.encode(g, &model.vocab.encode(&s.tokens))?;
        for (node, tag) in h.into_iter().zip(&s.tags) {
            // tokens whose label has no prototype cannot be scored
            if let Some(idx) = labels.iter().position(|l| l == tag) {
                scores.push(similarity(g, node, &prototypes.nodes, cfg.metric)?);
                gold.push(idx);
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::Sampling {
            domain: episode.domain.clone(),
            deficient: vec!["<scorable query tokens>".into()],
        });
    }
    let ner = ner_loss(g, &scores, &gold)?;
    Ok(Forward { prototypes, ner })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub episode: usize,
    pub episode_id: u64,
    pub domain: String,
    pub ner_loss: f64,
    /// `None` when the memory loss is disabled.
    pub memory_loss: Option<f64>,
    pub memory_terms: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: Model,
    pub memory: MemoryStore,
    pub log: Vec<TrainLogEntry>,
    /// `(episodes trained, validation F1)` for each early-stopping probe.
    pub validation: Vec<(usize, f64)>,
}

/// Training episode `index` of a run, identical across modes.
pub fn training_episode(cfg: &RunConfig, data: &Dataset, seed: u64, k_shot: usize, index: usize) -> Result<Episode> {
    let domain = &data.train[index % data.train.len()];
    let ep_seed = derive_seed(seed, streams::TRAIN, index as u64);
    sample_episode(&data.corpus, domain, k_shot, cfg.episode.query_size, ep_seed)
}

/// Fixed evaluation episodes for one domain; every mode sees the same list.
pub fn fixed_episodes(
    data: &Dataset,
    domain: &str,
    k_shot: usize,
    query_size: usize,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<Episode>> {
    let index = data.corpus.domain_names().iter().position(|d| *d == domain).unwrap_or(0) as u64;
    let base = derive_seed(seed, stream, index);
    (0..count)
        .map(|i| sample_episode(&data.corpus, domain, k_shot, query_size, derive_seed(base, k_shot as u64, i as u64)))
        .collect()
}

pub fn validation_episodes(cfg: &RunConfig, data: &Dataset, seed: u64, k_shot: usize) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for d in &data.validation {
        out.extend(fixed_episodes(
            data,
            d,
            k_shot,
            cfg.episode.query_size,
            cfg.episode.validation_episodes,
            seed,
            streams::VALIDATION,
        )?);
    }
    Ok(out)
}

pub fn test_episodes(cfg: &RunConfig, data: &Dataset, seed: u64, k_shot: usize, domain: &str) -> Result<Vec<Episode>> {
    fixed_episodes(data, domain, k_shot, cfg.episode.query_size, cfg.episode.test_episodes, seed, streams::TEST)
}

/// The untrained model of a run.
pub fn initial_model(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<Model> {
    Model::init(data.corpus.vocab(), cfg.d_e, cfg.d_h, derive_seed(seed, streams::INIT, 0))
}

/// Meta-training: one Adam step per episode on `L_ner (+ lambda * L_memory)`,
/// followed by inserting the episode's prototypes into the store.
pub fn train(cfg: &RunConfig, data: &Dataset, seed: u64, mode: Mode, k_shot: usize) -> Result<Trained> {
    let mut model = initial_model(cfg, data, seed)?;
    let mut memory = MemoryStore::new();
    let mut state = AdamState::new(&model.params, cfg.optim);
    let mut log = Vec::with_capacity(cfg.episode.train_episodes);
    let mut validation = Vec::new();
    let probe = if cfg.validate_every > 0 && !data.validation.is_empty() {
        Some(validation_episodes(cfg, data, seed, k_shot)?)
    } else {
        None
    };
    let mut best: Option<(f64, ParamStore, MemoryStore)> = None;

    for i in 0..cfg.episode.train_episodes {
        let episode = training_episode(cfg, data, seed, k_shot, i)?;
        let mut g = Graph::new(&model.params);
        let fwd = forward(&mut g, &model, &episode, cfg)?;
        let ner_value = g.scalar(fwd.ner);
        let (total, memory_value, terms) = if mode.use_memory() {
            let mem = memory_loss(&mut g, &memory, &fwd.prototypes, &cfg.contrastive)?;
            let value = g.scalar(mem.node);
            let weighted = g.scale(mem.node, cfg.lambda_memory);
            (g.add(fwd.ner, weighted)?, Some(value), mem.terms)
        } else {
            (fwd.ner, None, 0)
        };
        let snapshot = fwd.prototypes.to_set(&g, episode.id);
        let (loss, grads) = g.backward(total)?;
        if !loss.is_finite() || !grads.max_abs().is_finite() {
            return Err(Error::Divergence {
                episode: i,
                detail: format!(
                    "loss {loss} (ner {ner_value}, memory {memory_value:?}) on domain {} episode id {}",
                    episode.domain, episode.id
                ),
            });
        }
        adam_step(&mut model.params, &grads, &mut state)?;
        if mode.needs_store() {
            memory.insert(&snapshot, &cfg.contrastive)?;
        }
        log.push(TrainLogEntry {
            episode: i,
            episode_id: episode.id,
            domain: episode.domain.clone(),
            ner_loss: ner_value,
            memory_loss: memory_value,
            memory_terms: terms,
        });

        let done = i + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                write_checkpoint(&dir.join(format!("ckpt-{done:06}.txt")), &model.params, &memory)?;
            }
        }
        if let Some(episodes) = &probe {
            if done % cfg.validate_every == 0 || done == cfg.episode.train_episodes {
                let results = evaluate_episodes(&model, &memory, episodes, cfg, Mode::Baseline, 1.0)?;
                let f1 = mean_f1(&results);
                validation.push((done, f1));
                if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                    best = Some((f1, model.params.clone(), memory.clone()));
                }
            }
        }
    }
    if let Some((_, params, store)) = best {
        model.params = params;
        memory = store;
    }
    Ok(Trained {
        model,
        memory,
        log,
        validation,
    })
}

/// Everything about a test episode that does not depend on alpha.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub episode_id: u64,
    pub prototypes: PrototypeSet,
    pub adaption: Option<(AdaptionContext, AdaptionMap)>,
    query_embeddings: Vec<Vec<Vec<f64>>>,
    gold: Vec<Vec<BioTag>>,
}

pub fn prepare_episode(
    model: &Model,
    memory: &MemoryStore,
    episode: &Episode,
    cfg: &RunConfig,
    use_adaption: bool,
) -> Result<PreparedEpisode> {
    let labels = support_labels(episode);
    let mut embedded = Vec::new();
    let mut token_labels = Vec::new();
    for s in &episode.support {
        embedded.extend(model.embed(&s.tokens)?);
        token_labels.extend(s.tags.iter().cloned());
    }
    let prototypes = compute_prototype_values(&embedded, &token_labels, &labels, episode.id)?;
    let adaption = if use_adaption && !memory.is_empty() {
        let ctx = partition_labels(memory, &prototypes, &cfg.contrastive)?;
        if ctx.seen_pairs.is_empty() {
            None
        } else {
            let ada_seed = derive_seed(episode.id, streams::ADAPTION, 0);
            let map = fit_adaption(&ctx.seen_pairs, cfg.adaption.kind, cfg.adaption.iterations, cfg.adaption.lr, ada_seed)?;
            Some((ctx, map))
        }
    } else {
        None
    };
    let query_embeddings = episode.query.iter().map(|s| model.embed(&s.tokens)).collect::<Result<_>>()?;
    Ok(PreparedEpisode {
        episode_id: episode.id,
        prototypes,
        adaption,
        query_embeddings,
        gold: episode.query.iter().map(|s| s.tags.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_id: u64,
    pub counts: SpanCounts,
    pub f1: f64,
    /// Mean query-token cross-entropy against the final prototypes.
    pub loss: f64,
    pub adapted: bool,
    pub predictions: Vec<Vec<BioTag>>,
}

pub fn score_episode(prep: &PreparedEpisode, alpha: f64, cfg: &RunConfig) -> Result<EpisodeResult> {
    let protos = match &prep.adaption {
        Some((ctx, map)) => adapt_prototypes(&prep.prototypes, ctx, map, alpha, cfg.adaption.blend_seen)?,
        None => prep.prototypes.clone(),
    };
    let mut counts = SpanCounts::default();
    let mut predictions = Vec::with_capacity(prep.query_embeddings.len());
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    for (sentence, gold) in prep.query_embeddings.iter().zip(&prep.gold) {
        let mut tags = Vec::with_capacity(sentence.len());
        for (h, g) in sentence.iter().zip(gold) {
            let scores = similarity_values(h, &protos, cfg.metric)?;
            let (_, best) = classify(&scores)?;
            tags.push(protos.labels[best].clone());
            if let Some(gi) = protos.labels.iter().position(|l| l == g) {
                loss_sum += log_sum_exp(&scores) - scores[gi];
                loss_n += 1;
            }
        }
        counts.add(SpanCounts::of_sentence(&spans_from_bio(&tags), &spans_from_bio(gold)));
        predictions.push(tags);
    }
    Ok(EpisodeResult {
        episode_id: prep.episode_id,
        counts,
        f1: counts.scores().f1,
        loss: if loss_n == 0 { 0.0 } else { loss_sum / loss_n as f64 },
        adapted: prep.adaption.is_some(),
        predictions,
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Classifies every query token of every episode. Never mutates the model or
/// the store.
pub fn evaluate_episodes(
    model: &Model,
    memory: &MemoryStore,
    episodes: &[Episode],
    cfg: &RunConfig,
    mode: Mode,
    alpha: f64,
) -> Result<Vec<EpisodeResult>> {
    episodes
        .iter()
        .map(|ep| score_episode(&prepare_episode(model, memory, ep, cfg, mode.use_adaption())?, alpha, cfg))
        .collect()
}

pub fn mean_f1(results: &[EpisodeResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| r.f1).sum::<f64>() / results.len() as f64
}

/// Blend coefficient for adaption modes: the configured value, or the grid
/// value with the best mean validation F1. Without validation episodes the
/// largest grid value is used.
pub fn choose_alpha(model: &Model, memory: &MemoryStore, validation: &[Episode], cfg: &RunConfig) -> Result<f64> {
    if let Some(a) = cfg.adaption.alpha {
        return Ok(a);
    }
    if validation.is_empty() {
        return Ok(cfg.adaption.alpha_grid.iter().copied().fold(0.0, f64::max));
    }
    let prepared = validation
        .iter()
        .map(|ep| prepare_episode(model, memory, ep, cfg, true))
        .collect::<Result<Vec<_>>>()?;
    let (alpha, _) = select_alpha(&cfg.adaption.alpha_grid, |a| {
        let results = prepared.iter().map(|p| score_episode(p, a, cfg)).collect::<Result<Vec<_>>>()?;
        Ok(mean_f1(&results))
    })?;
    Ok(alpha)
}

/// Aggregated metrics of one (seed, domain, shot, mode) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub counts: SpanCounts,
    pub episodes: Vec<EpisodeResult>,
    pub alpha: Option<f64>,
}

pub fn evaluate_cell(
    model: &Model,
    memory: &MemoryStore,
    episodes: &[Episode],
    cfg: &RunConfig,
    mode: Mode,
    alpha: Option<f64>,
) -> Result<CellResult> {
    let a = alpha.unwrap_or(1.0);
    let results = evaluate_episodes(model, memory, episodes, cfg, mode, a)?;
    let mut counts = SpanCounts::default();
    results.iter().for_each(|r| counts.add(r.counts));
    Ok(CellResult {
        counts,
        episodes: results,
        alpha: mode.use_adaption().then_some(a),
    })
}

/// Trains and returns the checkpointable state, writing the final checkpoint
/// when a path is given.
pub fn train_to_checkpoint(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
    mode: Mode,
    checkpoint: Option<&Path>,
) -> Result<Trained> {
    let trained = train(cfg, data, seed, mode, cfg.episode.k_shot)?;
    if let Some(path) = checkpoint {
        write_checkpoint(path, &trained.model.params, &trained.memory)?;
    }
    Ok(trained)
}
