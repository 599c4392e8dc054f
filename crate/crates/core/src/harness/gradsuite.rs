//! Finite-difference checks of every training and adaption loss on small
//! random instances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaption::{adaption_loss, AdaptionKind, AdaptionMap, SeenPair};
use crate::corpus::BioTag;
use crate::diffmath::{eval_with_grads, grad_check, Graph, NodeId, ParamStore};
use crate::encoder::{init_encoder, EncoderParams};
use crate::error::Result;
use crate::memory::{memory_loss, ContrastiveConfig, MemoryStore, SignMode};
use crate::protonet::{compute_prototypes, ner_loss, similarity, PrototypeSet, SimilarityMetric};

use super::metrics::GradRecord;

pub const GRAD_EPSILON: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Smallest non-zero analytic gradient magnitude an instance may have.
/// Central differences at `GRAD_EPSILON` on an O(1) loss carry about
/// `1e-11` of rounding noise, so smaller entries cannot be resolved to
/// `GRAD_TOLERANCE`; instances containing one are redrawn.
pub const RESOLVABLE_GRADIENT: f64 = 1e-6;
const MAX_DRAWS: usize = 1000;

const LABEL_POOL: [&str; 4] = ["O", "B-a", "I-a", "B-b"];

/// A random support/query instance over 2 to 4 labels.
struct Instance {
    params: ParamStore,
    encoder: EncoderParams,
    labels: Vec<BioTag>,
    support: Vec<(Vec<usize>, Vec<BioTag>)>,
    query: Vec<(Vec<usize>, Vec<usize>)>,
    metric: SimilarityMetric,
}

fn random_instance(rng: &mut ChaCha8Rng, metric: SimilarityMetric) -> Result<Instance> {
    let vocab = rng.gen_range(6..12);
    let d_e = rng.gen_range(2..=6);
    let d_h = rng.gen_range(2..=8);
    let mut params = ParamStore::new();
    let encoder = init_encoder(&mut params, vocab, d_e, d_h, rng.gen())?;
    // non-zero biases so every parameter gets a generic gradient
    for id in [encoder.b1, encoder.b2] {
        params.slot_mut(id).data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let n_labels = rng.gen_range(2..=LABEL_POOL.len());
    let labels: Vec<BioTag> = LABEL_POOL[..n_labels].iter().map(|l| l.parse().expect("pool tag")).collect();

    let token = |rng: &mut ChaCha8Rng| rng.gen_range(2..vocab);
    let mut tags: Vec<BioTag> = labels.clone();
    for _ in 0..rng.gen_range(0..4) {
        tags.push(labels.choose(rng).expect("labels").clone());
    }
    tags.shuffle(rng);
    let mut support = Vec::new();
    for chunk in tags.chunks(3) {
        support.push((chunk.iter().map(|_| token(rng)).collect(), chunk.to_vec()));
    }
    let query = (0..2)
        .map(|_| {
            let n = rng.gen_range(1..=4);
            let ids = (0..n).map(|_| token(rng)).collect();
            let gold = (0..n).map(|_| rng.gen_range(0..n_labels)).collect();
            (ids, gold)
        })
        .collect();
    Ok(Instance {
        params,
        encoder,
        labels,
        support,
        query,
        metric,
    })
}

fn prototypes(g: &mut Graph<'_>, inst: &Instance) -> Result<crate::protonet::PrototypeNodes> {
    let mut emb = Vec::new();
    let mut tags = Vec::new();
    for (ids, t) in &inst.support {
        emb.extend(inst.encoder.encode(g, ids)?);
        tags.extend(t.iter().cloned());
    }
    compute_prototypes(g, &emb, &tags, &inst.labels)
}

fn ner_graph(g: &mut Graph<'_>, inst: &Instance) -> Result<NodeId> {
    let protos = prototypes(g, inst)?;
    let mut scores = Vec::new();
    let mut gold = Vec::new();
    for (ids, y) in &inst.query {
        for (h, &yi) in inst.encoder.encode(g, ids)?.into_iter().zip(y) {
            scores.push(similarity(g, h, &protos.nodes, inst.metric)?);
            gold.push(yi);
        }
    }
    ner_loss(g, &scores, &gold)
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// A store holding one or two random snapshots for a random non-empty subset
/// of the instance's slot labels.
fn random_store(rng: &mut ChaCha8Rng, inst: &Instance, cfg: &ContrastiveConfig) -> Result<MemoryStore> {
    let d = inst.encoder.dims.d_h;
    let slot_labels: Vec<BioTag> = inst.labels.iter().filter(|l| cfg.admits(l)).cloned().collect();
    let mut store = MemoryStore::new();
    for ep in 0..rng.gen_range(1..=2u64) {
        let k = rng.gen_range(1..=slot_labels.len());
        let chosen: Vec<BioTag> = slot_labels.choose_multiple(rng, k).cloned().collect();
        store.insert(
            &PrototypeSet {
                episode_id: ep,
                prototypes: chosen.iter().map(|_| random_vec(rng, d)).collect(),
                counts: vec![1; chosen.len()],
                labels: chosen,
            },
            cfg,
        )?;
    }
    Ok(store)
}

fn random_pairs(rng: &mut ChaCha8Rng, d: usize) -> Vec<SeenPair> {
    (0..rng.gen_range(1..=4))
        .map(|i| SeenPair {
            label: BioTag::begin(format!("s{i}")),
            train_side: random_vec(rng, d),
            test_side: random_vec(rng, d),
        })
        .collect()
}

/// True when every analytic entry is exactly zero or at least
/// [`RESOLVABLE_GRADIENT`] in magnitude. Only the analytic side is inspected.
fn resolvable<F>(params: &ParamStore, build: F) -> Result<bool>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let (_, grads) = eval_with_grads(params, build)?;
    Ok(params
        .ids()
        .filter_map(|id| grads.get(id))
        .flatten()
        .all(|&v| v == 0.0 || v.abs() >= RESOLVABLE_GRADIENT))
}

/// Draws instances until `accept` holds.
fn draw<T>(rng: &mut ChaCha8Rng, mut make: impl FnMut(&mut ChaCha8Rng) -> Result<T>, accept: impl Fn(&T) -> Result<bool>) -> Result<T> {
    for _ in 0..MAX_DRAWS {
        let candidate = make(rng)?;
        if accept(&candidate)? {
            return Ok(candidate);
        }
    }
    Err(crate::Error::Invalid("could not draw a resolvable gradient instance".into()))
}

fn summarize(loss: &str, errors: Vec<f64>, failed: usize) -> GradRecord {
    GradRecord {
        loss: loss.to_string(),
        instances: errors.len(),
        max_rel_error: errors.into_iter().fold(0.0, f64::max),
        passed: failed == 0,
    }
}

/// NER loss through encoder and prototypes under the default metric, the
/// memory loss in both sign modes, and the adaption loss for linear and MLP
/// maps.
pub fn run_grad_suite(seed: u64, instances: usize) -> Result<Vec<GradRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (mut errs, mut failed) = (Vec::new(), 0);
    for _ in 0..instances {
        let inst = draw(
            &mut rng,
            |r| random_instance(r, SimilarityMetric::default()),
            |i| resolvable(&i.params, |g| ner_graph(g, i)),
        )?;
        let r = grad_check(&inst.params, |g| ner_graph(g, &inst), GRAD_EPSILON, GRAD_TOLERANCE)?;
        errs.push(r.max_rel_error());
        failed += usize::from(!r.passed());
    }
    out.push(summarize("ner", errs, failed));

    for mode in [SignMode::Literal, SignMode::Flipped] {
        let cfg = ContrastiveConfig {
            sign_mode: mode,
            include_o: false,
        };
        let (mut errs, mut failed) = (Vec::new(), 0);
        let loss = |g: &mut Graph<'_>, inst: &Instance, store: &MemoryStore| -> Result<NodeId> {
            let p = prototypes(g, inst)?;
            Ok(memory_loss(g, store, &p, &cfg)?.node)
        };
        for _ in 0..instances {
            let (inst, store) = draw(
                &mut rng,
                |r| {
                    let inst = random_instance(r, SimilarityMetric::default())?;
                    let store = random_store(r, &inst, &cfg)?;
                    Ok((inst, store))
                },
                |(i, s)| resolvable(&i.params, |g| loss(g, i, s)),
            )?;
            let r = grad_check(&inst.params, |g| loss(g, &inst, &store), GRAD_EPSILON, GRAD_TOLERANCE)?;
            errs.push(r.max_rel_error());
            failed += usize::from(!r.passed());
        }
        out.push(summarize(&format!("memory_{mode}"), errs, failed));
    }

    for kind in [AdaptionKind::Linear, AdaptionKind::Mlp] {
        let (mut errs, mut failed) = (Vec::new(), 0);
        for _ in 0..instances {
            let (pairs, map) = draw(
                &mut rng,
                |r| {
                    let d = r.gen_range(2..=8);
                    let pairs = random_pairs(r, d);
                    let mut map = AdaptionMap::init(kind, d, r.gen())?;
                    // move away from the identity / zero-bias start
                    for slot in map.params.ids().collect::<Vec<_>>() {
                        map.params
                            .slot_mut(slot)
                            .data
                            .iter_mut()
                            .for_each(|v| *v += r.gen_range(-0.3..0.3));
                    }
                    Ok((pairs, map))
                },
                |(p, m)| resolvable(&m.params, |g| adaption_loss(g, m, p)),
            )?;
            let r = grad_check(&map.params, |g| adaption_loss(g, &map, &pairs), GRAD_EPSILON, GRAD_TOLERANCE)?;
            errs.push(r.max_rel_error());
            failed += usize::from(!r.passed());
        }
        out.push(summarize(&format!("adaption_{kind}"), errs, failed));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::relative_error;

    /// Central differences at 1e-5 on an O(1) loss carry about one ulp / 2e-5
    /// of noise, so entries are compared with an absolute floor as well.
    fn close(a: f64, n: f64) -> bool {
        relative_error(a, n) < GRAD_TOLERANCE || (a - n).abs() < 1e-9
    }

    #[test]
    fn default_suite_passes() {
        let records = run_grad_suite(0, 20).unwrap();
        assert_eq!(records.len(), 5);
        assert!(records.iter().all(|r| r.passed && r.instances == 20), "{records:?}");
    }

    #[test]
    fn unconditioned_instances_pass_with_noise_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for metric in [SimilarityMetric::DotProduct, SimilarityMetric::Cosine, SimilarityMetric::NegSqEuclidean] {
            for _ in 0..20 {
                let inst = random_instance(&mut rng, metric).unwrap();
                let r = grad_check(&inst.params, |g| ner_graph(g, &inst), GRAD_EPSILON, 0.0).unwrap();
                for slot in &r.slots {
                    for f in &slot.flagged {
                        assert!(close(f.analytic, f.numeric), "{metric} {} {f:?}", slot.name);
                    }
                }
            }
        }
    }

    #[test]
    fn output_bias_is_invisible_to_squared_distance() {
        // shifting every embedding by b2 leaves all pairwise distances unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = random_instance(&mut rng, SimilarityMetric::NegSqEuclidean).unwrap();
        let (_, grads) = crate::diffmath::eval_with_grads(&inst.params, |g| ner_graph(g, &inst)).unwrap();
        assert!(grads.get(inst.encoder.b2).unwrap().iter().all(|v| v.abs() < 1e-15));
    }
}
