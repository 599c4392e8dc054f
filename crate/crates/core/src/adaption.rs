//! Test-time adaption from memory.
//!
//! Labels shared between the memory store and a test episode give pairs of
//! (memory centroid, test prototype). A small map `f` is fit per episode so
//! that `f(test) ≈ centroid`; every test prototype is then blended with its
//! projection: `fin = alpha * ori + (1 - alpha) * f(ori)`.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::BioTag;
use crate::diffmath::{adam_step, eval_with_grads, AdamConfig, AdamState, Graph, NodeId, ParamStore, SlotId};
use crate::encoder::uniform_fan_in;
use crate::error::{Error, Result};
use crate::memory::{ContrastiveConfig, MemoryStore};
use crate::protonet::PrototypeSet;

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_LR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdaptionKind {
    #[default]
    Linear,
    LinearNoBias,
    Mlp,
}

impl FromStr for AdaptionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(AdaptionKind::Linear),
            "linear_no_bias" => Ok(AdaptionKind::LinearNoBias),
            "mlp" => Ok(AdaptionKind::Mlp),
            other => Err(format!("unknown adaption kind `{other}` (linear|linear_no_bias|mlp)")),
        }
    }
}

impl std::fmt::Display for AdaptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdaptionKind::Linear => "linear",
            AdaptionKind::LinearNoBias => "linear_no_bias",
            AdaptionKind::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeenPair {
    pub label: BioTag,
    /// Memory centroid.
    pub train_side: Vec<f64>,
    /// Test-episode prototype.
    pub test_side: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptionContext {
    pub seen_pairs: Vec<SeenPair>,
    pub unseen: Vec<(BioTag, Vec<f64>)>,
}

impl AdaptionContext {
    pub fn seen_labels(&self) -> impl Iterator<Item = &BioTag> {
        self.seen_pairs.iter().map(|p| &p.label)
    }

    pub fn unseen_labels(&self) -> impl Iterator<Item = &BioTag> {
        self.unseen.iter().map(|(l, _)| l)
    }
}

/// Splits the admitted test labels into those with a memory centroid (seen)
/// and the rest (unseen).
pub fn partition_labels(store: &MemoryStore, test: &PrototypeSet, config: &ContrastiveConfig) -> Result<AdaptionContext> {
    let mut ctx = AdaptionContext::default();
    for (label, proto) in test.labels.iter().zip(&test.prototypes) {
        if !config.admits(label) {
            continue;
        }
        if store.contains(label) {
            ctx.seen_pairs.push(SeenPair {
                label: label.clone(),
                train_side: store.centroid(label)?,
                test_side: proto.clone(),
            });
        } else {
            ctx.unseen.push((label.clone(), proto.clone()));
        }
    }
    Ok(ctx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layers {
    Linear { w: SlotId, b: Option<SlotId> },
    Mlp { w1: SlotId, b1: SlotId, w2: SlotId, b2: SlotId },
}

/// The fitted map `f` together with its blend coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptionMap {
    pub kind: AdaptionKind,
    pub params: ParamStore,
    pub alpha: f64,
    pub fit_report: FitReport,
    layers: Layers,
    dim: usize,
}

impl AdaptionMap {
    /// Linear map with explicit weights (row-major `dim x dim`).
    pub fn linear(weights: Vec<f64>, bias: Option<Vec<f64>>, alpha: f64) -> Result<Self> {
        let dim = (weights.len() as f64).sqrt() as usize;
        if dim == 0 || dim * dim != weights.len() {
            return Err(Error::shape("adaption", format!("{} weights", weights.len()), "square matrix"));
        }
        let mut params = ParamStore::new();
        let w = params.add_matrix("ada.w", dim, dim, weights, true)?;
        let (kind, b) = match bias {
            Some(b) => (AdaptionKind::Linear, Some(params.add_vector("ada.b", b, true)?)),
            None => (AdaptionKind::LinearNoBias, None),
        };
        if let Some(b) = b {
            if params.slot(b).rows != dim {
                return Err(Error::shape("adaption", params.slot(b).shape_string(), format!("dim {dim}")));
            }
        }
        Ok(AdaptionMap {
            kind,
            params,
            alpha,
            fit_report: FitReport {
                initial_loss: 0.0,
                final_loss: 0.0,
                iterations: 0,
            },
            layers: Layers::Linear { w, b },
            dim,
        })
    }

    /// Identity-initialized linear map, or an MLP initialized like the encoder.
    pub fn init(kind: AdaptionKind, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("adaption map needs a positive dimension".into()));
        }
        let mut params = ParamStore::new();
        let layers = match kind {
            AdaptionKind::Linear | AdaptionKind::LinearNoBias => {
                let mut eye = vec![0.0; dim * dim];
                (0..dim).for_each(|i| eye[i * dim + i] = 1.0);
                let w = params.add_matrix("ada.w", dim, dim, eye, true)?;
                let b = match kind {
                    AdaptionKind::Linear => Some(params.add_vector("ada.b", vec![0.0; dim], true)?),
                    _ => None,
                };
                Layers::Linear { w, b }
            }
            AdaptionKind::Mlp => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w1 = uniform_fan_in(&mut rng, dim * dim, dim);
                let w2 = uniform_fan_in(&mut rng, dim * dim, dim);
                Layers::Mlp {
                    w1: params.add_matrix("ada.w1", dim, dim, w1, true)?,
                    b1: params.add_vector("ada.b1", vec![0.0; dim], true)?,
                    w2: params.add_matrix("ada.w2", dim, dim, w2, true)?,
                    b2: params.add_vector("ada.b2", vec![0.0; dim], true)?,
                }
            }
        };
        Ok(AdaptionMap {
            kind,
            params,
            alpha: 1.0,
            fit_report: FitReport {
                initial_loss: 0.0,
                final_loss: 0.0,
                iterations: 0,
            },
            layers,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `f(x)` as a graph node over `self.params`.
    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        match self.layers {
            Layers::Linear { w, b } => {
                let y = g.matvec(w, x)?;
                match b {
                    Some(b) => {
                        let bn = g.param(b)?;
                        g.add(y, bn)
                    }
                    None => Ok(y),
                }
            }
            Layers::Mlp { w1, b1, w2, b2 } => {
                let h = g.matvec(w1, x)?;
                let b1n = g.param(b1)?;
                let h = g.add(h, b1n)?;
                let h = g.tanh(h);
                let y = g.matvec(w2, h)?;
                let b2n = g.param(b2)?;
                g.add(y, b2n)
            }
        }
    }

    pub fn slot(&self, name: &str) -> Result<&[f64]> {
        self.params.get(name).map(|s| s.data.as_slice())
    }

    pub fn slot_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        let id = self.params.id(name)?;
        Ok(&mut self.params.slot_mut(id).data)
    }
}

/// `sum_i ||train_i - f(test_i)||^2` over a map's parameters.
pub fn adaption_loss(g: &mut Graph<'_>, map: &AdaptionMap, pairs: &[SeenPair]) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(pairs.len());
    for p in pairs {
        let test = g.input(p.test_side.clone())?;
        let train = g.input(p.train_side.clone())?;
        let mapped = map.apply(g, test)?;
        terms.push(g.sq_dist(train, mapped)?);
    }
    let all = g.concat(&terms)?;
    Ok(g.sum(all))
}

/// Fits `f` on the seen pairs. Linear maps make the loss a convex quadratic,
/// so they use conjugate gradient with exact line search (`lr` is unused);
/// the MLP uses full-batch Adam. The lowest-loss iterate is kept, so the
/// reported final loss never exceeds the initial one.
pub fn fit_adaption(
    seen_pairs: &[SeenPair],
    kind: AdaptionKind,
    iterations: usize,
    lr: f64,
    seed: u64,
) -> Result<AdaptionMap> {
    let Some(first) = seen_pairs.first() else {
        return Err(Error::Invalid(
            "no seen labels to fit the adaption map on; skip adaption for this episode".into(),
        ));
    };
    let dim = first.test_side.len();
    for p in seen_pairs {
        if p.test_side.len() != dim || p.train_side.len() != dim {
            return Err(Error::shape(
                "fit_adaption",
                format!("{} test {} / train {}", p.label, p.test_side.len(), p.train_side.len()),
                format!("dim {dim}"),
            ));
        }
    }
    let mut map = AdaptionMap::init(kind, dim, seed)?;
    let mut fit = BestIterate::new(&map.params);
    match kind {
        AdaptionKind::Mlp => fit_adam(&mut map, seen_pairs, iterations, lr, &mut fit)?,
        AdaptionKind::Linear | AdaptionKind::LinearNoBias => fit_cg(&mut map, seen_pairs, iterations, &mut fit)?,
    }
    map.params = fit.params;
    map.fit_report = FitReport {
        initial_loss: fit.initial,
        final_loss: fit.loss,
        iterations,
    };
    Ok(map)
}

struct BestIterate {
    params: ParamStore,
    loss: f64,
    initial: f64,
}

impl BestIterate {
    fn new(params: &ParamStore) -> Self {
        BestIterate {
            params: params.clone(),
            loss: f64::INFINITY,
            initial: f64::NAN,
        }
    }

    fn offer(&mut self, params: &ParamStore, loss: f64) {
        if self.initial.is_nan() {
            self.initial = loss;
        }
        if loss < self.loss {
            self.loss = loss;
            self.params.clone_from(params);
        }
    }
}

fn loss_and_grad(map: &AdaptionMap, pairs: &[SeenPair]) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = eval_with_grads(&map.params, |g| adaption_loss(g, map, pairs))?;
    let flat = map.params.ids().filter_map(|id| grads.get(id)).flatten().copied().collect();
    Ok((loss, flat))
}

fn step_along(params: &mut ParamStore, dir: &[f64], t: f64) {
    let mut it = dir.iter();
    for id in params.ids().collect::<Vec<_>>() {
        let slot = params.slot_mut(id);
        if slot.trainable {
            slot.data.iter_mut().zip(it.by_ref()).for_each(|(v, d)| *v += t * d);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fit_adam(map: &mut AdaptionMap, pairs: &[SeenPair], iterations: usize, lr: f64, fit: &mut BestIterate) -> Result<()> {
    let mut state = AdamState::new(
        &map.params,
        AdamConfig {
            lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    for step in 0..=iterations {
        let (loss, grads) = eval_with_grads(&map.params, |g| adaption_loss(g, map, pairs))?;
        fit.offer(&map.params, loss);
        if step == iterations || loss == 0.0 {
            break;
        }
        adam_step(&mut map.params, &grads, &mut state)?;
    }
    Ok(())
}

/// Polak-Ribiere conjugate gradient, restarted every `n` steps. The curvature
/// along a direction is the gradient difference, exact for a quadratic.
fn fit_cg(map: &mut AdaptionMap, pairs: &[SeenPair], iterations: usize, fit: &mut BestIterate) -> Result<()> {
    let (mut loss, mut grad) = loss_and_grad(map, pairs)?;
    fit.offer(&map.params, loss);
    let n = grad.len();
    let mut r: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut dir = r.clone();
    for step in 0..iterations {
        let rr = dot(&r, &r);
        if loss == 0.0 || rr == 0.0 {
            break;
        }
        let saved = map.params.clone();
        step_along(&mut map.params, &dir, 1.0);
        let (_, g_probe) = loss_and_grad(map, pairs)?;
        map.params = saved;
        let curvature: f64 = dir.iter().zip(g_probe.iter().zip(&grad)).map(|(d, (a, b))| d * (a - b)).sum();
        if curvature.is_nan() || curvature <= 0.0 {
            break;
        }
        step_along(&mut map.params, &dir, dot(&r, &dir) / curvature);
        (loss, grad) = loss_and_grad(map, pairs)?;
        if !loss.is_finite() {
            break;
        }
        fit.offer(&map.params, loss);
        let r_next: Vec<f64> = grad.iter().map(|g| -g).collect();
        let beta = if (step + 1) % n == 0 {
            0.0
        } else {
            (dot(&r_next, &r_next) - dot(&r_next, &r)).max(0.0) / rr
        };
        dir.iter_mut().zip(&r_next).for_each(|(d, r)| *d = r + beta * *d);
        r = r_next;
    }
    Ok(())
}

pub fn project(map: &AdaptionMap, test_ori: &[f64]) -> Result<Vec<f64>> {
    if test_ori.len() != map.dim {
        return Err(Error::shape("project", format!("input dim {}", test_ori.len()), format!("map dim {}", map.dim)));
    }
    let mut g = Graph::new(&map.params);
    let x = g.input(test_ori.to_vec())?;
    let y = map.apply(&mut g, x)?;
    Ok(g.value(y).to_vec())
}

/// `alpha * ori + (1 - alpha) * ada`.
pub fn blend(test_ori: &[f64], test_ada: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if test_ori.len() != test_ada.len() {
        return Err(Error::shape("blend", test_ori.len(), test_ada.len()));
    }
    Ok(test_ori
        .iter()
        .zip(test_ada)
        .map(|(o, a)| alpha * o + (1.0 - alpha) * a)
        .collect())
}

/// Final test prototypes: unseen labels (and seen ones when `blend_seen`) are
/// blended with their projection; everything else passes through.
pub fn adapt_prototypes(
    test: &PrototypeSet,
    ctx: &AdaptionContext,
    map: &AdaptionMap,
    alpha: f64,
    blend_seen: bool,
) -> Result<PrototypeSet> {
    let mut out = test.clone();
    for (i, label) in test.labels.iter().enumerate() {
        let adapt = ctx.unseen_labels().any(|l| l == label) || (blend_seen && ctx.seen_labels().any(|l| l == label));
        if adapt {
            let ori = &test.prototypes[i];
            out.prototypes[i] = blend(ori, &project(map, ori)?, alpha)?;
        }
    }
    Ok(out)
}

/// Grid value with the highest score; ties go to the larger alpha.
pub fn select_alpha<F>(grid: &[f64], mut evaluate: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::Invalid("alpha grid is empty".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &alpha in grid {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        let score = evaluate(alpha)?;
        scores.push(score);
        best = match best {
            Some((a, s)) if s > score || (s == score && a >= alpha) => Some((a, s)),
            _ => Some((alpha, score)),
        };
    }
    Ok((best.expect("non-empty grid").0, scores))
}
