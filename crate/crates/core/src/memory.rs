//! Append-only store of per-episode label prototypes, per-label centroids and
//! the contrastive memory loss.
//!
//! Stored embeddings are detached snapshots: they enter loss graphs as
//! constants, so gradients only reach the current episode's prototypes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::corpus::BioTag;
use crate::diffmath::{format_f64, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::protonet::{PrototypeNodes, PrototypeSet};

pub const MEMORY_HEADER: &str = "memory v1";

/// `Literal` evaluates `d = 1 / (1 + exp(cos))`; `Flipped` negates the exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignMode {
    #[default]
    Literal,
    Flipped,
}

impl FromStr for SignMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "literal" => Ok(SignMode::Literal),
            "flipped" => Ok(SignMode::Flipped),
            other => Err(format!("unknown sign mode `{other}` (literal|flipped)")),
        }
    }
}

impl std::fmt::Display for SignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignMode::Literal => "literal",
            SignMode::Flipped => "flipped",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContrastiveConfig {
    pub sign_mode: SignMode,
    pub include_o: bool,
}

impl ContrastiveConfig {
    pub fn admits(&self, label: &BioTag) -> bool {
        self.include_o || !label.is_outside()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub label: BioTag,
    pub episode_id: u64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct RunningMean {
    sum: Vec<f64>,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryStore {
    records: Vec<MemoryRecord>,
    running: BTreeMap<BioTag, RunningMean>,
    episodes_seen: usize,
    labels_per_episode: Vec<usize>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn episodes_seen(&self) -> usize {
        self.episodes_seen
    }

    pub fn labels_per_episode(&self) -> &[usize] {
        &self.labels_per_episode
    }

    pub fn contains(&self, label: &BioTag) -> bool {
        self.running.contains_key(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &BioTag> {
        self.running.keys()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.embedding.len())
    }

    fn push_record(&mut self, record: MemoryRecord) -> Result<()> {
        if let Some(d) = self.dim() {
            if d != record.embedding.len() {
                return Err(Error::shape(
                    "memory_insert",
                    format!("store dim {d}"),
                    format!("{} dim {}", record.label, record.embedding.len()),
                ));
            }
        }
        let entry = self.running.entry(record.label.clone()).or_insert_with(|| RunningMean {
            sum: vec![0.0; record.embedding.len()],
            count: 0,
        });
        entry.sum.iter_mut().zip(&record.embedding).for_each(|(s, v)| *s += v);
        entry.count += 1;
        self.records.push(record);
        Ok(())
    }

    /// Appends one detached record per admitted label of a finished episode.
    pub fn insert(&mut self, prototypes: &PrototypeSet, config: &ContrastiveConfig) -> Result<()> {
        let mut k = 0;
        for (label, proto) in prototypes.labels.iter().zip(&prototypes.prototypes) {
            if !config.admits(label) {
                continue;
            }
            self.push_record(MemoryRecord {
                label: label.clone(),
                episode_id: prototypes.episode_id,
                embedding: proto.clone(),
            })?;
            k += 1;
        }
        self.episodes_seen += 1;
        self.labels_per_episode.push(k);
        Ok(())
    }

    /// Mean of every stored embedding for `label`.
    pub fn centroid(&self, label: &BioTag) -> Result<Vec<f64>> {
        let r = self.running.get(label).ok_or_else(|| Error::Lookup {
            kind: "memory label",
            name: label.to_string(),
        })?;
        Ok(r.sum.iter().map(|s| s / r.count as f64).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MEMORY_HEADER}");
        let _ = writeln!(out, "episodes {} records {}", self.episodes_seen, self.records.len());
        let history: Vec<String> = self.labels_per_episode.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "history {}", history.join(" "));
        for r in &self.records {
            let floats: Vec<String> = r.embedding.iter().map(|v| format_f64(*v)).collect();
            let _ = writeln!(out, "{} {} {}", r.label, r.episode_id, floats.join(" "));
        }
        out
    }

    /// Parses a `memory v1` section; `offset` is the line number of `lines[0]` minus one.
    pub fn from_lines(lines: &[&str], offset: usize) -> Result<Self> {
        let err = |i: usize, message: String| Error::Parse {
            line: offset + i + 1,
            message,
        };
        let mut it = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match it.next() {
            Some((_, l)) if l.trim() == MEMORY_HEADER => {}
            Some((i, _)) => return Err(err(i, format!("expected `{MEMORY_HEADER}`"))),
            None => return Err(err(0, format!("missing `{MEMORY_HEADER}` section"))),
        }
        let (i, counts) = it.next().ok_or_else(|| err(1, "missing episode counts".into()))?;
        let f: Vec<&str> = counts.split_whitespace().collect();
        let (episodes, n_records) = match f.as_slice() {
            ["episodes", e, "records", r] => (
                e.parse::<usize>().map_err(|_| err(i, "bad episode count".into()))?,
                r.parse::<usize>().map_err(|_| err(i, "bad record count".into()))?,
            ),
            _ => return Err(err(i, "expected `episodes <m> records <n>`".into())),
        };
        let (i, hist) = it.next().ok_or_else(|| err(2, "missing history".into()))?;
        let mut hf = hist.split_whitespace();
        if hf.next() != Some("history") {
            return Err(err(i, "expected `history ...`".into()));
        }
        let history = hf
            .map(|v| v.parse::<usize>().map_err(|_| err(i, format!("bad history entry {v}"))))
            .collect::<Result<Vec<_>>>()?;

        let mut store = MemoryStore::new();
        for (i, line) in it {
            let mut f = line.split_whitespace();
            let label: BioTag = f
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e: crate::corpus::TagParseError| err(i, e.to_string()))?;
            let episode_id: u64 = f
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(i, "bad episode id".into()))?;
            let embedding = f
                .map(|v| v.parse::<f64>().map_err(|_| err(i, format!("bad float {v}"))))
                .collect::<Result<Vec<_>>>()?;
            if embedding.is_empty() {
                return Err(err(i, "record without embedding".into()));
            }
            store.push_record(MemoryRecord {
                label,
                episode_id,
                embedding,
            })?;
        }
        if store.records.len() != n_records || history.len() != episodes {
            return Err(err(
                0,
                format!(
                    "memory section declares {episodes} episodes / {n_records} records, found {} / {}",
                    history.len(),
                    store.records.len()
                ),
            ));
        }
        store.episodes_seen = episodes;
        store.labels_per_episode = history;
        Ok(store)
    }
}

fn cosine_node(g: &mut Graph<'_>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let na = g.l2norm(a);
    let nb = g.l2norm(b);
    if g.scalar(na) == 0.0 || g.scalar(nb) == 0.0 {
        return Err(Error::domain("pair_distance", "zero-norm input"));
    }
    let ua = g.div(a, na)?;
    let ub = g.div(b, nb)?;
    g.dot(ua, ub)
}

/// `d(a, b) = 1 / (1 + exp(±cos(a, b)))` as a graph node.
pub fn pair_distance_node(g: &mut Graph<'_>, a: NodeId, b: NodeId, mode: SignMode) -> Result<NodeId> {
    let cos = cosine_node(g, a, b)?;
    // 1 / (1 + exp(x)) == sigmoid(-x)
    let arg = match mode {
        SignMode::Literal => g.scale(cos, -1.0),
        SignMode::Flipped => cos,
    };
    Ok(g.sigmoid(arg))
}

pub fn pair_distance(a: &[f64], b: &[f64], mode: SignMode) -> Result<f64> {
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let an = g.input(a.to_vec())?;
    let bn = g.input(b.to_vec())?;
    let d = pair_distance_node(&mut g, an, bn, mode)?;
    Ok(g.scalar(d))
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryLoss {
    pub node: NodeId,
    /// Number of summed terms; zero means the loss is the constant 0.
    pub terms: usize,
}

/// Contrastive loss of the current prototypes against the stored centroids.
///
/// For every admitted current label `l` already in the store, the positive
/// term is `log d(c_l, centroid_l)` and every other admitted current
/// prototype `c'` adds `log(1 - d(c', centroid_l))`. The result is the
/// negated mean over all terms.
pub fn memory_loss(
    g: &mut Graph<'_>,
    store: &MemoryStore,
    current: &PrototypeNodes,
    config: &ContrastiveConfig,
) -> Result<MemoryLoss> {
    let admitted: Vec<(usize, &BioTag)> = current
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| config.admits(l))
        .collect();
    let mut terms = Vec::new();
    for &(i, label) in &admitted {
        if !store.contains(label) {
            continue;
        }
        let centroid = g.input(store.centroid(label)?)?;
        let d_pos = pair_distance_node(g, current.nodes[i], centroid, config.sign_mode)?;
        terms.push(g.log(d_pos)?);
        for &(j, other) in &admitted {
            if other == label {
                continue;
            }
            let d_neg = pair_distance_node(g, current.nodes[j], centroid, config.sign_mode)?;
            let one = g.constant(1.0);
            let rest = g.sub(one, d_neg)?;
            terms.push(g.log(rest)?);
        }
    }
    if terms.is_empty() {
        return Ok(MemoryLoss {
            node: g.constant(0.0),
            terms: 0,
        });
    }
    let all = g.concat(&terms)?;
    let mean = g.mean(all);
    Ok(MemoryLoss {
        node: g.scale(mean, -1.0),
        terms: terms.len(),
    })
}

/// Value-level memory loss over a finished prototype set.
pub fn memory_loss_value(store: &MemoryStore, current: &PrototypeSet, config: &ContrastiveConfig) -> Result<(f64, usize)> {
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let nodes = current
        .prototypes
        .iter()
        .map(|p| g.input(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let pn = PrototypeNodes {
        labels: current.labels.clone(),
        nodes,
        counts: current.counts.clone(),
    };
    let loss = memory_loss(&mut g, store, &pn, config)?;
    Ok((g.scalar(loss.node), loss.terms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheckReport {
    pub records: usize,
    pub distinct_labels: usize,
    pub episodes: usize,
    pub violations: Vec<String>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies record accounting, running sums against recomputation and the
/// `k̄ <= records <= m * max_k` bounds.
pub fn memory_self_check(store: &MemoryStore) -> SelfCheckReport {
    let mut violations = Vec::new();
    let total = store.records.len();
    let history_total: usize = store.labels_per_episode.iter().sum();
    if store.labels_per_episode.len() != store.episodes_seen {
        violations.push(format!(
            "history covers {} episodes, store saw {}",
            store.labels_per_episode.len(),
            store.episodes_seen
        ));
    }
    if total != history_total {
        violations.push(format!("{total} records but per-episode label counts sum to {history_total}"));
    }
    if total > 0 && store.running.is_empty() {
        violations.push("records present but no distinct labels".into());
    }
    if store.episodes_seen > 0 {
        let m = store.episodes_seen as f64;
        let k_bar = history_total as f64 / m;
        let k_max = store.labels_per_episode.iter().copied().max().unwrap_or(0);
        if (total as f64) < k_bar {
            violations.push(format!("records {total} below mean labels per episode {k_bar}"));
        }
        if total > store.episodes_seen * k_max {
            violations.push(format!("records {total} above m * max k = {}", store.episodes_seen * k_max));
        }
    }

    let mut recomputed: BTreeMap<&BioTag, (Vec<f64>, usize)> = BTreeMap::new();
    for r in &store.records {
        let e = recomputed
            .entry(&r.label)
            .or_insert_with(|| (vec![0.0; r.embedding.len()], 0));
        e.0.iter_mut().zip(&r.embedding).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    for (label, running) in &store.running {
        match recomputed.get(label) {
            Some((sum, count)) if *count == running.count && *sum == running.sum => {}
            _ => violations.push(format!("running sum for {label} disagrees with its records")),
        }
    }
    for label in recomputed.keys() {
        if !store.running.contains_key(*label) {
            violations.push(format!("label {label} has records but no running sum"));
        }
    }

    SelfCheckReport {
        records: total,
        distinct_labels: store.running.len(),
        episodes: store.episodes_seen,
        violations,
    }
}
