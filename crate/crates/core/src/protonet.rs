//! Per-episode prototypical classification.

use std::str::FromStr;

use crate::corpus::BioTag;
use crate::diffmath::{softmax, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};

/// Label prototypes of one episode, in label-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub episode_id: u64,
    pub labels: Vec<BioTag>,
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn get(&self, label: &BioTag) -> Option<&[f64]> {
        self.labels.iter().position(|l| l == label).map(|i| self.prototypes[i].as_slice())
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Prototype nodes inside a graph, in label-set order.
#[derive(Debug, Clone)]
pub struct PrototypeNodes {
    pub labels: Vec<BioTag>,
    pub nodes: Vec<NodeId>,
    pub counts: Vec<usize>,
}

impl PrototypeNodes {
    pub fn to_set(&self, g: &Graph<'_>, episode_id: u64) -> PrototypeSet {
        PrototypeSet {
            episode_id,
            labels: self.labels.clone(),
            prototypes: self.nodes.iter().map(|&n| g.value(n).to_vec()).collect(),
            counts: self.counts.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityMetric {
    #[default]
    DotProduct,
    Cosine,
    NegSqEuclidean,
}

impl FromStr for SimilarityMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dot" | "dot_product" => Ok(SimilarityMetric::DotProduct),
            "cosine" => Ok(SimilarityMetric::Cosine),
            "neg_sq_euclidean" | "euclidean" => Ok(SimilarityMetric::NegSqEuclidean),
            other => Err(format!("unknown metric `{other}` (dot|cosine|neg_sq_euclidean)")),
        }
    }
}

impl std::fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimilarityMetric::DotProduct => "dot",
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::NegSqEuclidean => "neg_sq_euclidean",
        })
    }
}

/// Mean embedding of the support tokens carrying each label of `label_set`.
pub fn compute_prototypes(
    g: &mut Graph<'_>,
    embeddings: &[NodeId],
    token_labels: &[BioTag],
    label_set: &[BioTag],
) -> Result<PrototypeNodes> {
    if embeddings.len() != token_labels.len() {
        return Err(Error::shape(
            "compute_prototypes",
            format!("{} embeddings", embeddings.len()),
            format!("{} labels", token_labels.len()),
        ));
    }
    let mut members: Vec<Vec<NodeId>> = vec![Vec::new(); label_set.len()];
    for (node, label) in embeddings.iter().zip(token_labels) {
        let idx = label_set.iter().position(|l| l == label).ok_or_else(|| Error::Lookup {
            kind: "label",
            name: format!("{label} (not in the episode label set)"),
        })?;
        members[idx].push(*node);
    }
    let mut nodes = Vec::with_capacity(label_set.len());
    let mut counts = Vec::with_capacity(label_set.len());
    for (label, group) in label_set.iter().zip(&members) {
        if group.is_empty() {
            return Err(Error::Invalid(format!("label {label} has no support tokens")));
        }
        let total = g.add_all(group)?;
        nodes.push(g.scale(total, 1.0 / group.len() as f64));
        counts.push(group.len());
    }
    Ok(PrototypeNodes {
        labels: label_set.to_vec(),
        nodes,
        counts,
    })
}

/// Value-level prototypes.
pub fn compute_prototype_values(
    embeddings: &[Vec<f64>],
    token_labels: &[BioTag],
    label_set: &[BioTag],
    episode_id: u64,
) -> Result<PrototypeSet> {
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let nodes = embeddings.iter().map(|e| g.input(e.clone())).collect::<Result<Vec<_>>>()?;
    let protos = compute_prototypes(&mut g, &nodes, token_labels, label_set)?;
    Ok(protos.to_set(&g, episode_id))
}

fn score(g: &mut Graph<'_>, x: NodeId, c: NodeId, metric: SimilarityMetric) -> Result<NodeId> {
    match metric {
        SimilarityMetric::DotProduct => g.dot(x, c),
        SimilarityMetric::NegSqEuclidean => {
            let d = g.sq_dist(x, c)?;
            Ok(g.scale(d, -1.0))
        }
        SimilarityMetric::Cosine => {
            let dot = g.dot(x, c)?;
            let nx = g.l2norm(x);
            let nc = g.l2norm(c);
            if g.scalar(nx) == 0.0 || g.scalar(nc) == 0.0 {
                return Ok(g.constant(0.0));
            }
            let denom = g.mul(nx, nc)?;
            g.div(dot, denom)
        }
    }
}

/// Score vector of `x` against every prototype, in label-set order.
pub fn similarity(g: &mut Graph<'_>, x: NodeId, prototypes: &[NodeId], metric: SimilarityMetric) -> Result<NodeId> {
    let scores = prototypes
        .iter()
        .map(|&c| score(g, x, c, metric))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&scores)
}

pub fn similarity_values(x: &[f64], prototypes: &PrototypeSet, metric: SimilarityMetric) -> Result<Vec<f64>> {
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let xn = g.input(x.to_vec())?;
    let cs = prototypes
        .prototypes
        .iter()
        .map(|c| g.input(c.clone()))
        .collect::<Result<Vec<_>>>()?;
    let s = similarity(&mut g, xn, &cs, metric)?;
    Ok(g.value(s).to_vec())
}

/// Softmax distribution and argmax (first maximum wins).
pub fn classify(scores: &[f64]) -> Result<(Vec<f64>, usize)> {
    if scores.is_empty() {
        return Err(Error::Invalid("classify needs at least one score".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::domain("classify", format!("non-finite score {bad}")));
    }
    let dist = softmax(scores);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((dist, best))
}

/// Mean token cross-entropy `-log P(gold)` over the given score vectors.
pub fn ner_loss(g: &mut Graph<'_>, scores: &[NodeId], gold: &[usize]) -> Result<NodeId> {
    if scores.len() != gold.len() || scores.is_empty() {
        return Err(Error::shape(
            "ner_loss",
            format!("{} score vectors", scores.len()),
            format!("{} gold labels", gold.len()),
        ));
    }
    let mut logs = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(gold) {
        let dist = g.softmax(s);
        logs.push(gold_log_prob(g, dist, y)?);
    }
    let all = g.concat(&logs)?;
    let mean = g.mean(all);
    Ok(g.scale(mean, -1.0))
}

fn gold_log_prob(g: &mut Graph<'_>, dist: NodeId, gold: usize) -> Result<NodeId> {
    let n = g.dim(dist);
    if gold >= n {
        return Err(Error::Lookup {
            kind: "gold label index",
            name: format!("{gold} of {n}"),
        });
    }
    let mut onehot = vec![0.0; n];
    onehot[gold] = 1.0;
    let mask = g.input(onehot)?;
    let p = g.dot(dist, mask)?;
    g.log(p)
}

/// Value-level cross-entropy over explicit distributions.
pub fn ner_loss_values(distributions: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    if distributions.len() != gold.len() || distributions.is_empty() {
        return Err(Error::shape(
            "ner_loss",
            format!("{} distributions", distributions.len()),
            format!("{} gold labels", gold.len()),
        ));
    }
    let mut logs = Vec::new();
    for (d, &y) in distributions.iter().zip(gold) {
        let dist = g.input(d.clone())?;
        logs.push(gold_log_prob(&mut g, dist, y)?);
    }
    let all = g.concat(&logs)?;
    let mean = g.mean(all);
    let loss = g.scale(mean, -1.0);
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> BioTag {
        s.parse().unwrap()
    }

    #[test]
    fn mean_of_one_and_two() {
        let ls = vec![t("B-a")];
        let p = compute_prototype_values(&[vec![1.5, -2.0]], &ls, &ls, 0).unwrap();
        assert_eq!(p.prototypes[0], vec![1.5, -2.0]);
        assert_eq!(p.counts, vec![1]);
        let p = compute_prototype_values(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[t("B-a"), t("B-a")], &ls, 0).unwrap();
        assert_eq!(p.prototypes[0], vec![2.0, 3.0]);
    }

    #[test]
    fn missing_label_is_named() {
        let ls = vec![t("O"), t("B-a")];
        let err = compute_prototype_values(&[vec![1.0]], &[t("O")], &ls, 0).unwrap_err();
        assert!(err.to_string().contains("B-a"), "{err}");
    }

    #[test]
    fn dot_scores() {
        let ps = PrototypeSet {
            episode_id: 0,
            labels: vec![t("O"), t("B-a")],
            prototypes: vec![vec![3.0, 4.0], vec![-1.0, 0.5]],
            counts: vec![1, 1],
        };
        assert_eq!(similarity_values(&[1.0, 2.0], &ps, SimilarityMetric::DotProduct).unwrap(), vec![11.0, 0.0]);
        assert_eq!(similarity_values(&[0.0, 0.0], &ps, SimilarityMetric::DotProduct).unwrap(), vec![0.0, 0.0]);
        assert_eq!(similarity_values(&[0.0, 0.0], &ps, SimilarityMetric::Cosine).unwrap(), vec![0.0, 0.0]);
        let c = similarity_values(&[3.0, 4.0], &ps, SimilarityMetric::Cosine).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn euclidean_identity_is_maximal() {
        let ps = PrototypeSet {
            episode_id: 0,
            labels: vec![t("O"), t("B-a"), t("I-a")],
            prototypes: vec![vec![3.0, 4.0], vec![-1.0, 0.5], vec![0.0, 0.0]],
            counts: vec![1, 1, 1],
        };
        let s = similarity_values(&[-1.0, 0.5], &ps, SimilarityMetric::NegSqEuclidean).unwrap();
        assert_eq!(s[1], 0.0);
        assert!(s[0] < 0.0 && s[2] < 0.0);
        assert_eq!(classify(&s).unwrap().1, 1);
    }

    #[test]
    fn dim_mismatch_errors() {
        let ps = PrototypeSet {
            episode_id: 0,
            labels: vec![t("O")],
            prototypes: vec![vec![3.0, 4.0]],
            counts: vec![1],
        };
        assert!(matches!(
            similarity_values(&[1.0], &ps, SimilarityMetric::DotProduct),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn classify_examples() {
        let (d, a) = classify(&[0.0, 0.0]).unwrap();
        assert_eq!((d, a), (vec![0.5, 0.5], 0));
        let (d, _) = classify(&[1.0, 1.0, 1.0]).unwrap();
        assert!(d.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let (d, a) = classify(&[std::f64::consts::LN_2, 0.0]).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a, 0);
        assert!(classify(&[f64::NAN]).is_err());
        assert!(classify(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        let l = ner_loss_values(&[vec![0.5, 0.5], vec![0.25, 0.75]], &[0, 0]).unwrap();
        assert!((l - 1.5 * ln2).abs() < 1e-15);
        let k: f64 = 4.0;
        let u = vec![0.25; 4];
        let l = ner_loss_values(&[u.clone(), u.clone(), u], &[0, 2, 3]).unwrap();
        assert!((l - k.ln()).abs() < 1e-15);
        let l = ner_loss_values(&[vec![1.0 - 1e-15, 1e-15]], &[0]).unwrap();
        assert!(l.abs() < 1e-14);
        assert!(matches!(ner_loss_values(&[vec![1.0, 0.0]], &[1]), Err(Error::Domain { .. })));
    }
}
