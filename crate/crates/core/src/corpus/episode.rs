use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BioTag, Corpus, Sentence};
use crate::error::{Error, Result};

/// One N-way K-shot task: support and query sentences over a shared label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub id: u64,
    pub domain: String,
    pub support: Vec<Sentence>,
    pub query: Vec<Sentence>,
    /// `O` first, then the slot labels in label-set order.
    pub label_set: Vec<BioTag>,
    /// Corpus indices of the support and query sentences within the domain.
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Episode {
    /// Occurrence counts of every non-`O` label in the support set.
    pub fn support_counts(&self) -> BTreeMap<BioTag, usize> {
        label_counts(self.support.iter())
    }

    /// Verifies the K-shot, label-coverage and disjointness invariants.
    pub fn check(&self, k_shot: usize) -> Result<()> {
        let counts = self.support_counts();
        for label in self.label_set.iter().filter(|l| !l.is_outside()) {
            let n = counts.get(label).copied().unwrap_or(0);
            if n < k_shot {
                return Err(Error::Invalid(format!("label {label} has {n} < {k_shot} support occurrences")));
            }
        }
        for label in counts.keys() {
            if !self.label_set.contains(label) {
                return Err(Error::Invalid(format!("support label {label} missing from label set")));
            }
        }
        let support: BTreeSet<usize> = self.support_indices.iter().copied().collect();
        if self.query_indices.iter().any(|q| support.contains(q)) {
            return Err(Error::Invalid("support and query overlap".into()));
        }
        Ok(())
    }

    /// Non-`O` labels of this episode.
    pub fn slot_labels(&self) -> impl Iterator<Item = &BioTag> {
        self.label_set.iter().filter(|l| !l.is_outside())
    }
}

fn label_counts<'a>(sentences: impl Iterator<Item = &'a Sentence>) -> BTreeMap<BioTag, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for t in s.tags.iter().filter(|t| !t.is_outside()) {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Greedy minimal-inclusion sampling.
///
/// Sentences are shuffled by `seed`. The support set grows by the sentence
/// covering the most still-deficient labels (first in shuffled order on ties)
/// until every domain label has `k_shot` occurrences; sentences whose removal
/// keeps every count at `k_shot` are then dropped in insertion order. The
/// query takes the next `query_size` remaining sentences whose labels all lie
/// in the label set.
pub fn sample_episode(corpus: &Corpus, domain: &str, k_shot: usize, query_size: usize, seed: u64) -> Result<Episode> {
    if k_shot == 0 {
        return Err(Error::Invalid("k_shot must be at least 1".into()));
    }
    let block = corpus.domain(domain)?;
    let sentences = &block.sentences;
    let required: Vec<BioTag> = block.label_set().into_iter().filter(|l| !l.is_outside()).collect();
    if required.is_empty() {
        return Err(Error::Invalid(format!("domain {domain} has no slot labels")));
    }

    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let per_sentence: Vec<BTreeMap<BioTag, usize>> =
        sentences.iter().map(|s| label_counts(std::iter::once(s))).collect();

    let mut counts: BTreeMap<&BioTag, usize> = required.iter().map(|l| (l, 0)).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut used = vec![false; sentences.len()];
    loop {
        let deficient: Vec<&BioTag> = counts.iter().filter(|(_, &n)| n < k_shot).map(|(l, _)| *l).collect();
        if deficient.is_empty() {
            break;
        }
        let mut best: Option<(usize, usize)> = None;
        for &idx in order.iter().filter(|&&i| !used[i]) {
            let cover = deficient.iter().filter(|l| per_sentence[idx].contains_key(**l)).count();
            if cover > best.map_or(0, |(_, c)| c) {
                best = Some((idx, cover));
            }
        }
        let Some((idx, _)) = best else {
            return Err(Error::Sampling {
                domain: domain.to_string(),
                deficient: deficient.iter().map(|l| l.to_string()).collect(),
            });
        };
        used[idx] = true;
        chosen.push(idx);
        for (label, n) in &per_sentence[idx] {
            if let Some(c) = counts.get_mut(label) {
                *c += n;
            }
        }
    }

    let mut support_indices = Vec::new();
    for idx in chosen {
        let removable = per_sentence[idx].iter().all(|(label, n)| counts[label] - n >= k_shot);
        if removable {
            for (label, n) in &per_sentence[idx] {
                *counts.get_mut(label).expect("domain label") -= n;
            }
            used[idx] = false;
        } else {
            support_indices.push(idx);
        }
    }

    let label_set: Vec<BioTag> = std::iter::once(BioTag::outside()).chain(required.iter().cloned()).collect();
    let in_support: BTreeSet<usize> = support_indices.iter().copied().collect();
    let query_indices: Vec<usize> = order
        .iter()
        .copied()
        .filter(|i| !in_support.contains(i))
        .filter(|&i| sentences[i].tags.iter().all(|t| label_set.contains(t)))
        .take(query_size)
        .collect();
    if query_size > 0 && query_indices.is_empty() {
        return Err(Error::Sampling {
            domain: domain.to_string(),
            deficient: vec!["<query>".into()],
        });
    }

    Ok(Episode {
        id: seed,
        domain: domain.to_string(),
        support: support_indices.iter().map(|&i| sentences[i].clone()).collect(),
        query: query_indices.iter().map(|&i| sentences[i].clone()).collect(),
        label_set,
        support_indices,
        query_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DomainBlock;

    fn corpus(rows: &[&[(&str, &str)]]) -> Corpus {
        let sentences = rows.iter().map(|r| Sentence::from_pairs(r, "d").unwrap()).collect();
        Corpus::from_domains(vec![DomainBlock {
            name: "d".into(),
            sentences,
        }])
        .unwrap()
    }

    /// Smallest subset size whose label counts all reach `k`, by enumeration.
    fn brute_force_min_cover(c: &Corpus, k: usize) -> usize {
        let block = c.domain("d").unwrap();
        let labels: Vec<BioTag> = block.label_set().into_iter().filter(|l| !l.is_outside()).collect();
        let n = block.sentences.len();
        (1u32..(1 << n))
            .filter(|mask| {
                labels.iter().all(|l| {
                    (0..n)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| block.sentences[i].tags.iter().filter(|t| *t == l).count())
                        .sum::<usize>()
                        >= k
                })
            })
            .map(|mask| mask.count_ones() as usize)
            .min()
            .unwrap()
    }

    #[test]
    fn single_sentence_cover() {
        let c = corpus(&[
            &[("a", "B-x"), ("q", "O")],
            &[("b", "B-y")],
            &[("a", "B-x"), ("b", "B-y"), ("c", "B-z"), ("c2", "I-z")],
            &[("c", "B-z"), ("c2", "I-z"), ("z", "O")],
            &[("zz", "O"), ("b", "B-y")],
        ]);
        assert_eq!(brute_force_min_cover(&c, 1), 1);
        for seed in 0..20 {
            let e = sample_episode(&c, "d", 1, 2, seed).unwrap();
            assert_eq!(e.support_indices, vec![2], "seed {seed}");
            e.check(1).unwrap();
            assert_eq!(e.query.len(), 2);
        }
    }

    #[test]
    fn one_slot_per_sentence_gives_n_sentences() {
        let c = corpus(&[
            &[("a", "B-x"), ("o", "O")],
            &[("b", "B-y"), ("o", "O")],
            &[("c", "B-z"), ("o", "O")],
            &[("a", "B-x")],
            &[("b", "B-y")],
            &[("c", "B-z")],
        ]);
        for seed in 0..10 {
            let e = sample_episode(&c, "d", 1, 3, seed).unwrap();
            assert_eq!(e.support.len(), 3);
            e.check(1).unwrap();
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = crate::corpus::generate_synthetic(&crate::corpus::SyntheticSpec::desk_default()).unwrap();
        let a = sample_episode(&c, "weather", 5, 10, 42).unwrap();
        let b = sample_episode(&c, "weather", 5, 10, 42).unwrap();
        assert_eq!(a, b);
        a.check(5).unwrap();
    }

    #[test]
    fn insufficient_data_lists_deficient_labels() {
        let c = corpus(&[&[("a", "B-x")], &[("b", "B-y")], &[("b", "B-y")]]);
        match sample_episode(&c, "d", 2, 1, 0) {
            Err(Error::Sampling { deficient, .. }) => assert_eq!(deficient, ["B-x"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
