//! BIO-tagged sentences grouped by domain, CoNLL IO, synthetic corpora and
//! N-way K-shot episode sampling.

mod conll;
mod episode;
mod synthetic;
mod tags;

use std::collections::{BTreeSet, HashMap};

pub use conll::{parse_conll, read_conll, to_conll_string, write_conll};
pub use episode::{sample_episode, Episode};
pub use synthetic::{generate_synthetic, DomainRole, DomainSpec, SlotSpec, SyntheticSpec, Template, TemplatePart};
pub use tags::{first_invalid_bio, BioTag, TagKind, TagParseError};

use crate::error::{Error, Result};

pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<BioTag>,
    pub domain: String,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, tags: Vec<BioTag>, domain: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != tags.len() {
            return Err(Error::Invalid(format!(
                "sentence needs equal, non-zero token and tag counts (got {} and {})",
                tokens.len(),
                tags.len()
            )));
        }
        if let Some(i) = first_invalid_bio(&tags) {
            return Err(Error::Invalid(format!("dangling {} at token {i}", tags[i])));
        }
        Ok(Sentence {
            tokens,
            tags,
            domain: domain.into(),
        })
    }

    /// Convenience constructor from `token/TAG` pairs.
    pub fn from_pairs(pairs: &[(&str, &str)], domain: &str) -> Result<Self> {
        let tokens = pairs.iter().map(|(t, _)| t.to_string()).collect();
        let tags = pairs
            .iter()
            .map(|(_, tag)| tag.parse::<BioTag>().map_err(|e| Error::Invalid(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Sentence::new(tokens, tags, domain)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn labels(&self) -> BTreeSet<BioTag> {
        self.tags.iter().cloned().collect()
    }
}

/// Token vocabulary. Id 0 is the unknown token and id 1 is boundary padding;
/// real tokens follow in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let tokens = vec![UNK_TOKEN.to_string(), PAD_TOKEN.to_string()];
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut v = Vocab::new();
        for s in sentences {
            for t in &s.tokens {
                v.insert(t);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Unknown tokens map to [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBlock {
    pub name: String,
    pub sentences: Vec<Sentence>,
}

impl DomainBlock {
    /// Every label occurring in the domain, `O` included, in label-set order.
    pub fn label_set(&self) -> Vec<BioTag> {
        let mut set: BTreeSet<BioTag> = self.sentences.iter().flat_map(|s| s.tags.iter().cloned()).collect();
        set.insert(BioTag::outside());
        set.into_iter().collect()
    }

    pub fn slot_names(&self) -> BTreeSet<String> {
        self.sentences
            .iter()
            .flat_map(|s| s.tags.iter())
            .filter(|t| !t.is_outside())
            .map(|t| t.slot().to_string())
            .collect()
    }
}

/// Immutable collection of domains with a vocabulary built over all of them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    domains: Vec<DomainBlock>,
    vocab: Vocab,
}

impl Corpus {
    /// Domains keep the given order; sentences must carry the matching domain name.
    pub fn from_domains(domains: Vec<DomainBlock>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for d in &domains {
            if !seen.insert(d.name.clone()) {
                return Err(Error::Invalid(format!("duplicate domain {}", d.name)));
            }
            if let Some(s) = d.sentences.iter().find(|s| s.domain != d.name) {
                return Err(Error::Invalid(format!(
                    "sentence of domain {} filed under {}",
                    s.domain, d.name
                )));
            }
        }
        let vocab = Vocab::from_sentences(domains.iter().flat_map(|d| d.sentences.iter()));
        Ok(Corpus { domains, vocab })
    }

    pub fn empty() -> Self {
        Corpus::default()
    }

    pub fn domains(&self) -> &[DomainBlock] {
        &self.domains
    }

    pub fn domain_names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn domain(&self, name: &str) -> Result<&DomainBlock> {
        self.domains.iter().find(|d| d.name == name).ok_or_else(|| Error::Lookup {
            kind: "domain",
            name: name.to_string(),
        })
    }

    pub fn label_set(&self, domain: &str) -> Result<Vec<BioTag>> {
        self.domain(domain).map(DomainBlock::label_set)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn num_sentences(&self) -> usize {
        self.domains.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserves_unknown_and_padding() {
        let s = Sentence::from_pairs(&[("play", "O"), ("jazz", "B-genre"), ("play", "O")], "music").unwrap();
        let v = Vocab::from_sentences([&s]);
        assert_eq!(v.token(0), Some(UNK_TOKEN));
        assert_eq!(v.token(1), Some(PAD_TOKEN));
        assert_eq!(v.id("play"), 2);
        assert_eq!(v.id("jazz"), 3);
        assert_eq!(v.id("never-seen"), UNK_ID);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn sentence_rejects_dangling_inside() {
        assert!(Sentence::from_pairs(&[("x", "I-a")], "d").is_err());
        assert!(Sentence::from_pairs(&[], "d").is_err());
    }

    #[test]
    fn label_set_includes_outside_first() {
        let s = Sentence::from_pairs(&[("new", "B-city"), ("york", "I-city"), ("now", "B-date")], "w").unwrap();
        let c = Corpus::from_domains(vec![DomainBlock {
            name: "w".into(),
            sentences: vec![s],
        }])
        .unwrap();
        let labels: Vec<String> = c.label_set("w").unwrap().iter().map(|t| t.to_string()).collect();
        assert_eq!(labels, ["O", "B-city", "I-city", "B-date"]);
    }
}
