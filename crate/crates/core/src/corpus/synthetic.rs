use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BioTag, Corpus, DomainBlock, Sentence};
use crate::error::{Error, Result};
use crate::kvconfig::{KvFile, Section};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainRole {
    Source,
    Validation,
    Target,
}

impl std::str::FromStr for DomainRole {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(DomainRole::Source),
            "validation" => Ok(DomainRole::Validation),
            "target" => Ok(DomainRole::Target),
            other => Err(format!("unknown role `{other}` (source|validation|target)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub name: String,
    pub fillers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplatePart {
    Word(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub parts: Vec<TemplatePart>,
}

impl Template {
    /// Whitespace-separated words; a word written `{name}` is a slot reference.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<TemplatePart> = text
            .split_whitespace()
            .map(|w| match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
                Some(slot) if !slot.is_empty() => TemplatePart::Slot(slot.to_string()),
                _ => TemplatePart::Word(w.to_string()),
            })
            .collect();
        if parts.is_empty() {
            return Err(Error::Spec("empty template".into()));
        }
        Ok(Template { parts })
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            TemplatePart::Slot(s) => Some(s.as_str()),
            TemplatePart::Word(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub name: String,
    pub role: DomainRole,
    pub slots: Vec<SlotSpec>,
    pub templates: Vec<Template>,
}

/// Template-based corpus description. `overlap` is the fraction of each
/// held-out (validation or target) domain's slots renamed to source-domain slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub domains: Vec<DomainSpec>,
    pub overlap: f64,
    pub sentences_per_domain: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Spec(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if !names.insert(&d.name) {
                return Err(Error::Spec(format!("duplicate domain {}", d.name)));
            }
            if d.templates.is_empty() {
                return Err(Error::Spec(format!("domain {} has no templates", d.name)));
            }
            for s in &d.slots {
                if s.fillers.is_empty() || s.fillers.iter().any(|f| f.split_whitespace().next().is_none()) {
                    return Err(Error::Spec(format!("slot {} of {} needs non-empty fillers", s.name, d.name)));
                }
            }
            for t in &d.templates {
                for slot in t.slots() {
                    if !d.slots.iter().any(|s| s.name == slot) {
                        return Err(Error::Spec(format!(
                            "template in domain {} references undeclared slot {slot}",
                            d.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn domains_with_role(&self, role: DomainRole) -> Vec<String> {
        self.domains
            .iter()
            .filter(|d| d.role == role)
            .map(|d| d.name.clone())
            .collect()
    }

    /// Parses the `[synthetic]` section and every `[domain <name>]` section.
    pub fn from_kv(file: &KvFile) -> Result<Self> {
        let head = file.section("synthetic");
        head.expect_keys(&["seed", "overlap", "sentences_per_domain"])?;
        let mut domains = Vec::new();
        for (name, section) in file.sections_with_prefix("domain") {
            domains.push(parse_domain(name, section)?);
        }
        let spec = SyntheticSpec {
            domains,
            overlap: head.parse_or("overlap", 0.5)?,
            sentences_per_domain: head.parse_or("sentences_per_domain", 200)?,
            seed: head.parse_or("seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    /// Four-domain desk-scale corpus: two source domains, one validation and
    /// one target domain, 50% held-out slot overlap, 200 sentences each.
    pub fn desk_default() -> Self {
        Self::parse(DESK_DEFAULT).expect("built-in spec is valid")
    }
}

fn parse_domain(name: &str, section: &Section) -> Result<DomainSpec> {
    section.expect_keys(&["role", "slots", "template", "filler."])?;
    let role: DomainRole = section
        .parse("role")?
        .ok_or_else(|| Error::Spec(format!("domain {name} has no role")))?;
    let slot_names: Vec<String> = section.list("slots")?.unwrap_or_default();
    let mut slots = Vec::new();
    for slot in slot_names {
        let fillers: Vec<String> = section
            .get(&format!("filler.{slot}"))
            .map(|v| v.split('|').map(|f| f.trim().to_string()).filter(|f| !f.is_empty()).collect())
            .unwrap_or_default();
        slots.push(SlotSpec { name: slot, fillers });
    }
    for e in &section.entries {
        if let Some(slot) = e.key.strip_prefix("filler.") {
            if !slots.iter().any(|s| s.name == slot) {
                return Err(Error::Spec(format!("fillers given for undeclared slot {slot} in {name}")));
            }
        }
    }
    let templates = section.all("template").map(Template::parse).collect::<Result<Vec<_>>>()?;
    Ok(DomainSpec {
        name: name.to_string(),
        role,
        slots,
        templates,
    })
}

/// Number of held-out slots that take a source slot name: `ceil(overlap * n)`,
/// with a tolerance for products that land a rounding error above an integer.
pub fn shared_slot_count(overlap: f64, n: usize) -> usize {
    let x = overlap * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

struct ResolvedSlot {
    declared: String,
    name: String,
    fillers: Vec<Vec<String>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // source inventory: slot name -> union of fillers, first-occurrence order
    let mut inventory: Vec<(String, Vec<String>)> = Vec::new();
    for d in spec.domains.iter().filter(|d| d.role == DomainRole::Source) {
        for s in &d.slots {
            match inventory.iter_mut().find(|(n, _)| *n == s.name) {
                Some((_, fillers)) => {
                    for f in &s.fillers {
                        if !fillers.contains(f) {
                            fillers.push(f.clone());
                        }
                    }
                }
                None => inventory.push((s.name.clone(), s.fillers.clone())),
            }
        }
    }
    let source_names: BTreeSet<&str> = inventory.iter().map(|(n, _)| n.as_str()).collect();
    let split = |fillers: &[String]| -> Vec<Vec<String>> {
        fillers
            .iter()
            .map(|f| f.split_whitespace().map(str::to_string).collect())
            .collect()
    };

    let mut blocks = Vec::new();
    for d in &spec.domains {
        let mut resolved: Vec<ResolvedSlot> = d
            .slots
            .iter()
            .map(|s| ResolvedSlot {
                declared: s.name.clone(),
                name: s.name.clone(),
                fillers: split(&s.fillers),
            })
            .collect();
        if d.role != DomainRole::Source {
            let shared = shared_slot_count(spec.overlap, resolved.len());
            if shared > inventory.len() {
                return Err(Error::Spec(format!(
                    "domain {} needs {shared} shared slots but sources declare only {}",
                    d.name,
                    inventory.len()
                )));
            }
            let mut which: Vec<usize> = (0..resolved.len()).collect();
            which.shuffle(&mut rng);
            let donors: Vec<&(String, Vec<String>)> = inventory.choose_multiple(&mut rng, shared).collect();
            let renamed: BTreeSet<usize> = which[..shared].iter().copied().collect();
            for (&idx, (name, fillers)) in which[..shared].iter().zip(donors) {
                resolved[idx].name = name.clone();
                resolved[idx].fillers = split(fillers);
            }
            // fresh slots must stay clear of every source name
            let mut taken: BTreeSet<String> = resolved.iter().map(|r| r.name.clone()).collect();
            for (idx, r) in resolved.iter_mut().enumerate() {
                if renamed.contains(&idx) || !source_names.contains(r.name.as_str()) {
                    continue;
                }
                let mut fresh = format!("{}_{}", r.declared, d.name);
                while source_names.contains(fresh.as_str()) || taken.contains(&fresh) {
                    fresh.push('_');
                }
                taken.insert(fresh.clone());
                r.name = fresh;
            }
        }

        let mut sentences = Vec::with_capacity(spec.sentences_per_domain);
        for _ in 0..spec.sentences_per_domain {
            let template = &d.templates[rng.gen_range(0..d.templates.len())];
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            for part in &template.parts {
                match part {
                    TemplatePart::Word(w) => {
                        tokens.push(w.clone());
                        tags.push(BioTag::outside());
                    }
                    TemplatePart::Slot(declared) => {
                        let slot = resolved
                            .iter()
                            .find(|r| &r.declared == declared)
                            .expect("validated template");
                        let filler = &slot.fillers[rng.gen_range(0..slot.fillers.len())];
                        for (i, w) in filler.iter().enumerate() {
                            tokens.push(w.clone());
                            tags.push(if i == 0 {
                                BioTag::begin(slot.name.clone())
                            } else {
                                BioTag::inside(slot.name.clone())
                            });
                        }
                    }
                }
            }
            sentences.push(Sentence::new(tokens, tags, d.name.clone())?);
        }
        blocks.push(DomainBlock {
            name: d.name.clone(),
            sentences,
        });
    }
    Corpus::from_domains(blocks)
}

const DESK_DEFAULT: &str = include_str!("desk_default.cfg");
