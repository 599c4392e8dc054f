use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TagKind {
    O,
    B,
    I,
}

/// A per-token BIO label. `B-x` and `I-x` are distinct labels that share the slot `x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BioTag {
    kind: TagKind,
    slot: String,
}

impl BioTag {
    pub fn outside() -> Self {
        BioTag {
            kind: TagKind::O,
            slot: String::new(),
        }
    }

    pub fn begin(slot: impl Into<String>) -> Self {
        BioTag {
            kind: TagKind::B,
            slot: slot.into(),
        }
    }

    pub fn inside(slot: impl Into<String>) -> Self {
        BioTag {
            kind: TagKind::I,
            slot: slot.into(),
        }
    }

    pub fn kind(&self) -> TagKind {
        self.kind
    }

    pub fn slot(&self) -> &str {
        &self.slot
    }

    pub fn is_outside(&self) -> bool {
        self.kind == TagKind::O
    }
}

/// Label-set order: `O` first, then by slot name with `B` before `I`.
impl Ord for BioTag {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.kind, other.kind) {
            (TagKind::O, TagKind::O) => Ordering::Equal,
            (TagKind::O, _) => Ordering::Less,
            (_, TagKind::O) => Ordering::Greater,
            _ => self.slot.cmp(&other.slot).then(self.kind.cmp(&other.kind)),
        }
    }
}

impl PartialOrd for BioTag {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TagKind::O => f.write_str("O"),
            TagKind::B => write!(f, "B-{}", self.slot),
            TagKind::I => write!(f, "I-{}", self.slot),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagParseError(pub String);

impl fmt::Display for TagParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed tag `{}`", self.0)
    }
}

impl std::error::Error for TagParseError {}

impl FromStr for BioTag {
    type Err = TagParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(BioTag::outside());
        }
        let bad = || TagParseError(s.to_string());
        let (prefix, slot) = s.split_once('-').ok_or_else(bad)?;
        if slot.is_empty() || slot.chars().any(char::is_whitespace) {
            return Err(bad());
        }
        match prefix {
            "B" => Ok(BioTag::begin(slot)),
            "I" => Ok(BioTag::inside(slot)),
            _ => Err(bad()),
        }
    }
}

/// Index of the first tag that breaks BIO validity (an `I-x` not preceded by
/// `B-x` or `I-x`), if any.
pub fn first_invalid_bio(tags: &[BioTag]) -> Option<usize> {
    let mut prev: Option<&BioTag> = None;
    for (i, tag) in tags.iter().enumerate() {
        if tag.kind == TagKind::I {
            let ok = prev.is_some_and(|p| p.kind != TagKind::O && p.slot == tag.slot);
            if !ok {
                return Some(i);
            }
        }
        prev = Some(tag);
    }
    None
}
