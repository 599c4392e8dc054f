use std::fs;
use std::path::Path;

use super::{BioTag, Corpus, DomainBlock, Sentence};
use crate::error::{Error, Result};

const DOMAIN_PREFIX: &str = "# domain=";
pub const DEFAULT_DOMAIN: &str = "default";

pub fn read_conll(path: impl AsRef<Path>) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    parse_conll(&text)
}

pub fn write_conll(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_conll_string(corpus))?;
    Ok(())
}

/// Two-column `token<TAB>tag` lines, a blank line after each sentence and a
/// `# domain=<name>` line opening each domain block. Sentences before any
/// domain line belong to the `default` domain.
pub fn parse_conll(text: &str) -> Result<Corpus> {
    let mut domains: Vec<DomainBlock> = Vec::new();
    let mut current: Option<usize> = None;
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<BioTag> = Vec::new();

    fn domain_index(domains: &mut Vec<DomainBlock>, name: &str) -> usize {
        if let Some(i) = domains.iter().position(|d| d.name == name) {
            return i;
        }
        domains.push(DomainBlock {
            name: name.to_string(),
            sentences: Vec::new(),
        });
        domains.len() - 1
    }

    let flush = |domains: &mut Vec<DomainBlock>,
                 current: &mut Option<usize>,
                 tokens: &mut Vec<String>,
                 tags: &mut Vec<BioTag>|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let idx = *current.get_or_insert_with(|| domain_index(domains, DEFAULT_DOMAIN));
        let name = domains[idx].name.clone();
        let s = Sentence::new(std::mem::take(tokens), std::mem::take(tags), name)?;
        domains[idx].sentences.push(s);
        Ok(())
    };

    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if let Some(name) = line.strip_prefix(DOMAIN_PREFIX) {
            flush(&mut domains, &mut current, &mut tokens, &mut tags)?;
            let name = name.trim();
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("bad domain name `{name}`"),
                });
            }
            current = Some(domain_index(&mut domains, name));
            continue;
        }
        if line.trim().is_empty() {
            flush(&mut domains, &mut current, &mut tokens, &mut tags)?;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 || cols[0].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected `token<TAB>tag`, found {} column(s)", cols.len()),
            });
        }
        let tag: BioTag = cols[1].parse().map_err(|e: super::TagParseError| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if tag.kind() == super::TagKind::I {
            let ok = tags.last().is_some_and(|p| !p.is_outside() && p.slot() == tag.slot());
            if !ok {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("dangling {tag} without a preceding B-/I-{}", tag.slot()),
                });
            }
        }
        tokens.push(cols[0].to_string());
        tags.push(tag);
    }
    flush(&mut domains, &mut current, &mut tokens, &mut tags)?;
    Corpus::from_domains(domains)
}

pub fn to_conll_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    for d in corpus.domains() {
        out.push_str(DOMAIN_PREFIX);
        out.push_str(&d.name);
        out.push('\n');
        for s in &d.sentences {
            for (tok, tag) in s.tokens.iter().zip(&s.tags) {
                out.push_str(tok);
                out.push('\t');
                out.push_str(&tag.to_string());
                out.push('\n');
            }
            out.push('\n');
        }
    }
    out
}
