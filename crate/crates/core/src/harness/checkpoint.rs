use std::path::Path;

use crate::diffmath::ParamStore;
use crate::error::Result;
use crate::memory::MemoryStore;

/// Parameter section followed by the memory section.
pub fn checkpoint_text(params: &ParamStore, memory: &MemoryStore) -> String {
    let mut out = params.to_text();
    out.push_str(&memory.to_text());
    out
}

pub fn parse_checkpoint(text: &str) -> Result<(ParamStore, MemoryStore)> {
    let lines: Vec<&str> = text.lines().collect();
    let (params, used) = ParamStore::from_lines(&lines)?;
    let memory = MemoryStore::from_lines(&lines[used..], used)?;
    Ok((params, memory))
}

pub fn write_checkpoint(path: &Path, params: &ParamStore, memory: &MemoryStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint_text(params, memory))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, MemoryStore)> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}

/// FNV-1a over the checkpoint text; cheap fingerprint for "did anything change".
pub fn checkpoint_hash(params: &ParamStore, memory: &MemoryStore) -> u64 {
    checkpoint_text(params, memory)
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BioTag;
    use crate::memory::ContrastiveConfig;
    use crate::protonet::PrototypeSet;

    #[test]
    fn round_trip_with_memory() {
        let mut p = ParamStore::new();
        p.add_vector("v", vec![0.1, -1.0 / 3.0], true).unwrap();
        p.add_matrix("m", 2, 2, vec![1e-300, 2.5, -7.0, f64::MIN_POSITIVE], false).unwrap();
        let mut m = MemoryStore::new();
        m.insert(
            &PrototypeSet {
                episode_id: 9,
                labels: vec![BioTag::outside(), BioTag::begin("x")],
                prototypes: vec![vec![0.0, 1.0], vec![std::f64::consts::PI, -0.1]],
                counts: vec![1, 1],
            },
            &ContrastiveConfig::default(),
        )
        .unwrap();
        let text = checkpoint_text(&p, &m);
        let (p2, m2) = parse_checkpoint(&text).unwrap();
        assert_eq!(p2, p);
        assert_eq!(m2, m);
        assert_eq!(checkpoint_text(&p2, &m2), text);
        assert_eq!(checkpoint_hash(&p2, &m2), checkpoint_hash(&p, &m));
    }

    #[test]
    fn empty_memory_round_trips() {
        let mut p = ParamStore::new();
        p.add_vector("v", vec![1.0], true).unwrap();
        let m = MemoryStore::new();
        let (p2, m2) = parse_checkpoint(&checkpoint_text(&p, &m)).unwrap();
        assert_eq!((p2, m2), (p, m));
    }

    #[test]
    fn missing_memory_section_is_an_error() {
        let mut p = ParamStore::new();
        p.add_vector("v", vec![1.0], true).unwrap();
        assert!(parse_checkpoint(&p.to_text()).is_err());
    }
}
