use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One evaluated (seed, domain, shot, mode) cell. Field names are stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub domain: String,
    pub shot: usize,
    pub mode: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub episodes: usize,
    pub episode_losses: Vec<f64>,
    pub episode_f1: Vec<f64>,
    /// Blend coefficient used by adaption modes.
    pub alpha: Option<f64>,
    pub adapted_episodes: usize,
    pub wall_clock_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricsRecord {
    /// Equality on everything except wall-clock time.
    pub fn same_metrics(&self, other: &MetricsRecord) -> bool {
        let strip = |r: &MetricsRecord| MetricsRecord {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// One meta-training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub mode: String,
    pub shot: usize,
    pub episode: usize,
    pub episode_id: u64,
    pub domain: String,
    pub ner_loss: f64,
    pub memory_loss: Option<f64>,
    pub memory_terms: usize,
}

/// Per-loss summary of the gradient suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub loss: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn to_json_lines<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| crate::Error::Invalid(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(to_json_lines(records)?.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| crate::Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
