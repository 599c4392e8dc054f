use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};

use super::config::{Dataset, Mode, RunConfig};
use super::metrics::MetricsRecord;
use super::pipeline::{choose_alpha, evaluate_cell, test_episodes, train, validation_episodes, Trained};

/// All cells of an ablation run plus the axes they were produced over.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub shots: Vec<usize>,
    pub modes: Vec<Mode>,
    pub domains: Vec<String>,
    pub seeds: Vec<u64>,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        MeanStd { mean, std: var.sqrt(), n }
    }
}

impl AblationTable {
    fn cell(&self, seed: u64, domain: &str, shot: usize, mode: Mode) -> Option<&MetricsRecord> {
        let m = mode.to_string();
        self.records
            .iter()
            .find(|r| r.seed == seed && r.domain == domain && r.shot == shot && r.mode == m && r.error.is_none())
    }

    /// F1 across seeds for one domain.
    pub fn domain_f1(&self, domain: &str, shot: usize, mode: Mode) -> MeanStd {
        let xs: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|&s| self.cell(s, domain, shot, mode).map(|r| r.f1))
            .collect();
        MeanStd::of(&xs)
    }

    /// Per-seed average over domains, then mean and spread across seeds.
    /// Seeds with a failed cell are left out.
    pub fn average_f1(&self, shot: usize, mode: Mode) -> MeanStd {
        let xs: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|&s| {
                let cells: Option<Vec<f64>> =
                    self.domains.iter().map(|d| self.cell(s, d, shot, mode).map(|r| r.f1)).collect();
                cells.map(|c| c.iter().sum::<f64>() / c.len() as f64)
            })
            .collect();
        MeanStd::of(&xs)
    }

    pub fn errors(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.error.is_some())
    }

    /// Rows are target domains plus their average, columns the modes; F1 in
    /// percent as `mean±std` over seeds.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for &shot in &self.shots {
            let _ = writeln!(out, "{shot}-shot, {} seeds", self.seeds.len());
            let _ = write!(out, "{:<16}", "domain");
            for m in &self.modes {
                let _ = write!(out, "{:>16}", m.to_string());
            }
            out.push('\n');
            let rows = self.domains.iter().map(|d| (d.as_str(), Some(d.as_str()))).chain([("avg", None)]);
            for (name, domain) in rows {
                let _ = write!(out, "{name:<16}");
                for &m in &self.modes {
                    let s = match domain {
                        Some(d) => self.domain_f1(d, shot, m),
                        None => self.average_f1(shot, m),
                    };
                    let _ = write!(out, "{:>16}", format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

fn cell_record(
    seed: u64,
    domain: &str,
    shot: usize,
    mode: Mode,
    outcome: Result<super::pipeline::CellResult>,
    started: Instant,
) -> MetricsRecord {
    let mut rec = MetricsRecord {
        seed,
        domain: domain.to_string(),
        shot,
        mode: mode.to_string(),
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        episodes: 0,
        episode_losses: Vec::new(),
        episode_f1: Vec::new(),
        alpha: None,
        adapted_episodes: 0,
        wall_clock_secs: 0.0,
        error: None,
    };
    match outcome {
        Ok(cell) => {
            let s = cell.counts.scores();
            rec.precision = s.precision;
            rec.recall = s.recall;
            rec.f1 = s.f1;
            rec.episodes = cell.episodes.len();
            rec.episode_losses = cell.episodes.iter().map(|e| e.loss).collect();
            rec.episode_f1 = cell.episodes.iter().map(|e| e.f1).collect();
            rec.alpha = cell.alpha;
            rec.adapted_episodes = cell.episodes.iter().filter(|e| e.adapted).count();
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec.wall_clock_secs = started.elapsed().as_secs_f64();
    rec
}

/// Metrics of every requested mode for one seed and shot. Baseline and A share
/// a run trained without the memory loss; M and A+M share one trained with it.
pub fn evaluate_seed(cfg: &RunConfig, data: &Dataset, seed: u64, shot: usize, modes: &[Mode]) -> Vec<MetricsRecord> {
    let plain: Option<Result<Trained>> = modes
        .iter()
        .any(|m| !m.use_memory())
        .then(|| train(cfg, data, seed, Mode::A, shot));
    let with_memory: Option<Result<Trained>> = modes
        .iter()
        .any(|m| m.use_memory())
        .then(|| train(cfg, data, seed, Mode::AM, shot));
    let validation = validation_episodes(cfg, data, seed, shot);

    let mut records = Vec::new();
    for &mode in modes {
        let trained = if mode.use_memory() { &with_memory } else { &plain };
        let trained = trained.as_ref().expect("trained for this mode");
        let alpha = match (trained, &validation) {
            (Ok(t), Ok(v)) if mode.use_adaption() => Some(choose_alpha(&t.model, &t.memory, v, cfg)),
            (_, Err(e)) if mode.use_adaption() => Some(Err(Error::Invalid(format!("validation sampling: {e}")))),
            _ => None,
        };
        for domain in &data.target {
            let started = Instant::now();
            let outcome = match (trained, &alpha) {
                (Err(e), _) => Err(Error::Invalid(format!("training failed: {e}"))),
                (_, Some(Err(e))) => Err(Error::Invalid(format!("alpha selection failed: {e}"))),
                (Ok(t), alpha) => {
                    let alpha = alpha.as_ref().map(|a| *a.as_ref().expect("checked above"));
                    test_episodes(cfg, data, seed, shot, domain)
                        .and_then(|eps| evaluate_cell(&t.model, &t.memory, &eps, cfg, mode, alpha))
                }
            };
            records.push(cell_record(seed, domain, shot, mode, outcome, started));
        }
    }
    records
}

/// Runs every mode for every seed, shot and target domain. Seeds run in
/// parallel; results are ordered by (shot, seed, mode, domain). Failed cells
/// carry an `error` and are excluded from the aggregates.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset) -> Result<AblationTable> {
    if cfg.seeds.len() < 2 {
        return Err(Error::Config("an ablation needs at least two seeds".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut records = Vec::new();
    for &shot in &cfg.shots {
        let mut per_seed: Vec<Vec<MetricsRecord>> = vec![Vec::new(); cfg.seeds.len()];
        for chunk in cfg.seeds.iter().enumerate().collect::<Vec<_>>().chunks(workers) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&(i, &seed)| (i, scope.spawn(move || evaluate_seed(cfg, data, seed, shot, &cfg.modes))))
                    .collect();
                for (i, h) in handles {
                    per_seed[i] = h.join().expect("ablation worker panicked");
                }
            });
        }
        records.extend(per_seed.into_iter().flatten());
    }
    Ok(AblationTable {
        shots: cfg.shots.clone(),
        modes: cfg.modes.clone(),
        domains: data.target.clone(),
        seeds: cfg.seeds.clone(),
        records,
    })
}
