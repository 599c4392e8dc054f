use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adaption::{AdaptionKind, DEFAULT_ALPHA_GRID, DEFAULT_ITERATIONS, DEFAULT_LR};
use crate::corpus::{generate_synthetic, read_conll, Corpus, DomainRole, SyntheticSpec};
use crate::diffmath::AdamConfig;
use crate::error::{Error, Result};
use crate::kvconfig::KvFile;
use crate::memory::{ContrastiveConfig, SignMode};
use crate::protonet::SimilarityMetric;

/// Ablation cell: which of the two memory mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Mode {
    Baseline,
    A,
    M,
    #[default]
    AM,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::A, Mode::M, Mode::AM];

    pub fn from_flags(use_memory: bool, use_adaption: bool) -> Self {
        match (use_memory, use_adaption) {
            (false, false) => Mode::Baseline,
            (false, true) => Mode::A,
            (true, false) => Mode::M,
            (true, true) => Mode::AM,
        }
    }

    /// Learn-from-memory loss during training.
    pub fn use_memory(self) -> bool {
        matches!(self, Mode::M | Mode::AM)
    }

    /// Adaption from memory at test time.
    pub fn use_adaption(self) -> bool {
        matches!(self, Mode::A | Mode::AM)
    }

    /// Whether training has to record prototypes in the store at all.
    pub fn needs_store(self) -> bool {
        self != Mode::Baseline
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "A" | "a" => Ok(Mode::A),
            "M" | "m" => Ok(Mode::M),
            "AM" | "am" | "A+M" => Ok(Mode::AM),
            other => Err(format!("unknown mode `{other}` (baseline|A|M|AM)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::A => "A",
            Mode::M => "M",
            Mode::AM => "AM",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generate from a spec (the built-in desk corpus when `None`).
    Synthetic(Option<PathBuf>),
    Conll {
        path: PathBuf,
        train: Vec<String>,
        validation: Vec<String>,
        target: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub k_shot: usize,
    pub query_size: usize,
    pub train_episodes: usize,
    pub validation_episodes: usize,
    /// Test episodes per target domain.
    pub test_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptionSettings {
    pub kind: AdaptionKind,
    pub iterations: usize,
    pub lr: f64,
    pub alpha_grid: Vec<f64>,
    /// Fixed blend coefficient; selected on validation episodes when `None`.
    pub alpha: Option<f64>,
    pub blend_seen: bool,
}

impl Default for AdaptionSettings {
    fn default() -> Self {
        AdaptionSettings {
            kind: AdaptionKind::Linear,
            iterations: DEFAULT_ITERATIONS,
            lr: DEFAULT_LR,
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            alpha: None,
            blend_seen: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub episode: EpisodeConfig,
    pub d_e: usize,
    pub d_h: usize,
    pub metric: SimilarityMetric,
    pub contrastive: ContrastiveConfig,
    pub lambda_memory: f64,
    pub adaption: AdaptionSettings,
    pub optim: AdamConfig,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    /// Validation F1 is measured every this many training episodes and the
    /// best snapshot kept (early stopping); 0 disables it.
    pub validate_every: usize,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub shots: Vec<usize>,
    pub modes: Vec<Mode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synthetic(None),
            episode: EpisodeConfig {
                k_shot: 1,
                query_size: 10,
                train_episodes: 100,
                validation_episodes: 10,
                test_episodes: 20,
            },
            d_e: 16,
            d_h: 16,
            metric: SimilarityMetric::DotProduct,
            contrastive: ContrastiveConfig::default(),
            lambda_memory: 1.0,
            adaption: AdaptionSettings::default(),
            optim: AdamConfig::default(),
            seeds: (1..=10).collect(),
            mode: Mode::AM,
            validate_every: 10,
            checkpoint_every: 0,
            checkpoint_dir: None,
            checkpoint: None,
            out: None,
            shots: vec![1],
            modes: Mode::ALL.to_vec(),
        }
    }
}

/// Every key accepted in a run config, by section.
pub const CONFIG_KEYS: &[(&str, &[&str])] = &[
    ("data", &["source", "spec", "path", "train", "validation", "target"]),
    (
        "episode",
        &["k_shot", "query_size", "train_episodes", "validation_episodes", "test_episodes"],
    ),
    ("encoder", &["d_e", "d_h"]),
    ("protonet", &["metric"]),
    ("memory", &["sign_mode", "include_o", "lambda"]),
    ("adaption", &["kind", "iterations", "lr", "alpha_grid", "alpha", "blend_seen"]),
    ("optim", &["lr", "beta1", "beta2", "eps", "weight_decay"]),
    (
        "run",
        &[
            "seeds",
            "mode",
            "validate_every",
            "checkpoint_every",
            "checkpoint_dir",
            "checkpoint",
            "out",
        ],
    ),
    ("ablation", &["shots", "modes"]),
];

impl RunConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // relative data paths resolve against the config file's directory
        let base = path.parent().unwrap_or(Path::new(""));
        match &mut cfg.data {
            DataSource::Synthetic(Some(p)) | DataSource::Conll { path: p, .. } if p.is_relative() => {
                *p = base.join(&*p);
            }
            _ => {}
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file = KvFile::parse(text)?;
        for section in &file.sections {
            if section.name.is_empty() && section.entries.is_empty() {
                continue;
            }
            // synthetic-spec sections may share the file
            if section.name == "synthetic" || section.name.starts_with("domain ") {
                continue;
            }
            let Some((_, keys)) = CONFIG_KEYS.iter().find(|(n, _)| *n == section.name) else {
                return Err(Error::Config(format!("unknown section [{}]", section.name)));
            };
            section.expect_keys(keys)?;
        }
        let d = RunConfig::default();

        let data = file.section("data");
        let source = data.get("source").unwrap_or("synthetic");
        let data = match source {
            "synthetic" => DataSource::Synthetic(data.get("spec").map(PathBuf::from)),
            "conll" => DataSource::Conll {
                path: data
                    .get("path")
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Config("[data] source = conll needs `path`".into()))?,
                train: data.list("train")?.unwrap_or_default(),
                validation: data.list("validation")?.unwrap_or_default(),
                target: data.list("target")?.unwrap_or_default(),
            },
            other => return Err(Error::Config(format!("unknown data source `{other}` (synthetic|conll)"))),
        };

        let ep = file.section("episode");
        let episode = EpisodeConfig {
            k_shot: ep.parse_or("k_shot", d.episode.k_shot)?,
            query_size: ep.parse_or("query_size", d.episode.query_size)?,
            train_episodes: ep.parse_or("train_episodes", d.episode.train_episodes)?,
            validation_episodes: ep.parse_or("validation_episodes", d.episode.validation_episodes)?,
            test_episodes: ep.parse_or("test_episodes", d.episode.test_episodes)?,
        };
        let enc = file.section("encoder");
        let mem = file.section("memory");
        let ada = file.section("adaption");
        let opt = file.section("optim");
        let run = file.section("run");
        let abl = file.section("ablation");

        let mut cfg = RunConfig {
            data,
            d_e: enc.parse_or("d_e", d.d_e)?,
            d_h: enc.parse_or("d_h", d.d_h)?,
            metric: file.section("protonet").parse_or("metric", d.metric)?,
            contrastive: ContrastiveConfig {
                sign_mode: mem.parse_or("sign_mode", SignMode::default())?,
                include_o: mem.parse_or("include_o", false)?,
            },
            lambda_memory: mem.parse_or("lambda", d.lambda_memory)?,
            adaption: AdaptionSettings {
                kind: ada.parse_or("kind", d.adaption.kind)?,
                iterations: ada.parse_or("iterations", d.adaption.iterations)?,
                lr: ada.parse_or("lr", d.adaption.lr)?,
                alpha_grid: ada.list("alpha_grid")?.unwrap_or(d.adaption.alpha_grid),
                alpha: ada.parse("alpha")?,
                blend_seen: ada.parse_or("blend_seen", true)?,
            },
            optim: AdamConfig {
                lr: opt.parse_or("lr", d.optim.lr)?,
                beta1: opt.parse_or("beta1", d.optim.beta1)?,
                beta2: opt.parse_or("beta2", d.optim.beta2)?,
                eps: opt.parse_or("eps", d.optim.eps)?,
                weight_decay: opt.parse_or("weight_decay", d.optim.weight_decay)?,
            },
            seeds: run.list("seeds")?.unwrap_or(d.seeds),
            mode: run.parse_or("mode", d.mode)?,
            validate_every: run.parse_or("validate_every", d.validate_every)?,
            checkpoint_every: run.parse_or("checkpoint_every", 0)?,
            checkpoint_dir: run.get("checkpoint_dir").map(PathBuf::from),
            checkpoint: run.get("checkpoint").map(PathBuf::from),
            out: run.get("out").map(PathBuf::from),
            episode,
            shots: Vec::new(),
            modes: abl.list("modes")?.unwrap_or(d.modes),
        };
        cfg.shots = abl.list("shots")?.unwrap_or_else(|| vec![cfg.episode.k_shot]);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.episode.k_shot == 0 || self.shots.contains(&0) {
            return bad("k_shot must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.episode.query_size == 0 {
            return bad("query_size must be at least 1".into());
        }
        if self.d_e == 0 || self.d_h == 0 {
            return bad("encoder dims must be positive".into());
        }
        if !(self.lambda_memory.is_finite() && self.lambda_memory >= 0.0) {
            return bad(format!("memory lambda {} must be finite and non-negative", self.lambda_memory));
        }
        if self.adaption.alpha_grid.is_empty() {
            return bad("alpha_grid must not be empty".into());
        }
        let alphas = self.adaption.alpha_grid.iter().chain(self.adaption.alpha.iter());
        if let Some(a) = alphas.into_iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha {a} outside [0, 1]"));
        }
        if self.optim.lr.is_nan() || self.optim.lr <= 0.0 || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("optimizer needs lr > 0 and betas in [0, 1)".into());
        }
        if self.modes.is_empty() {
            return bad("[ablation] modes must not be empty".into());
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}

/// Corpus plus its domain split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub target: Vec<String>,
}

impl Dataset {
    pub fn load(source: &DataSource) -> Result<Self> {
        let ds = match source {
            DataSource::Synthetic(spec) => {
                let spec = match spec {
                    Some(p) => SyntheticSpec::read(p)?,
                    None => SyntheticSpec::desk_default(),
                };
                Self::from_synthetic(&spec)?
            }
            DataSource::Conll {
                path,
                train,
                validation,
                target,
            } => Dataset {
                corpus: read_conll(path)?,
                train: train.clone(),
                validation: validation.clone(),
                target: target.clone(),
            },
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn from_synthetic(spec: &SyntheticSpec) -> Result<Self> {
        Ok(Dataset {
            corpus: generate_synthetic(spec)?,
            train: spec.domains_with_role(DomainRole::Source),
            validation: spec.domains_with_role(DomainRole::Validation),
            target: spec.domains_with_role(DomainRole::Target),
        })
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Config("no training domains".into()));
        }
        if self.target.is_empty() {
            return Err(Error::Config("no target domains".into()));
        }
        for name in self.train.iter().chain(&self.validation).chain(&self.target) {
            self.corpus.domain(name)?;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over `(master, stream, index)`; every random stream in
/// a run (init, per-episode sampling, adaption init) is derived from one seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const TEST: u64 = 4;
    pub const ADAPTION: u64 = 5;
}
