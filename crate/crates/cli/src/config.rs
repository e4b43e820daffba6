//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pi2i_core::corpus::Format;
use pi2i_core::{IndexParams, SamplerConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Model,
    Swing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: Option<PathBuf>,
    pub format: Format,
    pub vocab_dir: PathBuf,
    pub index: PathBuf,
    pub samples: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub reports: PathBuf,
    pub seed: u64,
    pub min_history: usize,
    pub index_params: IndexParams,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub eval_split: Split,
    pub scorer: ScorerKind,
    pub ks: Vec<usize>,
    pub sweep_grid: Vec<usize>,
    pub stats_k: Option<usize>,
    pub stats_top_users: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: None,
            format: Format::Tsv,
            vocab_dir: "vocab".into(),
            index: "index.tsv".into(),
            samples: "samples.tsv".into(),
            checkpoint: "model.ckpt".into(),
            train_log: "train_log.tsv".into(),
            reports: "reports".into(),
            seed: 0,
            min_history: 3,
            index_params: IndexParams::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            eval_split: Split::Test,
            scorer: ScorerKind::Model,
            ks: vec![50, 100, 200, 500, 1000],
            sweep_grid: vec![50, 250, 1250],
            stats_k: None,
            stats_top_users: 10,
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Usage(format!("bad value '{value}' for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value))
}

fn opt_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, CliError> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    let v: Vec<usize> = value.split(',').map(|x| num(key, x.trim())).collect::<Result<_, _>>()?;
    if v.is_empty() || v.contains(&0) {
        return Err(bad(key, value));
    }
    Ok(v)
}

fn boolean(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

impl PipelineConfig {
    /// Sections of `(key, value)` pairs in canonical order.
    fn sections(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let p = &self.index_params;
        let s = &self.sampler;
        let paths = vec![
            ("data", self.data.as_ref().map_or(String::new(), |d| d.display().to_string())),
            ("format", match self.format {
                Format::Tsv => "tsv".into(),
                Format::Csv => "csv".into(),
            }),
            ("vocab_dir", self.vocab_dir.display().to_string()),
            ("index", self.index.display().to_string()),
            ("samples", self.samples.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("train_log", self.train_log.display().to_string()),
            ("reports", self.reports.display().to_string()),
        ];
        let corpus = vec![
            ("seed", self.seed.to_string()),
            ("min_history", self.min_history.to_string()),
        ];
        let indexer = vec![
            ("alpha", p.alpha.to_string()),
            ("truncation", p.truncation.to_string()),
            ("weighted", p.weighted.to_string()),
            ("exclude_self_pairs", p.exclude_self_pairs.to_string()),
            ("window", opt(p.window)),
            ("user_item_cap", opt(p.user_item_cap)),
            ("min_score", p.min_score.to_string()),
        ];
        let sampler = vec![
            ("n_hard", s.n_hard.to_string()),
            ("n_easy", s.n_easy.to_string()),
            ("hard_bias", s.hard_bias.to_string()),
            ("easy_bias", s.easy_bias.to_string()),
            ("pairs_per_user", opt(s.pairs_per_user)),
        ];
        // the train seed is derived from the root seed
        let model = self.train.to_pairs().into_iter().filter(|(k, _)| *k != "seed").collect();
        let eval = vec![
            ("eval_split", match self.eval_split {
                Split::Validation => "validation".into(),
                Split::Test => "test".into(),
            }),
            ("scorer", match self.scorer {
                ScorerKind::Model => "model".into(),
                ScorerKind::Swing => "swing".into(),
            }),
            ("ks", list(&self.ks)),
            ("sweep_grid", list(&self.sweep_grid)),
            ("stats_k", opt(self.stats_k)),
            ("stats_top_users", self.stats_top_users.to_string()),
        ];
        vec![
            ("paths", paths),
            ("corpus", corpus),
            ("indexer", indexer),
            ("sampler", sampler),
            ("model", model),
            ("evaluation", eval),
        ]
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (name, pairs)) in self.sections().into_iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "# {name}");
            for (k, v) in pairs {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "data" => self.data = (!value.is_empty()).then(|| value.into()),
            "format" => self.format = value.parse().map_err(|_| bad(key, value))?,
            "vocab_dir" => self.vocab_dir = value.into(),
            "index" => self.index = value.into(),
            "samples" => self.samples = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "train_log" => self.train_log = value.into(),
            "reports" => self.reports = value.into(),
            "seed" => self.seed = num(key, value)?,
            "min_history" => self.min_history = num(key, value)?,
            "alpha" => self.index_params.alpha = num(key, value)?,
            "truncation" => self.index_params.truncation = num(key, value)?,
            "weighted" => self.index_params.weighted = boolean(key, value)?,
            "exclude_self_pairs" => self.index_params.exclude_self_pairs = boolean(key, value)?,
            "window" => self.index_params.window = opt_num(key, value)?,
            "user_item_cap" => self.index_params.user_item_cap = opt_num(key, value)?,
            "min_score" => self.index_params.min_score = num(key, value)?,
            "n_hard" => self.sampler.n_hard = num(key, value)?,
            "n_easy" => self.sampler.n_easy = num(key, value)?,
            "hard_bias" => self.sampler.hard_bias = num(key, value)?,
            "easy_bias" => self.sampler.easy_bias = num(key, value)?,
            "pairs_per_user" => self.sampler.pairs_per_user = opt_num(key, value)?,
            "eval_split" => {
                self.eval_split = match value {
                    "validation" => Split::Validation,
                    "test" => Split::Test,
                    _ => return Err(bad(key, value)),
                }
            }
            "scorer" => {
                self.scorer = match value {
                    "model" => ScorerKind::Model,
                    "swing" => ScorerKind::Swing,
                    _ => return Err(bad(key, value)),
                }
            }
            "ks" => self.ks = parse_list(key, value)?,
            "sweep_grid" => self.sweep_grid = parse_list(key, value)?,
            "stats_k" => self.stats_k = opt_num(key, value)?,
            "stats_top_users" => self.stats_top_users = num(key, value)?,
            _ => {
                let known = key != "seed" && self.train.set(key, value).map_err(|e| CliError::Usage(e.to_string()))?;
                if !known {
                    return Err(CliError::Usage(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = PipelineConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected 'key = value'", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides on top of the file values.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: pi2i_core::Error| CliError::Usage(e.to_string());
        self.index_params.validate().map_err(usage)?;
        self.sampler_config().validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.min_history < 3 {
            return Err(CliError::Usage("min_history must be at least 3".into()));
        }
        if self.sweep_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Usage("sweep_grid must be strictly ascending".into()));
        }
        Ok(())
    }

    /// Sampler settings with the derived stage seed and the shared sequence length.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: pi2i_core::seed::derive(self.seed, "sample"),
            max_seq_len: self.train.max_seq_len,
            ..self.sampler.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: pi2i_core::seed::derive(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }
}
