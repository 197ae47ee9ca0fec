//! Run configuration: flat `key = value` files plus overrides.
//!
//! Later sources win: defaults, then the file, then command-line
//! overrides. Relative paths in a file resolve against the file's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelConfig;
use crate::train::TrainOptions;

#[derive(Debug, Error, PartialEq)]
#[error("invalid configuration:\n  {}", .problems.join("\n  "))]
pub struct ConfigError {
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub lexicon: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub symbols: Option<PathBuf>,
    pub units: Option<PathBuf>,
    pub abbreviations: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainOptions,
    /// Seed of corpus synthesis and of the 8:1:1 split.
    pub data_seed: u64,
    /// Sentences to synthesize when no corpus path is given.
    pub synthetic: usize,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            train: TrainOptions::default(),
            data_seed: 7,
            synthetic: 2000,
            paths: Paths::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "d_model",
    "heads",
    "layers",
    "d_ff",
    "scale_attention",
    "pooling",
    "dropout",
    "use_lexicon",
    "use_rules",
    "learning_rate",
    "epochs",
    "batch_size",
    "clip_norm",
    "seed",
    "data_seed",
    "synthetic",
    "lexicon",
    "rules",
    "symbols",
    "units",
    "abbreviations",
    "embeddings",
    "corpus",
    "checkpoint",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

impl Config {
    /// Sets one key. Relative paths are joined onto `base`.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<(), String> {
        let path = || {
            if value.is_empty() {
                return None;
            }
            let p = PathBuf::from(value);
            Some(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "scale_attention" => m.scale_attention = parse_bool(key, value)?,
            "pooling" => m.pooling = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "use_lexicon" => m.use_lexicon = parse_bool(key, value)?,
            "use_rules" => m.use_rules = parse_bool(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "clip_norm" => {
                let c: f64 = parse(key, value)?;
                t.adam.clip_norm = (c > 0.0).then_some(c);
            }
            "seed" => t.seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "synthetic" => self.synthetic = parse(key, value)?,
            "lexicon" => self.paths.lexicon = path(),
            "rules" => self.paths.rules = path(),
            "symbols" => self.paths.symbols = path(),
            "units" => self.paths.units = path(),
            "abbreviations" => self.paths.abbreviations = path(),
            "embeddings" => self.paths.embeddings = path(),
            "corpus" => self.paths.corpus = path(),
            "checkpoint" => self.paths.checkpoint = path(),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a config file's text; problems carry line numbers.
    pub fn apply_file_text(&mut self, text: &str, base: Option<&Path>) -> Vec<String> {
        let mut problems = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim(), base) {
                        problems.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => problems.push(format!("line {}: expected key = value", i + 1)),
            }
        }
        problems
    }

    /// Defaults, then `file`, then `overrides`; then validation. Every
    /// problem found along the way is reported together.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        let mut problems = Vec::new();
        if let Some(path) = file {
            match std::fs::read_to_string(path) {
                Ok(text) => {
                    let base = path.parent().map(Path::to_path_buf);
                    for p in config.apply_file_text(&text, base.as_deref()) {
                        problems.push(format!("{}: {p}", path.display()));
                    }
                }
                Err(e) => problems.push(format!("cannot read config file {}: {e}", path.display())),
            }
        }
        for (k, v) in overrides {
            if let Err(e) = config.set(k, v, None) {
                problems.push(e);
            }
        }
        problems.extend(config.problems());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError { problems })
        }
    }

    /// Constraint violations, including input paths that do not exist.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            out.push(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.train.learning_rate
            ));
        }
        if self.train.batch_size == 0 {
            out.push("batch_size must be positive".to_string());
        }
        let p = &self.paths;
        for (key, path) in [
            ("lexicon", &p.lexicon),
            ("rules", &p.rules),
            ("symbols", &p.symbols),
            ("units", &p.units),
            ("abbreviations", &p.abbreviations),
            ("embeddings", &p.embeddings),
            ("corpus", &p.corpus),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    out.push(format!("{key}: file not found: {}", path.display()));
                }
            }
        }
        out
    }

    /// `key = value` rendering of every setting, in [`KEYS`] order.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let opt = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let values = [
            m.d_model.to_string(),
            m.heads.to_string(),
            m.layers.to_string(),
            m.d_ff.to_string(),
            m.scale_attention.to_string(),
            m.pooling.to_string(),
            m.dropout.to_string(),
            m.use_lexicon.to_string(),
            m.use_rules.to_string(),
            t.learning_rate.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.adam.clip_norm.unwrap_or(0.0).to_string(),
            t.seed.to_string(),
            self.data_seed.to_string(),
            self.synthetic.to_string(),
            opt(&self.paths.lexicon),
            opt(&self.paths.rules),
            opt(&self.paths.symbols),
            opt(&self.paths.units),
            opt(&self.paths.abbreviations),
            opt(&self.paths.embeddings),
            opt(&self.paths.corpus),
            opt(&self.paths.checkpoint),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
