//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{Config, ConfigError};
use crate::dataset::{
    default_templates, load_corpus, save_corpus, split, synthesize_corpus, Corpus,
};
use crate::embeddings::EmbeddingTable;
use crate::lattice::{build_lattice, match_lexicon, Lexicon};
use crate::model::{Model, ModelError};
use crate::relpos::relative_distances;
use crate::rules::{match_rules, RuleSet};
use crate::tags::LabelSet;
use crate::train::{ablate, evaluate_model, format_ablation, train, vocabulary, AblationData};
use crate::verbalizer::{spans_from_labels, ReadingLexicons, Verbalizer};

/// Longest stretch of characters tagged in one forward pass by `normalize`.
pub const MAX_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Usage(_) => CliError::Usage(e.to_string()),
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "lattice-tn",
    version,
    about = "Chinese text normalization with a flat-lattice tagger"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the train split, log dev metrics per epoch, save the best-dev checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write the metric log to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of the corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Label inventory (`index<TAB>label`) the checkpoint must match.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Normalize standard input line by line.
    Normalize {
        #[command(flatten)]
        common: Common,
    },
    /// Print the flat lattice of a sentence.
    Lattice {
        #[command(flatten)]
        common: Common,
        sentence: String,
        /// Also print the four relative-distance matrices.
        #[arg(long)]
        distances: bool,
    },
    /// Train and score the full model and the three channel ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Write a synthetic corpus to standard output.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Dev,
    Test,
    All,
}

/// Options shared by every command. Each maps onto a config key.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Sentences to synthesize when no corpus is given.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Seed of corpus synthesis and of the 8:1:1 split.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub no_lexicon: bool,
    #[arg(long)]
    pub no_rules: bool,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let typed = [
            ("corpus", path(&self.corpus)),
            ("checkpoint", path(&self.checkpoint)),
            ("lexicon", path(&self.lexicon)),
            ("rules", path(&self.rules)),
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("d_model", self.d_model.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("synthetic", self.synthetic.map(|v| v.to_string())),
            ("data_seed", self.data_seed.map(|v| v.to_string())),
            ("use_lexicon", self.no_lexicon.then(|| "false".to_string())),
            ("use_rules", self.no_rules.then(|| "false".to_string())),
        ];
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in typed {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        }
        Ok(out)
    }

    fn resolve(&self) -> Result<Config, CliError> {
        Ok(Config::resolve(self.config.as_deref(), &self.overrides()?)?)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(
    args: I,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, stdin, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(
    command: Command,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    match command {
        Command::Train { common, log } => cmd_train(&common.resolve()?, log.as_deref(), stdout),
        Command::Eval {
            common,
            split,
            labels,
            json,
        } => cmd_eval(&common.resolve()?, split, labels.as_deref(), json, stdout),
        Command::Normalize { common } => cmd_normalize(&common.resolve()?, stdin, stdout, stderr),
        Command::Lattice {
            common,
            sentence,
            distances,
        } => cmd_lattice(&common.resolve()?, &sentence, distances, stdout),
        Command::Ablate { common, seeds } => cmd_ablate(&common.resolve()?, &seeds, stdout),
        Command::Synthesize { common } => {
            let config = common.resolve()?;
            let corpus =
                synthesize_corpus(config.synthetic, config.data_seed, &default_templates());
            write!(stdout, "{}", save_corpus(&corpus)).map_err(data_err)
        }
    }
}

fn load_lexicon(config: &Config) -> Result<Lexicon, CliError> {
    match &config.paths.lexicon {
        Some(p) => Lexicon::load(p).map_err(data_err),
        None => Ok(Lexicon::builtin()),
    }
}

fn load_rules(config: &Config) -> Result<RuleSet, CliError> {
    match &config.paths.rules {
        Some(p) => RuleSet::load(p).map_err(data_err),
        None => Ok(RuleSet::builtin()),
    }
}

fn load_data(config: &Config) -> Result<Corpus, CliError> {
    match &config.paths.corpus {
        Some(p) => load_corpus(p).map_err(data_err),
        None => Ok(synthesize_corpus(
            config.synthetic,
            config.data_seed,
            &default_templates(),
        )),
    }
}

fn require_checkpoint(config: &Config) -> Result<&Path, CliError> {
    config
        .paths
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("a checkpoint path is required (--checkpoint)".into()))
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::Data(format!("write failed: {e}"))
}

pub fn cmd_train(
    config: &Config,
    log: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let ckpt = require_checkpoint(config)?.to_path_buf();
    let lexicon = load_lexicon(config)?;
    let rules = load_rules(config)?;
    let corpus = load_data(config)?;
    let (train_set, dev_set, _) = split(&corpus, [8, 1, 1], config.data_seed);
    if train_set.is_empty() {
        return Err(CliError::Data("training split is empty".into()));
    }
    let mut model = Model::new(
        config.model.clone(),
        vocabulary(&train_set),
        lexicon,
        rules,
        config.train.seed,
    )?;
    if let Some(p) = &config.paths.embeddings {
        let table = EmbeddingTable::load_pretrained(p).map_err(data_err)?;
        if table.d_model() != config.model.d_model {
            return Err(CliError::Usage(format!(
                "pretrained embeddings have dimension {}, d_model is {}",
                table.d_model(),
                config.model.d_model
            )));
        }
        model.params.embeddings = table;
    }

    let mut lines = vec![
        format!(
            "# sentences train={} dev={} seed={} data_seed={}",
            train_set.len(),
            dev_set.len(),
            config.train.seed,
            config.data_seed
        ),
        format!(
            "# parameters {}",
            crate::params::ParamTensors::param_count(&model.params)
        ),
    ];
    for l in &lines {
        writeln!(stdout, "{l}").map_err(out_err)?;
    }
    let mut write_err = None;
    let outcome = train(model, &train_set, &dev_set, &config.train, |r| {
        let line = r.log_line();
        if let Err(e) = writeln!(stdout, "{line}").and_then(|_| stdout.flush()) {
            write_err.get_or_insert(e);
        }
        lines.push(line);
    })?;
    if let Some(e) = write_err {
        return Err(out_err(e));
    }
    let best = match outcome.best_epoch {
        Some(e) => format!("# best dev epoch {e}"),
        None => "# no training epochs; saved initial parameters".to_string(),
    };
    writeln!(stdout, "{best}").map_err(out_err)?;
    lines.push(best);

    checkpoint::save(&outcome.model, &ckpt)?;
    let labels_path = labels_path(&ckpt);
    std::fs::write(&labels_path, outcome.model.labels().to_tsv()).map_err(data_err)?;
    writeln!(
        stdout,
        "# saved {} and {}",
        ckpt.display(),
        labels_path.display()
    )
    .map_err(out_err)?;
    if let Some(p) = log {
        let mut text = lines.join("\n");
        text.push('\n');
        std::fs::write(p, text).map_err(data_err)?;
    }
    Ok(())
}

/// Label inventory written next to a checkpoint.
pub fn labels_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".labels.tsv");
    PathBuf::from(s)
}

pub fn cmd_eval(
    config: &Config,
    which: SplitName,
    labels: Option<&Path>,
    json: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let model = checkpoint::load(require_checkpoint(config)?)?;
    if let Some(p) = labels {
        let text = std::fs::read_to_string(p).map_err(data_err)?;
        let given = LabelSet::from_tsv(&text).map_err(data_err)?;
        if given.tags() != model.labels().tags() {
            return Err(CliError::Data(format!(
                "label inventory {} is incompatible with the checkpoint",
                p.display()
            )));
        }
    }
    let corpus = load_data(config)?;
    let (tr, dev, test) = split(&corpus, [8, 1, 1], config.data_seed);
    let chosen = match which {
        SplitName::Train => tr,
        SplitName::Dev => dev,
        SplitName::Test => test,
        SplitName::All => corpus,
    };
    if chosen.is_empty() {
        return Err(CliError::Data("the selected split is empty".into()));
    }
    let table = &model.params.embeddings;
    if !chosen.chars().any(|c| table.contains(c)) {
        return Err(CliError::Data(
            "corpus shares no characters with the checkpoint vocabulary".into(),
        ));
    }
    let report = evaluate_model(&model, &chosen)?;
    let text = if json {
        report.to_json() + "\n"
    } else {
        report.to_table()
    };
    write!(stdout, "{text}").map_err(out_err)
}

/// Splits a long line into pieces of at most [`MAX_CHUNK`] characters,
/// preferring to cut after punctuation.
pub fn chunk_line(line: &str) -> Vec<String> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    while chars.len() - start > MAX_CHUNK {
        let window = &chars[start..start + MAX_CHUNK];
        let cut = window
            .iter()
            .rposition(|c| matches!(c, '。' | '，' | '；' | '！' | '？' | ',' | ';' | '!' | '?'))
            .map(|i| i + 1)
            .unwrap_or(MAX_CHUNK);
        out.push(chars[start..start + cut].iter().collect());
        start += cut;
    }
    out.push(chars[start..].iter().collect());
    out
}

pub fn cmd_normalize(
    config: &Config,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let model = checkpoint::load(require_checkpoint(config)?)?;
    let p = &config.paths;
    let lexicons = ReadingLexicons::load(
        p.symbols.as_deref(),
        p.units.as_deref(),
        p.abbreviations.as_deref(),
    )
    .map_err(data_err)?;
    let verbalizer = Verbalizer::new(lexicons);
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = stdin.read_line(&mut buf).map_err(data_err)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = buf.strip_suffix('\n').unwrap_or(&buf);
        let line = line.strip_suffix('\r').unwrap_or(line);
        let mut out = String::new();
        for chunk in chunk_line(line) {
            match normalize_chunk(&model, &verbalizer, &chunk) {
                Ok(s) => out.push_str(&s),
                Err(e) => {
                    let _ = writeln!(stderr, "line {line_no}: {e}");
                    out.push_str(&chunk);
                }
            }
        }
        writeln!(stdout, "{out}").map_err(out_err)?;
    }
    Ok(())
}

fn normalize_chunk(model: &Model, verbalizer: &Verbalizer, chunk: &str) -> Result<String, String> {
    let tags = model.tag(chunk).map_err(|e| e.to_string())?;
    let spans = spans_from_labels(chunk, &tags).map_err(|e| e.to_string())?;
    verbalizer
        .normalize_sentence(chunk, &spans)
        .map_err(|e| e.to_string())
}

pub fn cmd_lattice(
    config: &Config,
    sentence: &str,
    distances: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let words = if config.model.use_lexicon {
        match_lexicon(sentence, &load_lexicon(config)?)
    } else {
        Vec::new()
    };
    let nsw = if config.model.use_rules {
        match_rules(sentence, &load_rules(config)?)
    } else {
        Vec::new()
    };
    let lattice = build_lattice(sentence, &words, &nsw).map_err(data_err)?;
    write!(stdout, "{lattice}").map_err(out_err)?;
    if distances {
        let d = relative_distances(&lattice);
        for (name, m) in [("hh", &d.hh), ("ht", &d.ht), ("th", &d.th), ("tt", &d.tt)] {
            writeln!(stdout, "\nd_{name}").map_err(out_err)?;
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>3}")).collect();
                writeln!(stdout, "{}", cells.join(" ")).map_err(out_err)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_ablate(config: &Config, seeds: &[u64], stdout: &mut dyn Write) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let lexicon = load_lexicon(config)?;
    let rules = load_rules(config)?;
    let corpus = load_data(config)?;
    let (train_set, dev_set, test_set) = split(&corpus, [8, 1, 1], config.data_seed);
    if train_set.is_empty() || test_set.is_empty() {
        return Err(CliError::Data("train or test split is empty".into()));
    }
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    writeln!(stdout, "# seeds {}", seed_list.join(",")).map_err(out_err)?;
    let data = AblationData {
        train: &train_set,
        dev: &dev_set,
        test: &test_set,
        lexicon: &lexicon,
        rules: &rules,
    };
    let mut write_err = None;
    let rows = ablate(
        &config.model,
        &config.train,
        &data,
        seeds,
        |variant, seed, report| {
            if let Err(e) = writeln!(
                stdout,
                "# {} seed {} test_token_acc {:.6} test_f1 {:.6}",
                variant.name(),
                seed,
                report.token_accuracy,
                report.micro.f1
            ) {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(out_err(e));
    }
    write!(stdout, "{}", format_ablation(&rows)).map_err(out_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str], input: &str) -> (i32, String, String) {
        let mut stdin = std::io::Cursor::new(input.as_bytes().to_vec());
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            std::iter::once("lattice-tn").chain(args.iter().copied()),
            &mut stdin,
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn help_and_usage_errors() {
        let (code, out, _) = run_args(&["--help"], "");
        assert_eq!(code, 0);
        for cmd in ["train", "eval", "normalize", "lattice", "ablate"] {
            assert!(out.contains(cmd), "{cmd}");
        }
        assert_eq!(run_args(&["frobnicate"], "").0, 1);
        assert_eq!(run_args(&["lattice"], "").0, 1);
    }

    #[test]
    fn lattice_dump() {
        let dir = tempfile::tempdir().unwrap();
        let lex = dir.path().join("lex.txt");
        std::fs::write(&lex, "学习\n").unwrap();
        let lex = lex.display().to_string();
        let (code, out, _) = run_args(&["lattice", "--lexicon", &lex, "--no-rules", "学习"], "");
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 3);
        assert!(out.lines().nth(2).unwrap().contains("head=0") && out.contains("word"));

        let (_, out, _) = run_args(
            &[
                "lattice",
                "--lexicon",
                &lex,
                "--no-rules",
                "--distances",
                "学习",
            ],
            "",
        );
        assert!(
            out.contains("d_hh\n  0  -1   0\n  1   0   1\n  0  -1   0"),
            "{out}"
        );

        let (_, out, _) = run_args(&["lattice", "--no-lexicon", "--no-rules", "学习"], "");
        assert_eq!(out.lines().count(), 2);
    }

    #[test]
    fn missing_lexicon_is_config_error() {
        let (code, _, err) = run_args(
            &["lattice", "--lexicon", "/nonexistent/lex.txt", "学习"],
            "",
        );
        assert_eq!(code, 1);
        assert!(err.contains("lexicon: file not found"));
    }

    #[test]
    fn train_requires_checkpoint_path() {
        let (code, _, err) = run_args(&["train", "--synthetic", "10", "--epochs", "0"], "");
        assert_eq!(code, 1, "{err}");
    }

    #[test]
    fn chunking() {
        assert_eq!(chunk_line(""), vec![String::new()]);
        let long: String = "数".repeat(300);
        let parts = chunk_line(&long);
        assert_eq!(
            parts.iter().map(|p| p.chars().count()).collect::<Vec<_>>(),
            vec![128, 128, 44]
        );
        let punct = format!("{}，{}", "字".repeat(100), "字".repeat(100));
        let parts = chunk_line(&punct);
        assert_eq!(parts[0].chars().count(), 101);
        assert_eq!(parts.concat(), punct);
    }
}
