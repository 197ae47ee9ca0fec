//! Epoch loop, best-dev selection, corpus evaluation and channel ablation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{evaluate, Corpus, EvalReport};
use crate::lattice::Lexicon;
use crate::model::{AdamConfig, Model, ModelConfig, ModelError, Trainer};
use crate::rules::RuleSet;
use crate::tags::Tag;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 4,
            learning_rate: 1e-3,
            batch_size: 1,
            seed: 7,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_token_accuracy: f64,
    pub dev_f1: f64,
}

impl EpochRecord {
    /// Fixed-format line; contains nothing that varies between identical runs.
    pub fn log_line(&self) -> String {
        format!(
            "epoch {:>3}  train_loss {:.6}  dev_token_acc {:.6}  dev_f1 {:.6}",
            self.epoch, self.train_loss, self.dev_token_accuracy, self.dev_f1
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev token accuracy (the
    /// initial parameters when no epoch ran).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Sorted set of characters in `corpus`.
pub fn vocabulary(corpus: &Corpus) -> BTreeSet<char> {
    corpus.chars().collect()
}

pub fn predict_corpus(model: &Model, corpus: &Corpus) -> Result<Vec<Vec<Tag>>, ModelError> {
    corpus
        .sentences
        .iter()
        .map(|s| model.tag(&s.text()))
        .collect()
}

pub fn evaluate_model(model: &Model, corpus: &Corpus) -> Result<EvalReport, ModelError> {
    let predicted = predict_corpus(model, corpus)?;
    let gold: Vec<Vec<Tag>> = corpus.sentences.iter().map(|s| s.tags.clone()).collect();
    Ok(evaluate(&predicted, &gold).expect("predictions align with gold"))
}

pub fn train(
    model: Model,
    train_set: &Corpus,
    dev_set: &Corpus,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, ModelError> {
    if options.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let mut best = model.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut trainer = Trainer::new(model, options.adam, options.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(options.epochs);
    for epoch in 1..=options.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            options
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(epoch as u64),
        );
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(options.batch_size) {
            for &i in batch {
                let s = &train_set.sentences[i];
                if s.is_empty() {
                    continue;
                }
                total += trainer.forward_loss(&s.text(), &s.tags)?;
            }
            if trainer.pending() > 0 {
                trainer.backward_and_step(options.learning_rate)?;
            }
        }
        let dev = evaluate_model(trainer.model(), dev_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len().max(1) as f64,
            dev_token_accuracy: dev.token_accuracy,
            dev_f1: dev.micro.f1,
        };
        on_epoch(&record);
        if record.dev_token_accuracy > best_score {
            best_score = record.dev_token_accuracy;
            best = trainer.model().clone();
            best_epoch = Some(epoch);
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
    })
}

/// Token channels present in the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoLexicon,
    NoRules,
    NoBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoLexicon,
        Variant::NoRules,
        Variant::NoBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLexicon => "- lexicon",
            Variant::NoRules => "- rules",
            Variant::NoBoth => "- lexicon - rules",
        }
    }

    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let (lex, rules) = match self {
            Variant::Full => (true, true),
            Variant::NoLexicon => (false, true),
            Variant::NoRules => (true, false),
            Variant::NoBoth => (false, false),
        };
        ModelConfig {
            use_lexicon: lex,
            use_rules: rules,
            ..config.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub f1s: Vec<f64>,
}

impl AblationRow {
    pub fn median_accuracy(&self) -> f64 {
        median(&self.accuracies)
    }

    pub fn median_f1(&self) -> f64 {
        median(&self.f1s)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub struct AblationData<'a> {
    pub train: &'a Corpus,
    pub dev: &'a Corpus,
    pub test: &'a Corpus,
    pub lexicon: &'a Lexicon,
    pub rules: &'a RuleSet,
}

/// Trains every variant under every seed and scores it on the test split.
/// `on_run` receives `(variant, seed, test report)` after each run.
pub fn ablate(
    config: &ModelConfig,
    options: &TrainOptions,
    data: &AblationData<'_>,
    seeds: &[u64],
    mut on_run: impl FnMut(Variant, u64, &EvalReport),
) -> Result<Vec<AblationRow>, ModelError> {
    let vocab = vocabulary(data.train);
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut row = AblationRow {
            variant,
            seeds: seeds.to_vec(),
            accuracies: Vec::new(),
            f1s: Vec::new(),
        };
        for &seed in seeds {
            let model = Model::new(
                variant.apply(config),
                vocab.iter().copied(),
                data.lexicon.clone(),
                data.rules.clone(),
                seed,
            )?;
            let opts = TrainOptions {
                seed,
                ..options.clone()
            };
            let outcome = train(model, data.train, data.dev, &opts, |_| {})?;
            let report = evaluate_model(&outcome.model, data.test)?;
            on_run(variant, seed, &report);
            row.accuracies.push(report.token_accuracy);
            row.f1s.push(report.micro.f1);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:>10} {:>10}  per-seed accuracy",
        "method", "accuracy", "f1"
    );
    for r in rows {
        let per_seed: Vec<String> = r
            .seeds
            .iter()
            .zip(&r.accuracies)
            .map(|(seed, a)| format!("{seed}:{a:.4}"))
            .collect();
        let _ = writeln!(
            s,
            "{:<20} {:>10.4} {:>10.4}  {}",
            r.variant.name(),
            r.median_accuracy(),
            r.median_f1(),
            per_seed.join(" ")
        );
    }
    s
}
