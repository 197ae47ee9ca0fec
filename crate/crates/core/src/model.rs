//! The full tagger: lattice construction, embeddings, fused relative
//! encoding, encoder and CRF, with one-sentence training steps.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::crf::{
    crf_negative_log_likelihood, crf_nll_with_grad, emissions, emissions_backward, viterbi_decode,
    CrfError, CrfParams, TransitionMask,
};
use crate::embeddings::{accumulate_table_grad, embed_lattice, EmbeddingTable, Pooling};
use crate::encoder::{
    encode_backward, encode_traced, Dropout, EncoderError, EncoderParams, EncoderTrace,
};
use crate::lattice::{build_lattice, match_lexicon, FlatLattice, LatticeError, Lexicon};
use crate::params::{push_mut, push_ref, ParamTensors, TensorMut, TensorRef};
use crate::relpos::{
    relative_distances, FusedEncoding, FusionParams, RelPosError, SinusoidalBasis,
};
use crate::rules::{match_rules, RuleSet};
use crate::tags::{LabelSet, Tag, TagError};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    RelPos(#[from] RelPosError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Tags(#[from] TagError),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(&'static str),
}

impl ModelError {
    /// True for failures caused by NaN/inf values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::NonFiniteLoss | ModelError::Encoder(EncoderError::NonFinite { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub scale_attention: bool,
    pub pooling: Pooling,
    pub dropout: f64,
    pub use_lexicon: bool,
    pub use_rules: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 8,
            layers: 1,
            d_ff: 256,
            scale_attention: true,
            pooling: Pooling::Mean,
            dropout: 0.0,
            use_lexicon: true,
            use_rules: true,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, in a fixed order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_model == 0 || self.d_model % 2 != 0 {
            out.push(format!(
                "d_model must be positive and even, got {}",
                self.d_model
            ));
        }
        if self.heads == 0 {
            out.push("heads must be positive".to_string());
        } else if self.d_model % self.heads != 0 {
            out.push(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 {
            out.push("layers must be positive".to_string());
        }
        if self.d_ff == 0 {
            out.push("d_ff must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embeddings: EmbeddingTable,
    pub fusion: FusionParams,
    pub encoder: EncoderParams,
    pub crf: CrfParams,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embeddings: EmbeddingTable::from_parts(
                self.embeddings.chars().to_vec(),
                Array2::zeros(self.embeddings.vectors().dim()),
            ),
            fusion: FusionParams::zeros(self.fusion.d_model()),
            encoder: self.encoder.zeros_like(),
            crf: CrfParams::zeros(self.crf.w_emit.nrows(), self.crf.num_labels()),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.named_mut() {
            t.data.fill(0.0);
        }
    }
}

impl ParamTensors for ModelParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        push_ref(out, prefix, "embeddings", self.embeddings.vectors());
        push_ref(out, prefix, "fusion.w_r", &self.fusion.w_r);
        self.encoder.tensors(&format!("{prefix}encoder."), out);
        self.crf.tensors(&format!("{prefix}crf."), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        push_mut(out, prefix, "embeddings", self.embeddings.vectors_mut());
        push_mut(out, prefix, "fusion.w_r", &mut self.fusion.w_r);
        self.encoder.tensors_mut(&format!("{prefix}encoder."), out);
        self.crf.tensors_mut(&format!("{prefix}crf."), out);
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub lattice: FlatLattice,
    pub fused: FusedEncoding,
    pub trace: EncoderTrace,
    pub encoded: Array2<f64>,
    pub emissions: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    labels: LabelSet,
    mask: TransitionMask,
    basis: SinusoidalBasis,
    lexicon: Lexicon,
    rules: RuleSet,
}

impl Model {
    /// Freshly initialized model over the given character vocabulary.
    pub fn new(
        config: ModelConfig,
        vocab: impl IntoIterator<Item = char>,
        lexicon: Lexicon,
        rules: RuleSet,
        seed: u64,
    ) -> Result<Self, ModelError> {
        check_config(&config)?;
        let labels = LabelSet::standard();
        let mask = TransitionMask::bmeso(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = EmbeddingTable::random(vocab, config.d_model, seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fusion = FusionParams::zeros(config.d_model);
        fusion.w_r.mapv_inplace(|_| normal.sample(&mut rng));
        let encoder = EncoderParams::init(
            config.d_model,
            config.heads,
            config.layers,
            config.d_ff,
            config.scale_attention,
            &mut rng,
        );
        let crf = CrfParams::init(config.d_model, &mask, INIT_STD, &mut rng);
        let params = ModelParams {
            embeddings,
            fusion,
            encoder,
            crf,
        };
        Self::from_parts(config, params, lexicon, rules)
    }

    pub fn from_parts(
        config: ModelConfig,
        params: ModelParams,
        lexicon: Lexicon,
        rules: RuleSet,
    ) -> Result<Self, ModelError> {
        check_config(&config)?;
        let labels = LabelSet::standard();
        let mask = TransitionMask::bmeso(&labels);
        let shapes_ok = params.embeddings.d_model() == config.d_model
            && params.fusion.d_model() == config.d_model
            && params.encoder.layers.len() == config.layers
            && params.crf.num_labels() == labels.len()
            && params.crf.w_emit.nrows() == config.d_model;
        if !shapes_ok {
            return Err(ModelError::Config(
                "parameter shapes do not match the configuration".into(),
            ));
        }
        Ok(Model {
            basis: SinusoidalBasis::new(config.d_model)?,
            config,
            params,
            labels,
            mask,
            lexicon,
            rules,
        })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn mask(&self) -> &TransitionMask {
        &self.mask
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    /// Lattice with the lexicon and rule channels enabled per config.
    pub fn lattice(&self, sentence: &str) -> Result<FlatLattice, ModelError> {
        let words = if self.config.use_lexicon {
            match_lexicon(sentence, &self.lexicon)
        } else {
            Vec::new()
        };
        let nsw = if self.config.use_rules {
            match_rules(sentence, &self.rules)
        } else {
            Vec::new()
        };
        Ok(build_lattice(sentence, &words, &nsw)?)
    }

    pub fn forward(&self, sentence: &str) -> Result<Forward, ModelError> {
        self.forward_with(sentence, None::<&mut ChaCha8Rng>)
    }

    fn forward_with<R: rand::Rng>(
        &self,
        sentence: &str,
        rng: Option<&mut R>,
    ) -> Result<Forward, ModelError> {
        let lattice = self.lattice(sentence)?;
        let e = embed_lattice(&lattice, &self.params.embeddings, self.config.pooling);
        let fused = FusedEncoding::forward(
            &relative_distances(&lattice),
            &self.basis,
            &self.params.fusion,
        )?;
        let dropout = match rng {
            Some(rng) if self.config.dropout > 0.0 => Some(Dropout {
                rate: self.config.dropout,
                rng,
            }),
            _ => None,
        };
        let (encoded, trace) = encode_traced(&e, &fused.encoding, &self.params.encoder, dropout)?;
        let emissions = emissions(&encoded, lattice.char_count(), &self.params.crf);
        Ok(Forward {
            lattice,
            fused,
            trace,
            encoded,
            emissions,
        })
    }

    /// Best label sequence for `sentence`; empty input gives no tags.
    pub fn tag(&self, sentence: &str) -> Result<Vec<Tag>, ModelError> {
        if sentence.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.forward(sentence)?;
        let best = viterbi_decode(&f.emissions, &self.params.crf);
        Ok(self.labels.decode(&best)?)
    }

    pub fn loss(&self, sentence: &str, gold: &[Tag]) -> Result<f64, ModelError> {
        let f = self.forward(sentence)?;
        let gold = self.labels.encode(gold)?;
        let loss =
            crf_negative_log_likelihood(&f.emissions, &gold, &self.params.crf, Some(&self.mask))?;
        finite(loss)
    }

    /// Loss of one sentence; accumulates its gradient into `grads`.
    pub fn loss_and_grad<R: rand::Rng>(
        &self,
        sentence: &str,
        gold: &[Tag],
        grads: &mut ModelParams,
        rng: Option<&mut R>,
    ) -> Result<f64, ModelError> {
        let gold = self.labels.encode(gold)?;
        let f = self.forward_with(sentence, rng)?;
        let (loss, d_em) = crf_nll_with_grad(
            &f.emissions,
            &gold,
            &self.params.crf,
            Some(&self.mask),
            &mut grads.crf,
        )?;
        let loss = finite(loss)?;
        grads.crf.mask_pinned_grads(&self.mask);
        let d_encoded = emissions_backward(
            &f.encoded,
            f.lattice.char_count(),
            &self.params.crf,
            &d_em,
            &mut grads.crf,
        );
        let n = f.lattice.len();
        let mut d_r = Array3::zeros((n, n, self.config.d_model));
        let d_e = encode_backward(
            &f.trace,
            &f.fused.encoding,
            &self.params.encoder,
            &d_encoded,
            &mut grads.encoder,
            &mut d_r,
        );
        f.fused.backward(&d_r, &mut grads.fusion.w_r);
        accumulate_table_grad(
            &f.lattice,
            &self.params.embeddings,
            self.config.pooling,
            &d_e,
            grads.embeddings.vectors_mut(),
        );
        Ok(loss)
    }
}

fn check_config(config: &ModelConfig) -> Result<(), ModelError> {
    let problems = config.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(ModelError::Config(problems.join("; ")))
    }
}

fn finite(loss: f64) -> Result<f64, ModelError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ModelError::NonFiniteLoss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &impl ParamTensors, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Adam {
            config,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of `params` from `grads`, scaled by `scale` before clipping.
    pub fn step(
        &mut self,
        params: &mut impl ParamTensors,
        grads: &impl ParamTensors,
        lr: f64,
        scale: f64,
    ) {
        let grads = grads.named();
        let norm = grads
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|g| (g * scale).powi(2))
            .sum::<f64>()
            .sqrt();
        let factor = match self.config.clip_norm {
            Some(c) if norm > c => scale * c / norm,
            _ => scale,
        };
        self.steps += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params
            .named_mut()
            .into_iter()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            debug_assert_eq!(p.name, g.name);
            for i in 0..p.data.len() {
                let gi = g.data[i] * factor;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Accumulates per-sentence gradients and applies them with Adam.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    adam: Adam,
    grads: ModelParams,
    pending: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig, seed: u64) -> Self {
        Trainer {
            adam: Adam::new(&model.params, adam),
            grads: model.params.zeros_like(),
            model,
            pending: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Forward and backward pass for one sentence; the gradient is held
    /// until [`Trainer::backward_and_step`].
    pub fn forward_loss(&mut self, sentence: &str, gold: &[Tag]) -> Result<f64, ModelError> {
        let mut scratch = if self.pending == 0 {
            None
        } else {
            Some(self.model.params.zeros_like())
        };
        let target = scratch.as_mut().unwrap_or(&mut self.grads);
        if self.pending == 0 {
            target.fill_zero();
        }
        let loss = self
            .model
            .loss_and_grad(sentence, gold, target, Some(&mut self.rng))?;
        if let Some(s) = scratch {
            for (acc, g) in self.grads.named_mut().into_iter().zip(s.named()) {
                for (a, b) in acc.data.iter_mut().zip(g.data) {
                    *a += b;
                }
            }
        }
        self.pending += 1;
        Ok(loss)
    }

    /// Applies the mean gradient of every recorded forward pass.
    pub fn backward_and_step(&mut self, lr: f64) -> Result<(), ModelError> {
        if self.pending == 0 {
            return Err(ModelError::Usage(
                "backward_and_step called before any forward pass",
            ));
        }
        let scale = 1.0 / self.pending as f64;
        self.adam
            .step(&mut self.model.params, &self.grads, lr, scale);
        self.model.params.crf.pin(&self.model.mask);
        self.pending = 0;
        Ok(())
    }
}
