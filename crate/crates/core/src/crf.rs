//! Linear emission layer and linear-chain CRF.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::params::{push_mut, push_ref, ParamTensors, TensorMut, TensorRef};
use crate::tags::LabelSet;

/// Score assigned to transitions that would break BMESO well-formedness.
pub const PINNED: f64 = -1e4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CrfError {
    #[error("gold sequence has {gold} labels but emissions cover {len} positions")]
    Length { gold: usize, len: usize },
    #[error("gold label {label} at position {position} is outside the label set")]
    BadLabel { position: usize, label: usize },
    #[error("gold sequence is ill-formed at position {position}")]
    IllFormed { position: usize },
    #[error("cannot score an empty sequence")]
    Empty,
}

/// Which transitions (and start/end labels) are permitted.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMask {
    allowed: Array2<bool>,
    start: Vec<bool>,
    end: Vec<bool>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
}

impl TransitionMask {
    pub fn full(k: usize) -> Self {
        Self::from_parts(
            Array2::from_elem((k, k), true),
            vec![true; k],
            vec![true; k],
        )
    }

    pub fn bmeso(labels: &LabelSet) -> Self {
        let tags = labels.tags();
        let k = tags.len();
        let allowed = Array2::from_shape_fn((k, k), |(i, j)| tags[i].allows_next(tags[j]));
        let start = tags.iter().map(|t| t.can_start()).collect();
        let end = tags.iter().map(|t| t.can_end()).collect();
        Self::from_parts(allowed, start, end)
    }

    fn from_parts(allowed: Array2<bool>, start: Vec<bool>, end: Vec<bool>) -> Self {
        let k = start.len();
        let preds = (0..k)
            .map(|j| (0..k).filter(|&i| allowed[[i, j]]).collect())
            .collect();
        let succs = (0..k)
            .map(|i| (0..k).filter(|&j| allowed[[i, j]]).collect())
            .collect();
        TransitionMask {
            allowed,
            start,
            end,
            preds,
            succs,
        }
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    pub fn check(&self, seq: &[usize]) -> Result<(), CrfError> {
        let k = self.len();
        for (position, &label) in seq.iter().enumerate() {
            if label >= k {
                return Err(CrfError::BadLabel { position, label });
            }
        }
        if let Some(&first) = seq.first() {
            if !self.start[first] {
                return Err(CrfError::IllFormed { position: 0 });
            }
        }
        for (t, w) in seq.windows(2).enumerate() {
            if !self.allowed[[w[0], w[1]]] {
                return Err(CrfError::IllFormed { position: t + 1 });
            }
        }
        if let Some(&last) = seq.last() {
            if !self.end[last] {
                return Err(CrfError::IllFormed {
                    position: seq.len() - 1,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// d_model x K
    pub w_emit: Array2<f64>,
    pub b_emit: Array1<f64>,
    /// `transitions[[i, j]]` scores label `i` followed by label `j`.
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl CrfParams {
    pub fn zeros(d_model: usize, k: usize) -> Self {
        CrfParams {
            w_emit: Array2::zeros((d_model, k)),
            b_emit: Array1::zeros(k),
            transitions: Array2::zeros((k, k)),
            start: Array1::zeros(k),
            end: Array1::zeros(k),
        }
    }

    /// Emission weights ~ N(0, std); transition scores start at zero and
    /// disallowed ones are pinned.
    pub fn init<R: Rng>(d_model: usize, mask: &TransitionMask, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_model, mask.len());
        let normal = Normal::new(0.0, std).expect("valid std");
        p.w_emit.mapv_inplace(|_| normal.sample(rng));
        p.pin(mask);
        p
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    /// Sets every disallowed transition, start and end score to [`PINNED`].
    pub fn pin(&mut self, mask: &TransitionMask) {
        self.transitions.zip_mut_with(&mask.allowed, |t, ok| {
            if !ok {
                *t = PINNED
            }
        });
        for (v, ok) in self.start.iter_mut().zip(&mask.start) {
            if !ok {
                *v = PINNED;
            }
        }
        for (v, ok) in self.end.iter_mut().zip(&mask.end) {
            if !ok {
                *v = PINNED;
            }
        }
    }

    /// Zeroes gradient entries of pinned scores.
    pub fn mask_pinned_grads(&mut self, mask: &TransitionMask) {
        self.transitions.zip_mut_with(&mask.allowed, |t, ok| {
            if !ok {
                *t = 0.0
            }
        });
        for (v, ok) in self.start.iter_mut().zip(&mask.start) {
            if !ok {
                *v = 0.0;
            }
        }
        for (v, ok) in self.end.iter_mut().zip(&mask.end) {
            if !ok {
                *v = 0.0;
            }
        }
    }
}

impl ParamTensors for CrfParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        push_ref(out, prefix, "w_emit", &self.w_emit);
        push_ref(out, prefix, "b_emit", &self.b_emit);
        push_ref(out, prefix, "transitions", &self.transitions);
        push_ref(out, prefix, "start", &self.start);
        push_ref(out, prefix, "end", &self.end);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        push_mut(out, prefix, "w_emit", &mut self.w_emit);
        push_mut(out, prefix, "b_emit", &mut self.b_emit);
        push_mut(out, prefix, "transitions", &mut self.transitions);
        push_mut(out, prefix, "start", &mut self.start);
        push_mut(out, prefix, "end", &mut self.end);
    }
}

/// Projects the first `char_count` rows (the character tokens) to label
/// scores. Span-token rows are not used.
pub fn emissions(encoded: &Array2<f64>, char_count: usize, params: &CrfParams) -> Array2<f64> {
    encoded.slice(s![..char_count, ..]).dot(&params.w_emit) + &params.b_emit
}

/// Backward of [`emissions`]: accumulates weight gradients and returns
/// dL/d(encoded), zero on span-token rows.
pub fn emissions_backward(
    encoded: &Array2<f64>,
    char_count: usize,
    params: &CrfParams,
    d_emissions: &Array2<f64>,
    grads: &mut CrfParams,
) -> Array2<f64> {
    let chars = encoded.slice(s![..char_count, ..]);
    grads.w_emit += &chars.t().dot(d_emissions);
    grads.b_emit += &d_emissions.sum_axis(Axis(0));
    let mut d_encoded = Array2::zeros(encoded.dim());
    d_encoded
        .slice_mut(s![..char_count, ..])
        .assign(&d_emissions.dot(&params.w_emit.t()));
    d_encoded
}

/// Unnormalized score of a label sequence.
pub fn sequence_score(emissions: &Array2<f64>, labels: &[usize], params: &CrfParams) -> f64 {
    let mut score = params.start[labels[0]] + emissions[[0, labels[0]]];
    for t in 1..labels.len() {
        score = score + params.transitions[[labels[t - 1], labels[t]]] + emissions[[t, labels[t]]];
    }
    score + params.end[labels[labels.len() - 1]]
}

/// Best-scoring label sequence. Ties go to the lowest label index.
pub fn viterbi_decode(emissions: &Array2<f64>, params: &CrfParams) -> Vec<usize> {
    let (n, k) = emissions.dim();
    if n == 0 {
        return Vec::new();
    }
    let mut score: Vec<f64> = (0..k)
        .map(|j| params.start[j] + emissions[[0, j]])
        .collect();
    let mut back = Array2::<usize>::zeros((n, k));
    let mut next = vec![0.0; k];
    for t in 1..n {
        for j in 0..k {
            let mut best = 0;
            let mut best_score = score[0] + params.transitions[[0, j]];
            for i in 1..k {
                let s = score[i] + params.transitions[[i, j]];
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            back[[t, j]] = best;
            next[j] = best_score + emissions[[t, j]];
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut last = 0;
    let mut best_score = score[0] + params.end[0];
    for j in 1..k {
        let s = score[j] + params.end[j];
        if s > best_score {
            last = j;
            best_score = s;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[[t, path[t]]];
    }
    path
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct Lattice<'a> {
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    params: &'a CrfParams,
}

impl<'a> Lattice<'a> {
    /// Dense unless a mask restricts the transitions summed over; pinned
    /// transitions contribute `exp(-1e4)`, which is zero in f64.
    fn new(params: &'a CrfParams, mask: Option<&TransitionMask>) -> Self {
        let k = params.num_labels();
        match mask {
            Some(m) => Lattice {
                preds: m.preds.clone(),
                succs: m.succs.clone(),
                params,
            },
            None => Lattice {
                preds: vec![(0..k).collect(); k],
                succs: vec![(0..k).collect(); k],
                params,
            },
        }
    }

    fn forward(&self, e: &Array2<f64>) -> (Array2<f64>, f64) {
        let (n, k) = e.dim();
        let p = self.params;
        let mut alpha = Array2::zeros((n, k));
        for j in 0..k {
            alpha[[0, j]] = p.start[j] + e[[0, j]];
        }
        for t in 1..n {
            for j in 0..k {
                let prev = alpha.row(t - 1);
                let lse = log_sum_exp(
                    self.preds[j]
                        .iter()
                        .map(|&i| prev[i] + p.transitions[[i, j]]),
                );
                alpha[[t, j]] = lse + e[[t, j]];
            }
        }
        let last = alpha.row(n - 1);
        let log_z = log_sum_exp((0..k).map(|j| last[j] + p.end[j]));
        (alpha, log_z)
    }

    fn backward(&self, e: &Array2<f64>) -> Array2<f64> {
        let (n, k) = e.dim();
        let p = self.params;
        let mut beta = Array2::zeros((n, k));
        for i in 0..k {
            beta[[n - 1, i]] = p.end[i];
        }
        for t in (0..n - 1).rev() {
            for i in 0..k {
                let lse = log_sum_exp(
                    self.succs[i]
                        .iter()
                        .map(|&j| p.transitions[[i, j]] + e[[t + 1, j]] + beta[[t + 1, j]]),
                );
                beta[[t, i]] = lse;
            }
        }
        beta
    }
}

/// `log Z`, via the forward algorithm in log space.
pub fn log_partition(emissions: &Array2<f64>, params: &CrfParams) -> f64 {
    if emissions.nrows() == 0 {
        return 0.0;
    }
    Lattice::new(params, None).forward(emissions).1
}

/// `-(score(gold) - log Z)`.
pub fn crf_negative_log_likelihood(
    emissions: &Array2<f64>,
    gold: &[usize],
    params: &CrfParams,
    mask: Option<&TransitionMask>,
) -> Result<f64, CrfError> {
    validate(emissions, gold, params, mask)?;
    let (_, log_z) = Lattice::new(params, mask).forward(emissions);
    Ok(log_z - sequence_score(emissions, gold, params))
}

fn validate(
    emissions: &Array2<f64>,
    gold: &[usize],
    params: &CrfParams,
    mask: Option<&TransitionMask>,
) -> Result<(), CrfError> {
    if gold.is_empty() {
        return Err(CrfError::Empty);
    }
    if gold.len() != emissions.nrows() {
        return Err(CrfError::Length {
            gold: gold.len(),
            len: emissions.nrows(),
        });
    }
    match mask {
        Some(m) => m.check(gold),
        None => TransitionMask::full(params.num_labels()).check(gold),
    }
}

/// Loss and gradients. Returns `(loss, d_emissions)` and accumulates
/// transition/start/end gradients into `grads` (pinned entries stay zero).
pub fn crf_nll_with_grad(
    emissions: &Array2<f64>,
    gold: &[usize],
    params: &CrfParams,
    mask: Option<&TransitionMask>,
    grads: &mut CrfParams,
) -> Result<(f64, Array2<f64>), CrfError> {
    validate(emissions, gold, params, mask)?;
    let lat = Lattice::new(params, mask);
    let (alpha, log_z) = lat.forward(emissions);
    let beta = lat.backward(emissions);
    let loss = log_z - sequence_score(emissions, gold, params);
    let (n, k) = emissions.dim();

    let mut d_e = Array2::zeros((n, k));
    for t in 0..n {
        for j in 0..k {
            d_e[[t, j]] = (alpha[[t, j]] + beta[[t, j]] - log_z).exp();
        }
    }
    for j in 0..k {
        grads.start[j] += d_e[[0, j]];
        grads.end[j] += d_e[[n - 1, j]];
    }
    for t in 1..n {
        for j in 0..k {
            let tail = emissions[[t, j]] + beta[[t, j]] - log_z;
            for &i in &lat.preds[j] {
                grads.transitions[[i, j]] +=
                    (alpha[[t - 1, i]] + params.transitions[[i, j]] + tail).exp();
            }
        }
    }
    grads.start[gold[0]] -= 1.0;
    grads.end[gold[n - 1]] -= 1.0;
    for t in 0..n {
        d_e[[t, gold[t]]] -= 1.0;
        if t > 0 {
            grads.transitions[[gold[t - 1], gold[t]]] -= 1.0;
        }
    }
    if let Some(m) = mask {
        grads.mask_pinned_grads(m);
    }
    Ok((loss, d_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::{validate_tags, Tag};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_crf(n: usize, k: usize, seed: u64) -> (Array2<f64>, CrfParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Array2::from_shape_fn((n, k), |_| rng.gen_range(-2.0..2.0));
        let mut p = CrfParams::zeros(1, k);
        p.transitions.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        p.start.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        p.end.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        (e, p)
    }

    fn all_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|s| (0..k).map(move |j| [s.clone(), vec![j]].concat()))
                .collect();
        }
        out
    }

    #[test]
    fn viterbi_single_position_is_argmax() {
        let e = ndarray::array![[0.1, 3.0, -1.0, 2.9]];
        assert_eq!(viterbi_decode(&e, &CrfParams::zeros(1, 4)), vec![1]);
    }

    #[test]
    fn viterbi_ties_go_to_lowest_index() {
        let e = Array2::zeros((3, 4));
        assert_eq!(viterbi_decode(&e, &CrfParams::zeros(1, 4)), vec![0, 0, 0]);
    }

    #[test]
    fn brute_force_agreement() {
        for seed in 0..50 {
            let n = 1 + seed as usize % 5;
            let k = 2 + seed as usize % 4;
            let (e, p) = random_crf(n, k, seed);
            let seqs = all_sequences(n, k);
            let best = seqs
                .iter()
                .max_by(|a, b| {
                    sequence_score(&e, a, &p)
                        .partial_cmp(&sequence_score(&e, b, &p))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(&viterbi_decode(&e, &p), best);
            let z: f64 = seqs.iter().map(|s| sequence_score(&e, s, &p).exp()).sum();
            assert!((log_partition(&e, &p) - z.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn single_label_loss_is_zero() {
        let (e, p) = random_crf(4, 1, 3);
        assert_eq!(
            crf_negative_log_likelihood(&e, &[0, 0, 0, 0], &p, None).unwrap(),
            0.0
        );
    }

    #[test]
    fn loss_is_non_negative() {
        for seed in 0..20 {
            let (e, p) = random_crf(4, 3, seed);
            for gold in all_sequences(4, 3) {
                assert!(crf_negative_log_likelihood(&e, &gold, &p, None).unwrap() >= -1e-12);
            }
        }
    }

    #[test]
    fn log_partition_shift() {
        let (mut e, p) = random_crf(5, 4, 8);
        let before = log_partition(&e, &p);
        e.row_mut(2).mapv_inplace(|v| v + 1.75);
        assert!((log_partition(&e, &p) - before - 1.75).abs() < 1e-9);
    }

    #[test]
    fn constrained_decode_stays_well_formed() {
        let labels = LabelSet::standard();
        let mask = TransitionMask::bmeso(&labels);
        let mut p = CrfParams::zeros(1, labels.len());
        p.pin(&mask);
        let e_digit = labels.index_of("E-DIGIT".parse::<Tag>().unwrap()).unwrap();
        let m_digit = labels.index_of("M-DIGIT".parse::<Tag>().unwrap()).unwrap();
        let mut e = Array2::zeros((3, labels.len()));
        e[[0, e_digit]] = 50.0;
        e[[1, m_digit]] = 50.0;
        e[[2, m_digit]] = 50.0;
        let path = viterbi_decode(&e, &p);
        assert!(validate_tags(&labels.decode(&path).unwrap()).is_ok());
    }

    #[test]
    fn ill_formed_gold_rejected() {
        let labels = LabelSet::standard();
        let mask = TransitionMask::bmeso(&labels);
        let mut p = CrfParams::zeros(1, labels.len());
        p.pin(&mask);
        let e = Array2::zeros((2, labels.len()));
        let m_digit = labels.index_of("M-DIGIT".parse::<Tag>().unwrap()).unwrap();
        assert_eq!(
            crf_negative_log_likelihood(&e, &[m_digit, 0], &p, Some(&mask)),
            Err(CrfError::IllFormed { position: 0 })
        );
        assert!(matches!(
            crf_negative_log_likelihood(&e, &[0], &p, Some(&mask)),
            Err(CrfError::Length { .. })
        ));
    }

    #[test]
    fn masked_partition_matches_dense() {
        let labels = LabelSet::standard();
        let mask = TransitionMask::bmeso(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = CrfParams::zeros(1, labels.len());
        p.transitions.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        p.pin(&mask);
        let e = Array2::from_shape_fn((6, labels.len()), |_| rng.gen_range(-3.0..3.0));
        let dense = log_partition(&e, &p);
        let sparse = Lattice::new(&p, Some(&mask)).forward(&e).1;
        assert!((dense - sparse).abs() < 1e-9);
    }

    #[test]
    fn emission_projection() {
        let mut p = CrfParams::zeros(3, 3);
        p.b_emit = ndarray::array![0.5, -1.0, 2.0];
        let enc = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let e = emissions(&enc, 3, &p);
        assert_eq!(e.dim(), (3, 3));
        assert!(e.rows().into_iter().all(|r| r == p.b_emit));

        p.w_emit = Array2::eye(3);
        p.b_emit.fill(0.0);
        let one_hot = Array2::from_shape_fn((4, 3), |(i, j)| if i % 3 == j { 1.0 } else { 0.0 });
        assert_eq!(emissions(&one_hot, 3, &p), one_hot.slice(s![..3, ..]));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (e, mut p) = random_crf(5, 4, 21);
        let gold = vec![1, 3, 0, 0, 2];
        let mut grads = CrfParams::zeros(1, 4);
        let (_, d_e) = crf_nll_with_grad(&e, &gold, &p, None, &mut grads).unwrap();
        let eps = 1e-5;
        let mut e2 = e.clone();
        for t in 0..5 {
            for j in 0..4 {
                let orig = e2[[t, j]];
                e2[[t, j]] = orig + eps;
                let up = crf_negative_log_likelihood(&e2, &gold, &p, None).unwrap();
                e2[[t, j]] = orig - eps;
                let down = crf_negative_log_likelihood(&e2, &gold, &p, None).unwrap();
                e2[[t, j]] = orig;
                assert!(((up - down) / (2.0 * eps) - d_e[[t, j]]).abs() < 1e-7);
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let orig = p.transitions[[i, j]];
                p.transitions[[i, j]] = orig + eps;
                let up = crf_negative_log_likelihood(&e, &gold, &p, None).unwrap();
                p.transitions[[i, j]] = orig - eps;
                let down = crf_negative_log_likelihood(&e, &gold, &p, None).unwrap();
                p.transitions[[i, j]] = orig;
                assert!(((up - down) / (2.0 * eps) - grads.transitions[[i, j]]).abs() < 1e-7);
            }
        }
    }
}
