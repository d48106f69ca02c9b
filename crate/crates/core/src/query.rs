//! Query-side scoring: per-descriptor class similarities against the selected
//! support descriptors, the learned threshold, the soft weights map, and the
//! class posterior with its cross-entropy loss.

use std::fmt;

use rand::Rng;

use crate::cds::CdsSelection;
use crate::descriptor::{argmax, cosine, dot, sigmoid, softmax, Episode, LocalDescriptor};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Two fully connected layers mapping `[query ∥ context]` (length 2d) to one
/// raw threshold logit. Weights are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMlp {
    pub(crate) input_dim: usize,
    pub(crate) hidden_dim: usize,
    pub(crate) w1: Vec<f64>,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Vec<f64>,
    pub(crate) b2: f64,
}

impl ThresholdMlp {
    /// All-zero parameters; predicts a threshold of exactly 0.5.
    pub fn zeros(d: usize, hidden_dim: usize) -> Self {
        let input_dim = 2 * d;
        Self {
            input_dim,
            hidden_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        }
    }

    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer.
    pub fn init<R: Rng + ?Sized>(d: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(d, hidden_dim);
        let a1 = 1.0 / (mlp.input_dim as f64).sqrt();
        let a2 = 1.0 / (hidden_dim as f64).sqrt();
        mlp.w1
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-a1..=a1));
        mlp.b1
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-a1..=a1));
        mlp.w2
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-a2..=a2));
        mlp.b2 = rng.random_range(-a2..=a2);
        mlp
    }

    /// Rebuilds from explicit parameters (`w1` is `hidden x input`, row-major).
    pub fn from_parts(
        input_dim: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    ) -> Result<Self> {
        let hidden_dim = b1.len();
        if input_dim == 0 || !input_dim.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "MLP input width {input_dim} is not 2d"
            )));
        }
        if hidden_dim == 0 || w1.len() != hidden_dim * input_dim || w2.len() != hidden_dim {
            return Err(Error::InvalidInput("MLP parameter shapes disagree".into()));
        }
        if w1.iter().chain(&b1).chain(&w2).any(|v| !v.is_finite()) || !b2.is_finite() {
            return Err(Error::InvalidInput("MLP parameters must be finite".into()));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Descriptor dimension the network expects.
    pub fn descriptor_dim(&self) -> usize {
        self.input_dim / 2
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Parameters flattened as `w1, b1, w2, b2`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, rest) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = rest[0];
    }

    /// Hidden pre-activations for `input`.
    pub(crate) fn hidden_pre(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim);
        self.w1
            .chunks_exact(self.input_dim)
            .zip(&self.b1)
            .map(|(row, b)| dot(row, input) + b)
            .collect()
    }

    pub(crate) fn output_from_pre(&self, pre: &[f64]) -> f64 {
        pre.iter()
            .zip(&self.w2)
            .map(|(p, w)| leaky_relu(*p) * w)
            .sum::<f64>()
            + self.b2
    }

    /// Raw (pre-sigmoid) output.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.input_dim {
            return Err(Error::InvalidInput(format!(
                "MLP expects input width {}, got {}",
                self.input_dim,
                input.len()
            )));
        }
        Ok(self.output_from_pre(&self.hidden_pre(input)))
    }
}

pub(crate) fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Summed cosine between `lq` and the selected descriptors of each class.
pub fn class_similarity(lq: &LocalDescriptor, selection: &CdsSelection) -> Result<Vec<f64>> {
    (0..selection.way())
        .map(|c| {
            let mut sum = 0.0;
            for s in selection.class(c) {
                sum += cosine(lq, &s.descriptor)?;
            }
            Ok(sum)
        })
        .collect()
}

/// Discriminative score of one query descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscScore {
    pub value: f64,
    /// Class attaining the maximum normalized similarity.
    pub class: usize,
    /// Set when the similarities sum to zero and `value` fell back to `1/n`.
    pub degenerate: bool,
}

/// `max_c sims_c / sum(sims)`. A zero (or fully cancelling) denominator
/// yields `1/n` with the `degenerate` flag.
pub fn query_disc_score(sims: &[f64]) -> Result<DiscScore> {
    let n = sims.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {n}"
        )));
    }
    let total: f64 = sims.iter().sum();
    let magnitude: f64 = sims.iter().map(|s| s.abs()).sum();
    if magnitude == 0.0 || total.abs() <= 1e-12 * magnitude {
        return Ok(DiscScore {
            value: 1.0 / n as f64,
            class: argmax(sims),
            degenerate: true,
        });
    }
    let ratios: Vec<f64> = sims.iter().map(|s| s / total).collect();
    let class = argmax(&ratios);
    Ok(DiscScore {
        value: ratios[class],
        class,
        degenerate: false,
    })
}

/// Unit-length mean of the unit-normalized selected descriptors of all classes.
pub fn pooled_context(selection: &CdsSelection) -> Result<Vec<f64>> {
    let d = selection.dim();
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for l in selection.union() {
        for (a, u) in acc.iter_mut().zip(l.normalized()?) {
            *a += u;
        }
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    LocalDescriptor::new(acc)?
        .normalized()
        .map_err(|_| Error::DegenerateDescriptor("pooled support context has zero norm".into()))
}

/// `[unit(lq) ∥ context]`, the MLP input for one query descriptor.
pub fn threshold_input(lq: &LocalDescriptor, context: &[f64]) -> Result<Vec<f64>> {
    if lq.dim() != context.len() {
        return Err(Error::InvalidInput(format!(
            "query descriptor dimension {} does not match context {}",
            lq.dim(),
            context.len()
        )));
    }
    let mut x = lq.normalized()?;
    x.extend_from_slice(context);
    Ok(x)
}

/// Threshold in (0, 1) predicted for one query descriptor.
pub fn predict_threshold(
    mlp: &ThresholdMlp,
    lq: &LocalDescriptor,
    selection: &CdsSelection,
) -> Result<f64> {
    let context = pooled_context(selection)?;
    Ok(sigmoid(mlp.forward(&threshold_input(lq, &context)?)?))
}

/// Soft gate `1 / (1 + exp(-lambda (D - V)))`.
pub fn weights_map(disc: f64, threshold: f64, lambda: f64) -> f64 {
    sigmoid(lambda * (disc - threshold))
}

/// Everything computed for one query descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorTerms {
    pub sims: Vec<f64>,
    pub disc: DiscScore,
    pub threshold: f64,
    pub weight: f64,
}

/// How per-descriptor terms aggregate into class scores.
pub trait ScoreRule: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn class_scores(&self, terms: &[DescriptorTerms], way: usize) -> Vec<f64>;

    /// Partials of the loss with respect to one descriptor's `(threshold, weight)`,
    /// holding the other term fixed, given the loss gradient on the class scores.
    fn backprop(&self, term: &DescriptorTerms, d_scores: &[f64]) -> (f64, f64);
}

/// `Score_c = sum_i M_i * SIM_c(i)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightedSim;

/// `Score_c = sum over descriptors whose disc class is c of V_i * M_i`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Literal;

impl ScoreRule for WeightedSim {
    fn name(&self) -> &'static str {
        "weighted-sim"
    }

    fn class_scores(&self, terms: &[DescriptorTerms], way: usize) -> Vec<f64> {
        let mut scores = vec![0.0; way];
        for t in terms {
            for (s, sim) in scores.iter_mut().zip(&t.sims) {
                *s += t.weight * sim;
            }
        }
        scores
    }

    fn backprop(&self, term: &DescriptorTerms, d_scores: &[f64]) -> (f64, f64) {
        let d_weight = d_scores.iter().zip(&term.sims).map(|(g, s)| g * s).sum();
        (0.0, d_weight)
    }
}

impl ScoreRule for Literal {
    fn name(&self) -> &'static str {
        "literal"
    }

    fn class_scores(&self, terms: &[DescriptorTerms], way: usize) -> Vec<f64> {
        let mut scores = vec![0.0; way];
        for t in terms {
            scores[t.disc.class] += t.threshold * t.weight;
        }
        scores
    }

    fn backprop(&self, term: &DescriptorTerms, d_scores: &[f64]) -> (f64, f64) {
        let g = d_scores[term.disc.class];
        (g * term.weight, g * term.threshold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub terms: Vec<DescriptorTerms>,
    pub scores: Vec<f64>,
    pub posterior: Vec<f64>,
    pub label: usize,
}

impl QueryResult {
    pub fn predicted(&self) -> usize {
        argmax(&self.posterior)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEvaluation {
    pub queries: Vec<QueryResult>,
    /// Mean cross-entropy over the episode's query images.
    pub loss: f64,
}

impl QueryEvaluation {
    pub fn correct(&self) -> usize {
        self.queries
            .iter()
            .filter(|q| q.predicted() == q.label)
            .count()
    }
}

/// Per-descriptor terms for one query image.
pub fn descriptor_terms(
    query: &[LocalDescriptor],
    selection: &CdsSelection,
    context: &[f64],
    mlp: &ThresholdMlp,
    lambda: f64,
) -> Result<Vec<DescriptorTerms>> {
    if mlp.input_dim() != 2 * selection.dim() {
        return Err(Error::InvalidInput(format!(
            "MLP input width {} does not match 2 x descriptor dimension {}",
            mlp.input_dim(),
            selection.dim()
        )));
    }
    query
        .iter()
        .map(|lq| {
            let sims = class_similarity(lq, selection)?;
            let disc = query_disc_score(&sims)?;
            let threshold = sigmoid(mlp.forward(&threshold_input(lq, context)?)?);
            let weight = weights_map(disc.value, threshold, lambda);
            Ok(DescriptorTerms {
                sims,
                disc,
                threshold,
                weight,
            })
        })
        .collect()
}

/// `-log softmax(scores)[label]` via log-sum-exp, so a saturated posterior
/// still yields a small positive loss instead of `-ln(1.0) = 0`.
fn cross_entropy(scores: &[f64], label: usize) -> f64 {
    let top = argmax(scores);
    let max = scores[top];
    let rest: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, s)| (s - max).exp())
        .sum();
    (max - scores[label]) + rest.ln_1p()
}

/// Class scores, posteriors, and loss for every query of the episode.
pub fn episode_scores(
    episode: &Episode,
    selection: &CdsSelection,
    mlp: &ThresholdMlp,
    lambda: f64,
    rule: &dyn ScoreRule,
) -> Result<QueryEvaluation> {
    if selection.way() != episode.way() {
        return Err(Error::InvalidInput(format!(
            "selection covers {} classes, episode has {}",
            selection.way(),
            episode.way()
        )));
    }
    if episode.queries().is_empty() {
        return Err(Error::InvalidInput("episode has no queries".into()));
    }
    let context = pooled_context(selection)?;
    let mut queries = Vec::with_capacity(episode.queries().len());
    let mut loss = 0.0;
    for q in episode.queries() {
        let terms = descriptor_terms(q.set.descriptors(), selection, &context, mlp, lambda)?;
        let scores = rule.class_scores(&terms, episode.way());
        let posterior = softmax(&scores)?;
        loss += cross_entropy(&scores, q.label);
        queries.push(QueryResult {
            terms,
            scores,
            posterior,
            label: q.label,
        });
    }
    loss /= queries.len() as f64;
    Ok(QueryEvaluation { queries, loss })
}
