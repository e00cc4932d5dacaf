//! Preference losses and a tabular policy to train them on.
//!
//! The losses only need a log-probability oracle, [`PolicyEvaluator`], which
//! returns the total log-probability of a response given a context. Contexts
//! and responses are dense integer ids; mapping real samples onto ids is the
//! caller's job (see [`TabularDataset`]).
//!
//! For a triple with chosen and rejected elements the implicit reward margin is
//!
//! ```text
//! m = [log pi(y+|x+) - log ref(y+|x+)] - [log pi(y-|x-) - log ref(y-|x-)]
//! ```
//!
//! where text preferences share the context (`x+ = x-`) and visual preferences
//! share the response (`y+ = y-`). Each item contributes `softplus(-beta * m)`.

use std::collections::HashMap;
use std::io::{self, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{PreferenceKind, PreferenceSample};
use crate::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("empty preference batch")]
    EmptyBatch,
    #[error("no log-probability for context {context}, response {response}")]
    UnknownPair { context: usize, response: usize },
    #[error("reward lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("learning rate must be positive")]
    InvalidLearningRate,
    #[error("training diverged at step {step}")]
    Diverged { step: usize, trace: Vec<TraceRow> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T> {
    pub beta: T,
    pub lambda: T,
    pub reduction: Reduction,
}

impl<T: Scalar> LossConfig<T> {
    pub fn new(beta: T, lambda: T) -> Result<Self, LossError> {
        if !(beta > T::zero()) || !beta.is_finite() {
            return Err(LossError::InvalidConfig(format!("beta must be > 0, got {beta}")));
        }
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(LossError::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(LossConfig { beta, lambda, reduction: Reduction::Mean })
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig { beta: T::from_f64(0.7).unwrap(), lambda: T::one(), reduction: Reduction::Mean }
    }
}

/// Total log-probability of `response` given `context`.
pub trait PolicyEvaluator<T> {
    fn log_prob(&self, context: usize, response: usize) -> Result<T, LossError>;
}

impl<T, P: PolicyEvaluator<T> + ?Sized> PolicyEvaluator<T> for &P {
    fn log_prob(&self, context: usize, response: usize) -> Result<T, LossError> {
        (**self).log_prob(context, response)
    }
}

/// Fixed grounded context, grounded answer preferred over a hallucinated one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPreference {
    pub context: usize,
    pub chosen: usize,
    pub rejected: usize,
}

/// Fixed answer, correct context preferred over a counterfactual one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualPreference {
    pub chosen_context: usize,
    pub rejected_context: usize,
    pub answer: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceBatch {
    pub t_items: Vec<TextPreference>,
    pub v_items: Vec<VisualPreference>,
}

impl PreferenceBatch {
    pub fn len(&self) -> usize {
        self.t_items.len() + self.v_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_only(&self) -> Self {
        PreferenceBatch { t_items: self.t_items.clone(), v_items: Vec::new() }
    }

    pub fn visual_only(&self) -> Self {
        PreferenceBatch { t_items: Vec::new(), v_items: self.v_items.clone() }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid without overflow for large `|x|`.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log pi_theta(y|x) - log pi_ref(y|x)`.
pub fn implicit_reward<T: Scalar>(
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
    context: usize,
    response: usize,
) -> Result<T, LossError> {
    Ok(theta.log_prob(context, response)? - reference.log_prob(context, response)?)
}

fn reduce<T: Scalar>(sum: T, n: usize, reduction: Reduction) -> T {
    match reduction {
        Reduction::Mean => sum / T::from_usize(n).unwrap(),
        Reduction::Sum => sum,
    }
}

/// Batch mean of `softplus(-beta * (r+ - r-))`.
pub fn dpo_loss<T: Scalar>(rewards_plus: &[T], rewards_minus: &[T], beta: T) -> Result<T, LossError> {
    dpo_loss_with(rewards_plus, rewards_minus, beta, Reduction::Mean)
}

pub fn dpo_loss_with<T: Scalar>(
    rewards_plus: &[T],
    rewards_minus: &[T],
    beta: T,
    reduction: Reduction,
) -> Result<T, LossError> {
    if rewards_plus.len() != rewards_minus.len() {
        return Err(LossError::LengthMismatch(rewards_plus.len(), rewards_minus.len()));
    }
    if rewards_plus.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sum = rewards_plus.iter().zip(rewards_minus).fold(T::zero(), |acc, (&p, &m)| acc + softplus(-(beta * (p - m))));
    Ok(reduce(sum, rewards_plus.len(), reduction))
}

fn text_rewards<T: Scalar>(
    items: &[TextPreference],
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
) -> Result<(Vec<T>, Vec<T>), LossError> {
    let mut plus = Vec::with_capacity(items.len());
    let mut minus = Vec::with_capacity(items.len());
    for it in items {
        plus.push(implicit_reward(theta, reference, it.context, it.chosen)?);
        minus.push(implicit_reward(theta, reference, it.context, it.rejected)?);
    }
    Ok((plus, minus))
}

fn visual_rewards<T: Scalar>(
    items: &[VisualPreference],
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
) -> Result<(Vec<T>, Vec<T>), LossError> {
    let mut plus = Vec::with_capacity(items.len());
    let mut minus = Vec::with_capacity(items.len());
    for it in items {
        plus.push(implicit_reward(theta, reference, it.chosen_context, it.answer)?);
        minus.push(implicit_reward(theta, reference, it.rejected_context, it.answer)?);
    }
    Ok((plus, minus))
}

/// Text-preference loss: same context, grounded vs hallucinated answer.
pub fn tpref_loss<T: Scalar>(
    items: &[TextPreference],
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
    beta: T,
) -> Result<T, LossError> {
    tpref_loss_with(items, theta, reference, beta, Reduction::Mean)
}

fn tpref_loss_with<T: Scalar>(
    items: &[TextPreference],
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
    beta: T,
    reduction: Reduction,
) -> Result<T, LossError> {
    let (p, m) = text_rewards(items, theta, reference)?;
    dpo_loss_with(&p, &m, beta, reduction)
}

/// Visual-preference loss: same answer, correct vs counterfactual context.
pub fn vpref_loss<T: Scalar>(
    items: &[VisualPreference],
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
    beta: T,
) -> Result<T, LossError> {
    vpref_loss_with(items, theta, reference, beta, Reduction::Mean)
}

fn vpref_loss_with<T: Scalar>(
    items: &[VisualPreference],
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
    beta: T,
    reduction: Reduction,
) -> Result<T, LossError> {
    let (p, m) = visual_rewards(items, theta, reference)?;
    dpo_loss_with(&p, &m, beta, reduction)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixLoss<T> {
    pub total: T,
    pub t_loss: T,
    pub v_loss: T,
}

/// `t_loss + lambda * v_loss`, each component reduced over its own items.
///
/// An empty item list contributes 0; both empty is an error.
pub fn mixdpo_loss<T: Scalar>(
    batch: &PreferenceBatch,
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
    config: &LossConfig<T>,
) -> Result<MixLoss<T>, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let t_loss = if batch.t_items.is_empty() {
        T::zero()
    } else {
        tpref_loss_with(&batch.t_items, theta, reference, config.beta, config.reduction)?
    };
    let v_loss = if batch.v_items.is_empty() {
        T::zero()
    } else {
        vpref_loss_with(&batch.v_items, theta, reference, config.beta, config.reduction)?
    };
    Ok(MixLoss { total: t_loss + config.lambda * v_loss, t_loss, v_loss })
}

/// Mean unscaled reward margin over every item in the batch.
pub fn mean_margin<T: Scalar>(
    batch: &PreferenceBatch,
    theta: &impl PolicyEvaluator<T>,
    reference: &impl PolicyEvaluator<T>,
) -> Result<T, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let (tp, tm) = text_rewards(&batch.t_items, theta, reference)?;
    let (vp, vm) = visual_rewards(&batch.v_items, theta, reference)?;
    let sum = tp.iter().zip(&tm).chain(vp.iter().zip(&vm)).fold(T::zero(), |acc, (&p, &m)| acc + (p - m));
    Ok(sum / T::from_usize(batch.len()).unwrap())
}

/// Logit table with one softmax over responses per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy<T> {
    n_contexts: usize,
    n_responses: usize,
    logits: Vec<T>,
}

impl<T: Scalar> ToyPolicy<T> {
    pub fn zeros(n_contexts: usize, n_responses: usize) -> Self {
        ToyPolicy { n_contexts, n_responses, logits: vec![T::zero(); n_contexts * n_responses] }
    }

    /// Row-major `logits[context * n_responses + response]`.
    pub fn from_logits(n_contexts: usize, n_responses: usize, logits: Vec<T>) -> Self {
        assert_eq!(logits.len(), n_contexts * n_responses, "logit table shape");
        ToyPolicy { n_contexts, n_responses, logits }
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(n_contexts: usize, n_responses: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let logits =
            (0..n_contexts * n_responses).map(|_| T::from_f64(rng.random_range(-scale..=scale)).unwrap()).collect();
        ToyPolicy { n_contexts, n_responses, logits }
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }

    pub fn logit(&self, context: usize, response: usize) -> T {
        self.logits[context * self.n_responses + response]
    }

    pub fn set_logit(&mut self, context: usize, response: usize, value: T) {
        self.logits[context * self.n_responses + response] = value;
    }

    fn row(&self, context: usize) -> &[T] {
        &self.logits[context * self.n_responses..(context + 1) * self.n_responses]
    }

    fn log_normalizer(&self, context: usize) -> T {
        let row = self.row(context);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().fold(T::zero(), |acc, &l| acc + (l - max).exp());
        max + sum.ln()
    }

    /// Softmax probabilities for one context.
    pub fn probs(&self, context: usize) -> Vec<T> {
        let lse = self.log_normalizer(context);
        self.row(context).iter().map(|&l| (l - lse).exp()).collect()
    }
}

impl<T: Scalar> PolicyEvaluator<T> for ToyPolicy<T> {
    fn log_prob(&self, context: usize, response: usize) -> Result<T, LossError> {
        if context >= self.n_contexts || response >= self.n_responses {
            return Err(LossError::UnknownPair { context, response });
        }
        Ok(self.logit(context, response) - self.log_normalizer(context))
    }
}

/// Gradient of the MixDPO objective with respect to every policy logit,
/// laid out like [`ToyPolicy::logits`].
pub fn grad_mixdpo<T: Scalar>(
    batch: &PreferenceBatch,
    policy: &ToyPolicy<T>,
    reference: &impl PolicyEvaluator<T>,
    config: &LossConfig<T>,
) -> Result<Vec<T>, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let nr = policy.n_responses;
    let mut grad = vec![T::zero(); policy.logits.len()];
    let mut probs_cache: HashMap<usize, Vec<T>> = HashMap::new();
    // d softplus(-beta m) / dm
    let dloss_dmargin = |m: T| -config.beta * sigmoid(-config.beta * m);

    if !batch.t_items.is_empty() {
        let weight = reduce(T::one(), batch.t_items.len(), config.reduction);
        let (plus, minus) = text_rewards(&batch.t_items, policy, reference)?;
        for (it, (p, m)) in batch.t_items.iter().zip(plus.into_iter().zip(minus)) {
            // Softmax terms of chosen and rejected cancel within one context.
            let g = weight * dloss_dmargin(p - m);
            grad[it.context * nr + it.chosen] = grad[it.context * nr + it.chosen] + g;
            grad[it.context * nr + it.rejected] = grad[it.context * nr + it.rejected] - g;
        }
    }

    if !batch.v_items.is_empty() && config.lambda != T::zero() {
        let weight = config.lambda * reduce(T::one(), batch.v_items.len(), config.reduction);
        let (plus, minus) = visual_rewards(&batch.v_items, policy, reference)?;
        for (it, (p, m)) in batch.v_items.iter().zip(plus.into_iter().zip(minus)) {
            let g = weight * dloss_dmargin(p - m);
            for (ctx, sign) in [(it.chosen_context, g), (it.rejected_context, -g)] {
                let probs = probs_cache.entry(ctx).or_insert_with(|| policy.probs(ctx));
                for r in 0..nr {
                    let delta = if r == it.answer { T::one() } else { T::zero() };
                    grad[ctx * nr + r] = grad[ctx * nr + r] + sign * (delta - probs[r]);
                }
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub t_loss: f64,
    pub v_loss: f64,
    pub mean_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn first(&self) -> &TraceRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace has at least the initial row")
    }

    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "step,total,t_loss,v_loss,mean_margin")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.step, r.total, r.t_loss, r.v_loss, r.mean_margin)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions<T> {
    pub steps: usize,
    pub lr: T,
    pub config: LossConfig<T>,
    pub seed: u64,
    /// Items per step; `None` uses the whole batch every step.
    pub minibatch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub policy: ToyPolicy<T>,
    pub trace: TrainingTrace,
}

/// Plain gradient descent on a tabular policy initialised from the reference.
///
/// The trace has `steps + 1` rows: the loss before each update and the final
/// loss after the last one, always measured on the full dataset.
pub fn train_toy<T: Scalar>(
    dataset: &PreferenceBatch,
    reference: &ToyPolicy<T>,
    options: &TrainOptions<T>,
) -> Result<TrainOutcome<T>, LossError> {
    if !(options.lr >= T::zero()) {
        return Err(LossError::InvalidLearningRate);
    }
    if dataset.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut policy = reference.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut rows = Vec::with_capacity(options.steps + 1);

    for step in 0..=options.steps {
        let loss = mixdpo_loss(dataset, &policy, reference, &options.config)?;
        let margin = mean_margin(dataset, &policy, reference)?;
        let row = TraceRow {
            step,
            total: loss.total.to_f64().unwrap(),
            t_loss: loss.t_loss.to_f64().unwrap(),
            v_loss: loss.v_loss.to_f64().unwrap(),
            mean_margin: margin.to_f64().unwrap(),
        };
        let finite = row.total.is_finite() && row.mean_margin.is_finite();
        rows.push(row);
        if !finite {
            return Err(LossError::Diverged { step, trace: rows });
        }
        if step == options.steps {
            break;
        }
        let batch = match options.minibatch {
            Some(k) if k < dataset.len() => sample_minibatch(dataset, k, &mut rng),
            _ => dataset.clone(),
        };
        let grad = grad_mixdpo(&batch, &policy, reference, &options.config)?;
        for (w, g) in policy.logits.iter_mut().zip(grad) {
            *w = *w - options.lr * g;
        }
    }
    Ok(TrainOutcome { policy, trace: TrainingTrace { rows } })
}

fn sample_minibatch(dataset: &PreferenceBatch, k: usize, rng: &mut ChaCha8Rng) -> PreferenceBatch {
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(rng);
    let nt = dataset.t_items.len();
    let mut out = PreferenceBatch::default();
    let mut picked = idx[..k].to_vec();
    picked.sort_unstable();
    for i in picked {
        if i < nt {
            out.t_items.push(dataset.t_items[i]);
        } else {
            out.v_items.push(dataset.v_items[i - nt]);
        }
    }
    out
}

/// Seeded synthetic preference data for exercising the trainer.
pub mod synthetic {
    use super::*;

    /// Train and held-out batches drawn from one generator.
    #[derive(Debug, Clone)]
    pub struct SyntheticSet<T> {
        pub reference: ToyPolicy<T>,
        pub train: PreferenceBatch,
        pub holdout: PreferenceBatch,
    }

    /// Context `c` is grounded in response `c`. Text items contrast the
    /// grounded response with a random other one; visual items contrast the
    /// grounded context with a random counterfactual context. Held-out visual
    /// items reuse the grounded pair with counterfactuals not seen in training.
    pub fn preference_set<T: Scalar>(n_contexts: usize, seed: u64) -> SyntheticSet<T> {
        assert!(n_contexts >= 3, "need at least three contexts");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = ToyPolicy::random(n_contexts, n_contexts, 1.0, &mut rng);
        let mut train = PreferenceBatch::default();
        let mut holdout = PreferenceBatch::default();
        for c in 0..n_contexts {
            let others: Vec<usize> = (0..n_contexts).filter(|&o| o != c).collect();
            let wrong = *others.choose(&mut rng).unwrap();
            train.t_items.push(TextPreference { context: c, chosen: c, rejected: wrong });
            let mut cf = others.clone();
            cf.shuffle(&mut rng);
            train.v_items.push(VisualPreference { chosen_context: c, rejected_context: cf[0], answer: c });
            holdout.v_items.push(VisualPreference { chosen_context: c, rejected_context: cf[1], answer: c });
        }
        SyntheticSet { reference, train, holdout }
    }

    /// Mean of `log pi(a|x+) - log pi(a|x-)` over visual items.
    pub fn visual_gap<T: Scalar>(items: &[VisualPreference], policy: &impl PolicyEvaluator<T>) -> Result<T, LossError> {
        if items.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        let mut sum = T::zero();
        for it in items {
            sum = sum + policy.log_prob(it.chosen_context, it.answer)?
                - policy.log_prob(it.rejected_context, it.answer)?;
        }
        Ok(sum / T::from_usize(items.len()).unwrap())
    }
}

/// Samples mapped onto dense context and response ids.
#[derive(Debug, Clone, Default)]
pub struct TabularDataset {
    pub batch: PreferenceBatch,
    pub contexts: Vec<String>,
    pub responses: Vec<String>,
}

impl TabularDataset {
    /// A context is the (video context, question) pair; a response is the
    /// answer text. Ids follow first appearance in `samples`.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PreferenceSample>) -> Self {
        let mut ds = TabularDataset::default();
        let mut ctx_ids: HashMap<String, usize> = HashMap::new();
        let mut resp_ids: HashMap<String, usize> = HashMap::new();
        fn intern(map: &mut HashMap<String, usize>, names: &mut Vec<String>, key: String) -> usize {
            *map.entry(key.clone()).or_insert_with(|| {
                names.push(key);
                names.len() - 1
            })
        }
        for s in samples {
            let ctx_key =
                |ctx: &crate::model::VideoContext| serde_json::to_string(&(ctx, &s.question)).expect("serializable");
            let chosen_ctx = intern(&mut ctx_ids, &mut ds.contexts, ctx_key(&s.chosen_context));
            let answer = intern(&mut resp_ids, &mut ds.responses, s.chosen_answer.clone());
            match (s.kind, &s.rejected_answer, &s.rejected_context) {
                (PreferenceKind::TPref, Some(rej), _) => {
                    let rejected = intern(&mut resp_ids, &mut ds.responses, rej.clone());
                    ds.batch.t_items.push(TextPreference { context: chosen_ctx, chosen: answer, rejected });
                }
                (PreferenceKind::VPref, _, Some(rc)) => {
                    let rejected_context = intern(&mut ctx_ids, &mut ds.contexts, ctx_key(rc));
                    ds.batch.v_items.push(VisualPreference { chosen_context: chosen_ctx, rejected_context, answer });
                }
                _ => tracing::warn!(sample_id = %s.sample_id, "skipping malformed sample"),
            }
        }
        ds
    }
}
