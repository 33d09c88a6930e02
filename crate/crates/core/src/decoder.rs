//! Single-pass attention-guided context decoding.
//!
//! Each step makes exactly one oracle call. The detector marks which context
//! tokens the model is currently using, their attention ratios are pooled into
//! a utilization distribution over vocabulary ids, that distribution is cut
//! down to ids already in the model's own top-R, and the survivors are added
//! to the next-token distribution scaled by `alpha` times its normalized
//! entropy. The emitted token is the argmax of the adjusted distribution.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detector::{head_weights, UtilizationDetector};
use crate::error::{invalid, Error, Result};
use crate::features::{
    context_mask, context_ratio_matrix, AttentionSnapshot, ContextSpan, ModelGeometry, PromptLayout,
};
use crate::math::{LogitVector, TokenDistribution, TokenId};

/// One forward pass: next-token logits plus the current position's attention.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: LogitVector,
    pub attention: AttentionSnapshot,
}

/// Abstraction of an autoregressive model. `step` receives the whole prefix
/// (prompt followed by every token emitted so far).
pub trait StepOracle {
    fn geometry(&self) -> ModelGeometry;
    fn vocab_size(&self) -> usize;
    fn step(&mut self, prefix: &[TokenId]) -> Result<StepOutput>;
    /// Number of `step` invocations so far.
    fn calls(&self) -> usize;
}

impl<T: StepOracle + ?Sized> StepOracle for &mut T {
    fn geometry(&self) -> ModelGeometry {
        (**self).geometry()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn step(&mut self, prefix: &[TokenId]) -> Result<StepOutput> {
        (**self).step(prefix)
    }
    fn calls(&self) -> usize {
        (**self).calls()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub alpha: f64,
    pub top_rank: usize,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_token_ids: BTreeSet<TokenId>,
    #[serde(default)]
    pub newline_stop: bool,
    #[serde(default)]
    pub newline_token: Option<TokenId>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::pretrained()
    }
}

impl DecoderConfig {
    /// `alpha = 2`, top-10 restriction.
    pub fn pretrained() -> Self {
        Self {
            alpha: 2.0,
            top_rank: 10,
            max_new_tokens: 32,
            stop_token_ids: BTreeSet::new(),
            newline_stop: false,
            newline_token: None,
        }
    }

    /// `alpha = 4`, top-10 restriction.
    pub fn instruction_tuned() -> Self {
        Self {
            alpha: 4.0,
            ..Self::pretrained()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha must be finite and non-negative"));
        }
        if self.top_rank == 0 {
            return Err(invalid("top_rank must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens must be positive"));
        }
        if self.newline_stop && self.newline_token.is_none() {
            return Err(invalid("newline_stop requires newline_token"));
        }
        Ok(())
    }
}

/// Sparse distribution over vocabulary ids. Either empty or summing to one
/// (before any top-rank restriction).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilizationDistribution {
    entries: BTreeMap<TokenId, f64>,
}

impl UtilizationDistribution {
    pub fn from_entries(entries: impl IntoIterator<Item = (TokenId, f64)>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.entries.get(&id).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }
}

/// Scores aligned with `span.positions()`: zero for tokens the detector
/// rejects, otherwise the weight-pooled attention ratio.
pub fn utilization_scores(
    snapshot: &AttentionSnapshot,
    span: &ContextSpan,
    detector: &UtilizationDetector,
) -> Result<Vec<f64>> {
    let weights = head_weights(detector)?;
    scores_with_weights(snapshot, span, detector, &weights)
}

fn scores_with_weights(
    snapshot: &AttentionSnapshot,
    span: &ContextSpan,
    detector: &UtilizationDetector,
    weights: &[f64],
) -> Result<Vec<f64>> {
    let ratios = context_ratio_matrix(snapshot, span, &detector.head_order)?;
    ratios
        .iter()
        .map(|r| {
            Ok(if detector.classify_values(r)? {
                r.iter().zip(weights).map(|(x, w)| x * w).sum()
            } else {
                0.0
            })
        })
        .collect()
}

/// Pools scores per vocabulary id and normalizes. All-zero scores give the
/// empty distribution.
pub fn utilization_distribution(
    scores: &[f64],
    span: &ContextSpan,
) -> Result<UtilizationDistribution> {
    if scores.len() != span.len() {
        return Err(invalid(format!(
            "{} scores for a context of {} positions",
            scores.len(),
            span.len()
        )));
    }
    if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(invalid(
            "utilization scores must be finite and non-negative",
        ));
    }
    let mut pooled: BTreeMap<TokenId, f64> = BTreeMap::new();
    for (&s, &id) in scores.iter().zip(span.token_ids()) {
        if s > 0.0 {
            *pooled.entry(id).or_insert(0.0) += s;
        }
    }
    let total: f64 = pooled.values().sum();
    if total <= 0.0 {
        return Ok(UtilizationDistribution::default());
    }
    for v in pooled.values_mut() {
        *v /= total;
    }
    Ok(UtilizationDistribution { entries: pooled })
}

/// Drops ids outside the top-R of `dist`. Survivors keep their mass.
pub fn top_rank_restrict(
    u: &UtilizationDistribution,
    dist: &TokenDistribution,
    top_rank: usize,
) -> Result<UtilizationDistribution> {
    if u.is_empty() {
        return Ok(UtilizationDistribution::default());
    }
    let allowed: BTreeSet<TokenId> = dist
        .top_r(top_rank.min(dist.vocab_size()))?
        .into_iter()
        .collect();
    Ok(UtilizationDistribution {
        entries: u
            .entries
            .iter()
            .filter(|(id, _)| allowed.contains(id))
            .map(|(&k, &v)| (k, v))
            .collect(),
    })
}

/// `P + alpha * H_norm(P) * U_top`, before renormalization.
pub fn adjust_raw(
    p: &TokenDistribution,
    u_top: &UtilizationDistribution,
    alpha: f64,
) -> Result<Vec<f64>> {
    let mut raw = p.probs().to_vec();
    if u_top.is_empty() {
        return Ok(raw);
    }
    let scale = alpha * p.normalized_entropy()?;
    for (id, u) in u_top.iter() {
        let slot = raw
            .get_mut(id as usize)
            .ok_or_else(|| invalid(format!("utilized token {id} outside vocabulary")))?;
        *slot += scale * u;
    }
    Ok(raw)
}

/// Adjusted next-token distribution, renormalized to sum to one.
pub fn adjust_distribution(
    p: &TokenDistribution,
    u_top: &UtilizationDistribution,
    alpha: f64,
) -> Result<TokenDistribution> {
    if u_top.is_empty() {
        return Ok(p.clone());
    }
    Ok(TokenDistribution::from_unnormalized(adjust_raw(
        p, u_top, alpha,
    )?))
}

/// Argmax with lowest-id tie-breaking over any real vector.
pub fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best as TokenId
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Greedy,
    Dagcd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub entropy: f64,
    pub msp: f64,
    /// Top-1 of the unadjusted distribution.
    pub greedy_token: TokenId,
    /// Top-1 of the adjusted distribution, whether or not it was used.
    pub adjusted_token: TokenId,
    pub chosen_token: TokenId,
    pub adjusted: bool,
    /// Ids carrying utilization mass before the top-rank cut.
    pub utilized_tokens: Vec<TokenId>,
    /// `U_top` entries that were added to the distribution.
    pub boosted: Vec<(TokenId, f64)>,
    pub newline_top1: bool,
}

impl StepDiagnostics {
    pub fn flipped(&self) -> bool {
        self.chosen_token != self.greedy_token
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Outcome {
    StopToken,
    Newline,
    MaxTokens,
    /// Replay could not serve `step` because an earlier emitted token
    /// differs from the recording.
    Diverged {
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub policy: Policy,
    pub token_ids: Vec<TokenId>,
    pub per_step: Vec<StepDiagnostics>,
    pub oracle_calls: usize,
    pub outcome: Outcome,
}

impl GenerationResult {
    /// Steps where the adjustment changed the emitted token.
    pub fn flip_steps(&self) -> Vec<usize> {
        self.per_step
            .iter()
            .filter(|d| d.flipped())
            .map(|d| d.step)
            .collect()
    }
}

struct Guide<'a> {
    detector: &'a UtilizationDetector,
    weights: Vec<f64>,
}

/// Runs the attention-guided decoding loop.
pub fn decode<O: StepOracle>(
    oracle: &mut O,
    layout: &PromptLayout,
    detector: &UtilizationDetector,
    config: &DecoderConfig,
) -> Result<GenerationResult> {
    if detector.geometry != oracle.geometry() {
        return Err(Error::GeometryMismatch {
            detector: detector.geometry.to_string(),
            oracle: oracle.geometry().to_string(),
        });
    }
    let guide = Guide {
        detector,
        weights: head_weights(detector)?,
    };
    run(oracle, layout, Some(guide), config, Policy::Dagcd)
}

/// Plain greedy decoding over the same oracle contract.
pub fn greedy_decode<O: StepOracle>(
    oracle: &mut O,
    layout: &PromptLayout,
    config: &DecoderConfig,
) -> Result<GenerationResult> {
    run(oracle, layout, None, config, Policy::Greedy)
}

fn run<O: StepOracle>(
    oracle: &mut O,
    layout: &PromptLayout,
    guide: Option<Guide<'_>>,
    config: &DecoderConfig,
    policy: Policy,
) -> Result<GenerationResult> {
    config.validate()?;
    let span = context_mask(layout)?;
    let mut prefix = layout.tokens.clone();
    let mut emitted = Vec::new();
    let mut per_step = Vec::new();
    let mut calls = 0;
    let vocab = oracle.vocab_size();

    let outcome = loop {
        let step = emitted.len();
        let out = match oracle.step(&prefix) {
            Ok(out) => out,
            Err(Error::Divergence { step }) => break Outcome::Diverged { step },
            Err(e @ Error::TraceExhausted { .. }) => return Err(e),
            Err(e) => {
                return Err(Error::Oracle {
                    step,
                    source: Box::new(e),
                })
            }
        };
        calls += 1;
        if out.logits.len() != vocab {
            return Err(Error::Oracle {
                step,
                source: Box::new(invalid(format!(
                    "{} logits for a vocabulary of {vocab}",
                    out.logits.len()
                ))),
            });
        }
        let p = out.logits.softmax();
        let entropy = p.normalized_entropy()?;
        let greedy_token = p.argmax();
        let newline_top1 = config.newline_token == Some(greedy_token);

        let (utilized_tokens, u_top) = match &guide {
            Some(g) => {
                let scores = scores_with_weights(&out.attention, &span, g.detector, &g.weights)
                    .map_err(|e| Error::Oracle {
                        step,
                        source: Box::new(e),
                    })?;
                let u = utilization_distribution(&scores, &span)?;
                let ids = u.iter().map(|(id, _)| id).collect();
                (ids, top_rank_restrict(&u, &p, config.top_rank)?)
            }
            None => (Vec::new(), UtilizationDistribution::default()),
        };
        let adjusted_token = argmax(&adjust_raw(&p, &u_top, config.alpha)?);
        let terminate = config.newline_stop && newline_top1;
        let adjusted = !u_top.is_empty() && !terminate;
        let chosen = if adjusted {
            adjusted_token
        } else {
            greedy_token
        };

        per_step.push(StepDiagnostics {
            step,
            entropy,
            msp: p.max_prob(),
            greedy_token,
            adjusted_token,
            chosen_token: chosen,
            adjusted,
            utilized_tokens,
            boosted: u_top.iter().collect(),
            newline_top1,
        });
        emitted.push(chosen);
        prefix.push(chosen);

        if terminate {
            break Outcome::Newline;
        }
        if config.stop_token_ids.contains(&chosen) {
            break Outcome::StopToken;
        }
        if emitted.len() >= config.max_new_tokens {
            break Outcome::MaxTokens;
        }
    };

    Ok(GenerationResult {
        policy,
        token_ids: emitted,
        per_step,
        oracle_calls: calls,
        outcome,
    })
}
