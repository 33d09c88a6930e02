//! Planted answer steps where greedy decoding provably picks a distractor
//! while the gold answer sits in the context and in the model's top ranks.
//!
//! The answer step is built directly rather than searched for: its logits
//! fix the rank of every token, and its attention puts a chosen share of
//! every head's context mass on the gold token's position. The flip
//! inequality is then checked numerically with the real detector before the
//! scenario is handed out.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ToyConfig, ToyTransformer};
use crate::decoder::{
    adjust_raw, argmax, top_rank_restrict, utilization_distribution, utilization_scores,
    StepOracle, StepOutput,
};
use crate::detector::UtilizationDetector;
use crate::error::{invalid, Error, Result};
use crate::features::{context_mask, AttentionSnapshot, ModelGeometry, PromptLayout, Role};
use crate::math::{LogitVector, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub toy: ToyConfig,
    pub template_len: usize,
    pub context_len: usize,
    pub question_len: usize,
    /// Rank of the gold token in the unadjusted answer distribution (>= 2).
    pub gold_rank: usize,
    pub alpha: f64,
    pub top_rank: usize,
    /// Nominal `logit(distractor) - logit(gold)`; each scenario scales it by
    /// a factor drawn from [0.75, 1.25).
    pub logit_margin: f64,
    /// Share of each head's context mass placed on the gold position.
    pub attention_peak: f64,
    /// Share of each row placed on the sink at position 0.
    pub sink_mass: f64,
    /// Required slack in the flip inequality.
    pub min_flip_margin: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            template_len: 3,
            context_len: 12,
            question_len: 3,
            gold_rank: 2,
            alpha: 2.0,
            top_rank: 10,
            logit_margin: 0.5,
            attention_peak: 0.8,
            sink_mass: 0.5,
            min_flip_margin: 0.05,
        }
    }
}

impl PlantConfig {
    fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        let prompt_len = self.template_len + self.context_len + self.question_len;
        if self.template_len == 0 || self.context_len < 2 {
            return Err(invalid(
                "need a sink template token and at least 2 context tokens",
            ));
        }
        if prompt_len > self.toy.max_seq_len {
            return Err(invalid("prompt longer than the model's max_seq_len"));
        }
        if self.context_len + 1 > self.toy.vocab_size {
            return Err(invalid("vocabulary too small for distinct context tokens"));
        }
        if self.gold_rank < 2 || self.gold_rank > self.toy.vocab_size {
            return Err(invalid(format!(
                "gold_rank {} outside 2..=vocab_size",
                self.gold_rank
            )));
        }
        if self.top_rank == 0 {
            return Err(invalid("top_rank must be at least 1"));
        }
        if !(self.logit_margin > 0.0) {
            return Err(invalid("logit_margin must be positive"));
        }
        if !(self.attention_peak > 0.0 && self.attention_peak < 1.0) {
            return Err(invalid("attention_peak must lie in (0, 1)"));
        }
        if !(self.sink_mass >= 0.0 && self.sink_mass < 1.0) {
            return Err(invalid("sink_mass must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedScenario {
    pub layout: PromptLayout,
    pub gold_token: TokenId,
    pub distractor_token: TokenId,
    pub gold_position: usize,
    pub gold_rank: usize,
    pub attention_margin: f64,
    pub logit_margin: f64,
    /// `alpha * H_norm(P) * u_gold - (P(distractor) - P(gold))` with the
    /// top-rank restriction applied.
    pub flip_margin: f64,
    /// Whether the gold token is inside the top-R and should be recovered.
    pub expects_flip: bool,
}

/// A toy model whose answer step (the first generated token) is replaced by
/// the planted logits and attention.
#[derive(Debug, Clone)]
pub struct PlantedOracle {
    model: ToyTransformer,
    prompt_len: usize,
    answer_logits: LogitVector,
    answer_attention: AttentionSnapshot,
    calls: usize,
}

impl StepOracle for PlantedOracle {
    fn geometry(&self) -> ModelGeometry {
        self.model.config().geometry()
    }

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn step(&mut self, prefix: &[TokenId]) -> Result<StepOutput> {
        self.calls += 1;
        if prefix.len() == self.prompt_len {
            return Ok(StepOutput {
                logits: self.answer_logits.clone(),
                attention: self.answer_attention.clone(),
            });
        }
        self.model.step(prefix)
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

/// Builds a scenario and its oracle. The toy model's weights use `seed`; the
/// prompt, ranks and attention jitter use a stream derived from it.
pub fn plant_scenario(
    seed: u64,
    config: &PlantConfig,
    detector: &UtilizationDetector,
) -> Result<(PlantedScenario, PlantedOracle)> {
    config.validate()?;
    let geometry = config.toy.geometry();
    if detector.geometry != geometry {
        return Err(Error::GeometryMismatch {
            detector: detector.geometry.to_string(),
            oracle: geometry.to_string(),
        });
    }
    let model = ToyTransformer::new_seeded(config.toy, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let vocab = config.toy.vocab_size;

    // distinct context tokens, then a distractor outside the context
    let mut ids: Vec<TokenId> = (0..vocab as TokenId).collect();
    ids.shuffle(&mut rng);
    let context_tokens = ids[..config.context_len].to_vec();
    let distractor = ids[config.context_len];
    let gold_index = rng.random_range(0..config.context_len);
    let gold = context_tokens[gold_index];

    let mut tokens = Vec::new();
    let mut roles = Vec::new();
    for _ in 0..config.template_len {
        tokens.push(rng.random_range(0..vocab as TokenId));
        roles.push(Role::Template);
    }
    for &t in &context_tokens {
        tokens.push(t);
        roles.push(Role::Context);
    }
    for _ in 0..config.question_len {
        tokens.push(rng.random_range(0..vocab as TokenId));
        roles.push(Role::Question);
    }
    let layout = PromptLayout::new(tokens, roles)?;
    let span = context_mask(&layout)?;
    let gold_position = span.positions()[gold_index];
    let seq_len = layout.len();

    let rows = geometry
        .all_heads()
        .into_iter()
        .map(|h| {
            let peak = (config.attention_peak
                + rng.random_range(0.0..0.1) * (1.0 - config.attention_peak))
                .min(1.0 - 1e-6);
            let mut row = vec![0.0; seq_len];
            let other: Vec<usize> = (1..seq_len).filter(|p| !span.contains(*p)).collect();
            let outside = 0.05 * (1.0 - config.sink_mass);
            let ctx = 1.0 - config.sink_mass - if other.is_empty() { 0.0 } else { outside };
            row[0] += config.sink_mass;
            for &p in &other {
                row[p] += outside / other.len() as f64;
            }
            let jitter: Vec<f64> = (0..span.len() - 1)
                .map(|_| rng.random_range(0.5..1.5))
                .collect();
            let jitter_total: f64 = jitter.iter().sum();
            let mut k = 0;
            for &p in span.positions() {
                if p == gold_position {
                    row[p] += ctx * peak;
                } else {
                    row[p] += ctx * (1.0 - peak) * jitter[k] / jitter_total;
                    k += 1;
                }
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= total);
            (h, row)
        })
        .collect();
    let attention = AttentionSnapshot::new(seq_len, rows)?;

    // ranks: distractor first, gold at gold_rank, the rest shuffled
    let mut rest: Vec<TokenId> = (0..vocab as TokenId)
        .filter(|&t| t != gold && t != distractor)
        .collect();
    rest.shuffle(&mut rng);
    let mut ranked = Vec::with_capacity(vocab);
    ranked.push(distractor);
    ranked.extend_from_slice(&rest[..config.gold_rank - 2]);
    ranked.push(gold);
    ranked.extend_from_slice(&rest[config.gold_rank - 2..]);
    let mut logits = vec![0.0; vocab];
    let between = (config.gold_rank - 1) as f64;
    let margin = config.logit_margin * rng.random_range(0.75..1.25);
    for (r, &t) in ranked.iter().enumerate() {
        logits[t as usize] = if r < config.gold_rank {
            -margin * r as f64 / between
        } else {
            -margin - (0.15 + rng.random_range(0.0..0.02)) * (r + 1 - config.gold_rank) as f64
        };
    }
    let logits = LogitVector::new(logits)?;

    let p = logits.softmax();
    debug_assert_eq!(p.argmax(), distractor);
    debug_assert_eq!(p.rank_of(gold)?, config.gold_rank);
    let scores = utilization_scores(&attention, &span, detector)?;
    let u = utilization_distribution(&scores, &span)?;
    let u_top = top_rank_restrict(&u, &p, config.top_rank)?;
    let gap = p.prob(distractor)? - p.prob(gold)?;
    let flip_margin = config.alpha * p.normalized_entropy()? * u_top.get(gold) - gap;
    let expects_flip = config.gold_rank <= config.top_rank;
    if expects_flip {
        if flip_margin <= config.min_flip_margin {
            return Err(Error::InfeasibleScenario(format!(
                "flip margin {flip_margin:.4} does not exceed {} (u_gold = {:.4})",
                config.min_flip_margin,
                u_top.get(gold)
            )));
        }
        if argmax(&adjust_raw(&p, &u_top, config.alpha)?) != gold {
            return Err(Error::InfeasibleScenario(
                "another utilized token outranks gold after adjustment".into(),
            ));
        }
    }

    let scenario = PlantedScenario {
        layout,
        gold_token: gold,
        distractor_token: distractor,
        gold_position,
        gold_rank: config.gold_rank,
        attention_margin: config.attention_peak,
        logit_margin: margin,
        flip_margin,
        expects_flip,
    };
    let oracle = PlantedOracle {
        model,
        prompt_len: seq_len,
        answer_logits: logits,
        answer_attention: attention,
        calls: 0,
    };
    Ok((scenario, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{decode, greedy_decode, DecoderConfig};

    fn detector(geometry: ModelGeometry) -> UtilizationDetector {
        // fires on a ratio around 0.3 or more across heads
        let k = geometry.head_count();
        UtilizationDetector::from_parameters(
            geometry,
            geometry.all_heads(),
            vec![10.0 / k as f64; k],
            -3.0,
            0.5,
        )
        .unwrap()
    }

    fn one_step() -> DecoderConfig {
        DecoderConfig {
            max_new_tokens: 1,
            ..DecoderConfig::default()
        }
    }

    #[test]
    fn default_scenario_flips() {
        let cfg = PlantConfig::default();
        let det = detector(cfg.toy.geometry());
        let (sc, mut oracle) = plant_scenario(1, &cfg, &det).unwrap();
        assert!(sc.expects_flip && sc.flip_margin > cfg.min_flip_margin);
        let g = greedy_decode(&mut oracle.clone(), &sc.layout, &one_step()).unwrap();
        assert_eq!(g.token_ids, vec![sc.distractor_token]);
        let d = decode(&mut oracle, &sc.layout, &det, &one_step()).unwrap();
        assert_eq!(d.token_ids, vec![sc.gold_token]);
        assert_eq!(d.flip_steps(), vec![0]);
    }

    #[test]
    fn zero_alpha_keeps_distractor() {
        let cfg = PlantConfig::default();
        let det = detector(cfg.toy.geometry());
        let (sc, mut oracle) = plant_scenario(2, &cfg, &det).unwrap();
        let zero = DecoderConfig {
            alpha: 0.0,
            ..one_step()
        };
        let d = decode(&mut oracle, &sc.layout, &det, &zero).unwrap();
        assert_eq!(d.token_ids, vec![sc.distractor_token]);
    }

    #[test]
    fn rank_beyond_top_r_never_flips() {
        let cfg = PlantConfig {
            gold_rank: 11,
            ..PlantConfig::default()
        };
        let det = detector(cfg.toy.geometry());
        let (sc, mut oracle) = plant_scenario(3, &cfg, &det).unwrap();
        assert!(!sc.expects_flip);
        let d = decode(&mut oracle, &sc.layout, &det, &one_step()).unwrap();
        assert_eq!(d.token_ids, vec![sc.distractor_token]);
    }

    #[test]
    fn tiny_alpha_is_infeasible() {
        let cfg = PlantConfig {
            alpha: 0.01,
            ..PlantConfig::default()
        };
        let det = detector(cfg.toy.geometry());
        assert!(matches!(
            plant_scenario(4, &cfg, &det),
            Err(Error::InfeasibleScenario(_))
        ));
    }

    #[test]
    fn later_steps_use_the_model() {
        let cfg = PlantConfig::default();
        let det = detector(cfg.toy.geometry());
        let (sc, mut oracle) = plant_scenario(5, &cfg, &det).unwrap();
        let run = DecoderConfig {
            max_new_tokens: 6,
            ..DecoderConfig::default()
        };
        let d = decode(&mut oracle, &sc.layout, &det, &run).unwrap();
        assert_eq!(d.token_ids.len(), 6);
        assert_eq!(d.oracle_calls, 6);
        assert_eq!(oracle.calls(), 6);
    }
}
