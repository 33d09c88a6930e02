use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::LabeledExample;
use crate::error::{invalid, Result};
use crate::features::{topk_feature_vector, AttentionSnapshot, ContextSpan, HeadId, ModelGeometry};

/// Noise regime of a synthetic attention generator.
///
/// * `A`: log-normal noise with sigma 0.5 plus an attention sink at position 0
///   holding 2 to 10 times the rest of the row's mass.
/// * `B`: heavier log-normal noise (sigma 1.0) with no sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
}

impl std::str::FromStr for Family {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Family::A),
            "B" | "b" => Ok(Family::B),
            _ => Err(invalid(format!("unknown generator family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub geometry: ModelGeometry,
    /// Heads that concentrate on the token the model is using.
    pub informative_heads: Vec<HeadId>,
    pub min_context: usize,
    pub max_context: usize,
    /// Concentration added to an informative head, as a multiple of its
    /// context mass, drawn uniformly from this range.
    pub boost: (f64, f64),
    /// Chance that an uninformative head spikes on a random context token.
    pub distractor_rate: f64,
    pub label_noise: f64,
}

impl SynthConfig {
    /// Every fifth head (starting at the third) is informative.
    pub fn for_geometry(geometry: ModelGeometry) -> Self {
        let informative_heads = geometry
            .all_heads()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| i % 5 == 2)
            .map(|(_, h)| h)
            .collect();
        Self {
            geometry,
            informative_heads,
            min_context: 16,
            max_context: 40,
            boost: (0.5, 3.0),
            distractor_rate: 0.3,
            label_noise: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.geometry.head_count() == 0 {
            return Err(invalid("synthetic geometry has no heads"));
        }
        if self.informative_heads.is_empty() {
            return Err(invalid("need at least one informative head"));
        }
        if let Some(h) = self
            .informative_heads
            .iter()
            .find(|h| !self.geometry.contains(**h))
        {
            return Err(invalid(format!("informative head {h} outside geometry")));
        }
        if self.min_context < 2 || self.min_context > self.max_context {
            return Err(invalid("context length range must satisfy 2 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) || !(0.0..=1.0).contains(&self.distractor_rate)
        {
            return Err(invalid("rates must lie in [0, 1]"));
        }
        if !(self.boost.0 > 0.0 && self.boost.0 <= self.boost.1) {
            return Err(invalid("boost range must be positive and ordered"));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_geometry(ModelGeometry::new(4, 8))
    }
}

const TEMPLATE_LEN: usize = 4;
const QUESTION_LEN: usize = 3;

/// Standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `n` labeled attention-ratio examples: even indices positive, odd negative,
/// then labels flipped at `label_noise`.
///
/// Each example simulates one decode step over a prompt of template, context
/// and question tokens. Positives take their features at the context token
/// the informative heads concentrate on; negatives at some other context
/// token, while the heads concentrate elsewhere (or nowhere).
pub fn synth_attention_dataset(
    n: usize,
    family: Family,
    seed: u64,
    config: &SynthConfig,
) -> Result<Vec<LabeledExample>> {
    if !n.is_multiple_of(2) {
        return Err(invalid(format!("n = {n} must be even")));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = config.geometry.all_heads();
    let sigma = match family {
        Family::A => 0.5,
        Family::B => 1.0,
    };
    let tag = match family {
        Family::A => "A",
        Family::B => "B",
    };

    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let m = rng.random_range(config.min_context..=config.max_context);
            let seq_len = TEMPLATE_LEN + m + QUESTION_LEN;
            let context: Vec<usize> = (TEMPLATE_LEN..TEMPLATE_LEN + m).collect();
            let span = ContextSpan::new(context.clone(), vec![0; m])?;
            let target = context[rng.random_range(0..m)];
            let used = if positive {
                Some(target)
            } else if rng.random_bool(0.7) {
                let others: Vec<usize> = context.iter().copied().filter(|&p| p != target).collect();
                others.choose(&mut rng).copied()
            } else {
                None
            };

            let rows = heads
                .iter()
                .map(|&h| {
                    let mut row: Vec<f64> = (0..seq_len)
                        .map(|_| (sigma * normal(&mut rng)).exp())
                        .collect();
                    let ctx_mass: f64 = context.iter().map(|&p| row[p]).sum();
                    if config.informative_heads.contains(&h) {
                        if let Some(u) = used {
                            row[u] += rng.random_range(config.boost.0..=config.boost.1) * ctx_mass;
                        }
                    } else if rng.random_bool(config.distractor_rate) {
                        let spike = context[rng.random_range(0..m)];
                        row[spike] += rng.random_range(0.0..1.0) * ctx_mass;
                    }
                    if family == Family::A {
                        let rest: f64 = row[1..].iter().sum();
                        row[0] = rng.random_range(2.0..10.0) * rest;
                    }
                    let total: f64 = row.iter().sum();
                    row.iter_mut().for_each(|w| *w /= total);
                    (h, row)
                })
                .collect();
            let snapshot = AttentionSnapshot::new(seq_len, rows)?;
            let features = topk_feature_vector(&snapshot, &span, target, &heads)?;
            let flip = config.label_noise > 0.0 && rng.random_bool(config.label_noise);
            Ok(LabeledExample {
                features,
                label: positive != flip,
                provenance: Some(format!("synth-{tag}-{seed}-{i}")),
            })
        })
        .collect()
}
