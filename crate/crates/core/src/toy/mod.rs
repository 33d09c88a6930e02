//! A seeded miniature causal transformer used as an in-process step oracle.
//!
//! The architecture is a standard pre-norm decoder: token + position
//! embeddings, then per layer RMS-normalized multi-head causal self-attention
//! and a ReLU MLP, each with a residual connection, then a final RMS norm and
//! an unembedding. There is no training; weights come straight from the seed.
//!
//! Weight scheme: a `ChaCha8Rng` seeded with the model seed draws every
//! parameter in a fixed order (token embedding, position embedding, then per
//! layer Q, K, V, O, MLP-in, MLP-out, then the unembedding). Embeddings are
//! uniform on `[-1, 1)`; a projection with fan-in `f` is uniform on
//! `[-sqrt(3/f), sqrt(3/f))`, giving unit-variance outputs for unit-variance
//! inputs.

mod scenario;
mod synth;

pub use scenario::{plant_scenario, PlantConfig, PlantedOracle, PlantedScenario};
pub use synth::{synth_attention_dataset, Family, SynthConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{StepOracle, StepOutput};
use crate::error::{invalid, Result};
use crate::features::{AttentionSnapshot, HeadId, ModelGeometry};
use crate::math::{LogitVector, TokenId};

pub const MAX_VOCAB: usize = 256;
pub const MAX_LAYERS: usize = 4;
pub const MAX_HEADS: usize = 4;
pub const MAX_HIDDEN: usize = 64;
pub const MAX_SEQ_LEN: usize = 1024;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub max_seq_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 32,
            max_seq_len: 128,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: usize, lo: usize, hi: usize| {
            if v < lo || v > hi {
                Err(invalid(format!("{name} = {v} outside {lo}..={hi}")))
            } else {
                Ok(())
            }
        };
        check("vocab_size", self.vocab_size, 2, MAX_VOCAB)?;
        check("num_layers", self.num_layers, 1, MAX_LAYERS)?;
        check("num_heads", self.num_heads, 1, MAX_HEADS)?;
        check("hidden_dim", self.hidden_dim, 1, MAX_HIDDEN)?;
        check("max_seq_len", self.max_seq_len, 1, MAX_SEQ_LEN)?;
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry::new(self.num_layers, self.num_heads)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w_in: Vec<f64>,
    w_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    config: ToyConfig,
    seed: u64,
    token_embedding: Vec<f64>,
    position_embedding: Vec<f64>,
    layers: Vec<Layer>,
    unembedding: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn projection(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    uniform(rng, fan_in * fan_out, (3.0 / fan_in as f64).sqrt())
}

/// `x` (len `w.len() / out`) times row-major `w` (in x out).
fn matvec(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (xi, row) in x.iter().zip(w.chunks_exact(out)) {
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

impl ToyTransformer {
    pub fn new_seeded(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let ff = 2 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_embedding = uniform(&mut rng, config.vocab_size * d, 1.0);
        let position_embedding = uniform(&mut rng, config.max_seq_len * d, 1.0);
        let layers = (0..config.num_layers)
            .map(|_| Layer {
                wq: projection(&mut rng, d, d),
                wk: projection(&mut rng, d, d),
                wv: projection(&mut rng, d, d),
                wo: projection(&mut rng, d, d),
                w_in: projection(&mut rng, d, ff),
                w_out: projection(&mut rng, ff, d),
            })
            .collect();
        let unembedding = projection(&mut rng, d, config.vocab_size);
        Ok(Self {
            config,
            seed,
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Next-token logits and the last position's attention rows.
    pub fn step(&self, prefix: &[TokenId]) -> Result<StepOutput> {
        let cfg = &self.config;
        let t_len = prefix.len();
        if t_len == 0 {
            return Err(invalid("prefix is empty"));
        }
        if t_len > cfg.max_seq_len {
            return Err(invalid(format!(
                "prefix length {t_len} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if let Some(tok) = prefix.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(invalid(format!("token {tok} outside vocabulary")));
        }
        let d = cfg.hidden_dim;
        let dh = d / cfg.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut xs: Vec<Vec<f64>> = prefix
            .iter()
            .enumerate()
            .map(|(pos, &tok)| {
                let e = &self.token_embedding[tok as usize * d..(tok as usize + 1) * d];
                let p = &self.position_embedding[pos * d..(pos + 1) * d];
                e.iter().zip(p).map(|(a, b)| a + b).collect()
            })
            .collect();

        let mut rows = Vec::with_capacity(cfg.num_layers * cfg.num_heads);
        for (l, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms_norm(x)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|h| matvec(h, &layer.wq, d)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|h| matvec(h, &layer.wk, d)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|h| matvec(h, &layer.wv, d)).collect();
            let mut mixed = vec![vec![0.0; d]; t_len];
            for head in 0..cfg.num_heads {
                let cols = head * dh..(head + 1) * dh;
                for t in 0..t_len {
                    let mut att: Vec<f64> = (0..=t)
                        .map(|s| {
                            q[t][cols.clone()]
                                .iter()
                                .zip(&k[s][cols.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    softmax_in_place(&mut att);
                    for (s, a) in att.iter().enumerate() {
                        for c in cols.clone() {
                            mixed[t][c] += a * v[s][c];
                        }
                    }
                    if t == t_len - 1 {
                        rows.push((HeadId::new(l, head), att));
                    }
                }
            }
            for (x, m) in xs.iter_mut().zip(&mixed) {
                for (xi, oi) in x.iter_mut().zip(matvec(m, &layer.wo, d)) {
                    *xi += oi;
                }
            }
            for x in xs.iter_mut() {
                let hidden: Vec<f64> = matvec(&rms_norm(x), &layer.w_in, 2 * d)
                    .into_iter()
                    .map(|h| h.max(0.0))
                    .collect();
                for (xi, oi) in x.iter_mut().zip(matvec(&hidden, &layer.w_out, d)) {
                    *xi += oi;
                }
            }
        }

        let last = rms_norm(&xs[t_len - 1]);
        let logits = matvec(&last, &self.unembedding, cfg.vocab_size);
        Ok(StepOutput {
            logits: LogitVector::new(logits)?,
            attention: AttentionSnapshot::new(t_len, rows)?,
        })
    }
}

/// Step oracle over a toy model with an invocation counter.
#[derive(Debug, Clone)]
pub struct ToyOracle {
    model: ToyTransformer,
    calls: usize,
}

impl ToyOracle {
    pub fn new(model: ToyTransformer) -> Self {
        Self { model, calls: 0 }
    }

    pub fn model(&self) -> &ToyTransformer {
        &self.model
    }
}

impl StepOracle for ToyOracle {
    fn geometry(&self) -> ModelGeometry {
        self.model.config.geometry()
    }

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn step(&mut self, prefix: &[TokenId]) -> Result<StepOutput> {
        self.calls += 1;
        self.model.step(prefix)
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ROW_SUM_TOL;

    #[test]
    fn seeded_models_are_deterministic() {
        let cfg = ToyConfig::default();
        let a = ToyTransformer::new_seeded(cfg, 3).unwrap();
        let b = ToyTransformer::new_seeded(cfg, 3).unwrap();
        let prefix = [1, 5, 9, 2];
        let (x, y) = (a.step(&prefix).unwrap(), b.step(&prefix).unwrap());
        let bits = |v: &LogitVector| v.as_slice().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.logits), bits(&y.logits));
        assert_eq!(x.attention, y.attention);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = ToyConfig::default();
        let a = ToyTransformer::new_seeded(cfg, 3).unwrap();
        let b = ToyTransformer::new_seeded(cfg, 4).unwrap();
        let fixtures: [&[TokenId]; 3] = [&[0], &[1, 2, 3], &[7, 7, 7, 7, 7]];
        assert!(fixtures
            .iter()
            .any(|p| a.step(p).unwrap().logits != b.step(p).unwrap().logits));
    }

    #[test]
    fn geometry_limits() {
        let bad = [
            ToyConfig {
                num_heads: 0,
                ..Default::default()
            },
            ToyConfig {
                num_layers: 5,
                ..Default::default()
            },
            ToyConfig {
                vocab_size: 257,
                ..Default::default()
            },
            ToyConfig {
                hidden_dim: 30,
                ..Default::default()
            },
            ToyConfig {
                hidden_dim: 128,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(ToyTransformer::new_seeded(cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = ToyTransformer::new_seeded(ToyConfig::default(), 11).unwrap();
        let prefix: Vec<TokenId> = (0..20).map(|i| (i * 7 % 64) as TokenId).collect();
        let out = m.step(&prefix).unwrap();
        assert_eq!(out.attention.heads().len(), 16);
        for &h in out.attention.heads() {
            let row = out.attention.row(h).unwrap();
            assert_eq!(row.len(), 20);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL);
        }
        let single = m.step(&[4]).unwrap();
        for &h in single.attention.heads() {
            assert_eq!(single.attention.row(h).unwrap(), &[1.0]);
        }
    }

    #[test]
    fn prefix_limits() {
        let m = ToyTransformer::new_seeded(
            ToyConfig {
                max_seq_len: 4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(m.step(&[1, 2, 3, 4, 5]).is_err());
        assert!(m.step(&[]).is_err());
        assert!(m.step(&[64]).is_err());
    }
}
