//! Context-utilization detector: an L2-regularized logistic-regression probe
//! over attention-ratio features.
//!
//! Training is deterministic full-batch gradient descent with an Armijo
//! backtracking line search (Barzilai-Borwein initial step). The regularizer
//! strength can be chosen by stratified k-fold cross-validation on held-out
//! log-loss.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{
    context_ratio_matrix, AttentionSnapshot, ContextSpan, FeatureVector, HeadId, ModelGeometry,
};
use crate::math::average_ranks;
use crate::util::{crc32c, fingerprint};

pub const DETECTOR_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const L2_GRID: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: FeatureVector,
    /// `true` for a utilized context token.
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2_strength: f64,
    pub folds: usize,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_strength: 0.01,
            folds: 5,
            max_iterations: 20_000,
            convergence_tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.l2_strength >= 0.0 && self.l2_strength.is_finite()) {
            return Err(invalid("l2_strength must be finite and non-negative"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(invalid("convergence_tol must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be positive"));
        }
        if self.folds < 2 {
            return Err(invalid("folds must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub l2_strength: f64,
    pub data_fingerprint: String,
    pub n_examples: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationDetector {
    pub format_version: u32,
    pub layout_id: String,
    pub geometry: ModelGeometry,
    pub head_order: Vec<HeadId>,
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub training: TrainingMetadata,
}

/// Binds a detector to a model geometry and a feature layout.
pub fn layout_id(geometry: ModelGeometry, heads: &[HeadId]) -> String {
    let bytes: Vec<u8> = heads
        .iter()
        .flat_map(|h| {
            [
                (h.layer as u32).to_le_bytes(),
                (h.head as u32).to_le_bytes(),
            ]
        })
        .flatten()
        .collect();
    format!("{geometry}/{}k/{:08x}", heads.len(), crc32c(&bytes))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl UtilizationDetector {
    /// Builds a detector from explicit parameters, mostly for tests and
    /// hand-specified probes.
    pub fn from_parameters(
        geometry: ModelGeometry,
        head_order: Vec<HeadId>,
        coefficients: Vec<f64>,
        bias: f64,
        threshold: f64,
    ) -> Result<Self> {
        let detector = Self {
            format_version: DETECTOR_FORMAT_VERSION,
            layout_id: layout_id(geometry, &head_order),
            geometry,
            head_order,
            coefficients,
            bias,
            threshold,
            training: TrainingMetadata {
                seed: 0,
                l2_strength: 0.0,
                data_fingerprint: String::new(),
                n_examples: 0,
                iterations: 0,
                converged: true,
            },
        };
        detector.validate()?;
        Ok(detector)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != DETECTOR_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.format_version));
        }
        if self.head_order.is_empty() {
            return Err(invalid("detector has an empty head order"));
        }
        if self.coefficients.len() != self.head_order.len() {
            return Err(invalid("coefficient count differs from head count"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if let Some(h) = self
            .head_order
            .iter()
            .find(|h| !self.geometry.contains(**h))
        {
            return Err(invalid(format!(
                "head {h} outside geometry {}",
                self.geometry
            )));
        }
        if self.layout_id != layout_id(self.geometry, &self.head_order) {
            return Err(invalid("layout_id does not match geometry and head order"));
        }
        Ok(())
    }

    /// Same detector with a different decision threshold.
    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        self.threshold = threshold;
        self.validate()?;
        Ok(self)
    }

    fn logit(&self, values: &[f64]) -> f64 {
        self.bias
            + self
                .coefficients
                .iter()
                .zip(values)
                .map(|(c, v)| c * v)
                .sum::<f64>()
    }

    /// Probability for a feature row already laid out in `head_order`.
    pub fn predict_proba_values(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.coefficients.len() {
            return Err(invalid(format!(
                "{} feature values for a detector over {} heads",
                values.len(),
                self.coefficients.len()
            )));
        }
        Ok(sigmoid(self.logit(values)))
    }

    pub fn predict_proba(&self, features: &FeatureVector) -> Result<f64> {
        if features.head_order != self.head_order {
            return Err(invalid(
                "feature layout does not match the detector's head order",
            ));
        }
        self.predict_proba_values(&features.values)
    }

    pub fn classify(&self, features: &FeatureVector) -> Result<bool> {
        Ok(self.predict_proba(features)? >= self.threshold)
    }

    pub fn classify_values(&self, values: &[f64]) -> Result<bool> {
        Ok(self.predict_proba_values(values)? >= self.threshold)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// The `k` heads with the largest `|c|`, descending; ties by `(layer, head)`.
pub fn select_top_heads(detector: &UtilizationDetector, k: usize) -> Result<Vec<HeadId>> {
    let n = detector.head_order.len();
    if k == 0 || k > n {
        return Err(invalid(format!("K = {k} outside 1..={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        detector.coefficients[b]
            .abs()
            .total_cmp(&detector.coefficients[a].abs())
            .then(detector.head_order[a].cmp(&detector.head_order[b]))
    });
    Ok(idx[..k].iter().map(|&i| detector.head_order[i]).collect())
}

/// Per-head weights: negative coefficients clamp to zero, the rest are
/// normalized to sum to one.
pub fn head_weights(detector: &UtilizationDetector) -> Result<Vec<f64>> {
    let clamped: Vec<f64> = detector.coefficients.iter().map(|c| c.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NoPositiveEvidence);
    }
    Ok(clamped.into_iter().map(|c| c / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub auc: f64,
}

fn label_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Rank-based (Mann-Whitney) AUC with average ranks for tied scores.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    let (n_pos, n_neg) = label_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels("AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

pub fn evaluate(detector: &UtilizationDetector, examples: &[LabeledExample]) -> Result<Evaluation> {
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let (n_pos, n_neg) = label_counts(&labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels(
            "evaluation set has a single class".into(),
        ));
    }
    let scores = examples
        .iter()
        .map(|e| detector.predict_proba(&e.features))
        .collect::<Result<Vec<f64>>>()?;
    let correct = scores
        .iter()
        .zip(&labels)
        .filter(|(s, l)| (**s >= detector.threshold) == **l)
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / examples.len() as f64,
        auc: auc(&scores, &labels)?,
    })
}

/// Dense design matrix plus labels, validated for a uniform layout.
struct Design<'a> {
    heads: &'a [HeadId],
    rows: Vec<&'a [f64]>,
    labels: Vec<f64>,
}

impl<'a> Design<'a> {
    fn new(examples: &'a [LabeledExample]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| invalid("no training examples"))?;
        let heads = first.features.head_order.as_slice();
        if heads.is_empty() {
            return Err(invalid("feature layout has no heads"));
        }
        for (i, e) in examples.iter().enumerate() {
            if e.features.head_order != heads || e.features.values.len() != heads.len() {
                return Err(invalid(format!(
                    "example {i} has a different feature layout"
                )));
            }
        }
        Ok(Self {
            heads,
            rows: examples
                .iter()
                .map(|e| e.features.values.as_slice())
                .collect(),
            labels: examples
                .iter()
                .map(|e| if e.label { 1.0 } else { 0.0 })
                .collect(),
        })
    }

    fn dim(&self) -> usize {
        self.heads.len()
    }

    /// Parameters are `[w_0 .. w_{d-1}, bias]`.
    fn loss(&self, theta: &[f64], l2: f64) -> f64 {
        let d = self.dim();
        let (w, b) = (&theta[..d], theta[d]);
        let nll: f64 = self
            .rows
            .iter()
            .zip(&self.labels)
            .map(|(x, y)| {
                let z = b + w.iter().zip(*x).map(|(a, v)| a * v).sum::<f64>();
                softplus(z) - y * z
            })
            .sum();
        nll / self.rows.len() as f64 + 0.5 * l2 * w.iter().map(|a| a * a).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64], l2: f64, grad: &mut [f64]) {
        let d = self.dim();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (w, b) = (&theta[..d], theta[d]);
        for (x, y) in self.rows.iter().zip(&self.labels) {
            let z = b + w.iter().zip(*x).map(|(a, v)| a * v).sum::<f64>();
            let r = sigmoid(z) - y;
            for (g, v) in grad[..d].iter_mut().zip(*x) {
                *g += r * v;
            }
            grad[d] += r;
        }
        let n = self.rows.len() as f64;
        for (g, a) in grad[..d].iter_mut().zip(w) {
            *g = *g / n + l2 * a;
        }
        grad[d] /= n;
    }

    fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.rows.len() * (self.dim() + 1) * 8);
        for (x, y) in self.rows.iter().zip(&self.labels) {
            for v in *x {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.extend_from_slice(&y.to_le_bytes());
        }
        fingerprint(&bytes)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of a single fit, including the per-iteration loss trajectory.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: UtilizationDetector,
    pub loss_history: Vec<f64>,
}

impl TrainOutcome {
    pub fn converged(&self) -> bool {
        self.detector.training.converged
    }
}

/// Fits the probe with `config.l2_strength`.
pub fn train(
    examples: &[LabeledExample],
    geometry: ModelGeometry,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let design = Design::new(examples)?;
    if let Some(h) = design.heads.iter().find(|h| !geometry.contains(**h)) {
        return Err(invalid(format!("head {h} outside geometry {geometry}")));
    }
    let (n_pos, n_neg) = label_counts(&examples.iter().map(|e| e.label).collect::<Vec<_>>());
    if examples.len() < 2 || n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{n_pos} positive and {n_neg} negative examples"
        )));
    }

    let l2 = config.l2_strength;
    let d = design.dim();
    let mut theta = vec![0.0; d + 1];
    let mut grad = vec![0.0; d + 1];
    let mut prev_theta = theta.clone();
    let mut prev_grad = vec![0.0; d + 1];
    let mut loss = design.loss(&theta, l2);
    let mut history = vec![loss];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut candidate = vec![0.0; d + 1];

    design.gradient(&theta, l2, &mut grad);
    for it in 0..config.max_iterations {
        let gnorm2 = dot(&grad, &grad);
        if gnorm2.sqrt() < config.convergence_tol {
            converged = true;
            break;
        }
        if it > 0 {
            // Barzilai-Borwein guess, then backtrack until Armijo holds.
            let s: Vec<f64> = theta.iter().zip(&prev_theta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad.iter().zip(&prev_grad).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            step = if sy > 0.0 {
                dot(&s, &s) / sy
            } else {
                step * 2.0
            };
        }
        let accepted = loop {
            for ((c, t), g) in candidate.iter_mut().zip(&theta).zip(&grad) {
                *c = t - step * g;
            }
            let trial = design.loss(&candidate, l2);
            if trial <= loss - ARMIJO_C * step * gnorm2 {
                break Some(trial);
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        iterations = it + 1;
        let Some(new_loss) = accepted else {
            break;
        };
        prev_theta.copy_from_slice(&theta);
        prev_grad.copy_from_slice(&grad);
        theta.copy_from_slice(&candidate);
        loss = new_loss;
        history.push(loss);
        design.gradient(&theta, l2, &mut grad);
    }
    if !converged && dot(&grad, &grad).sqrt() < config.convergence_tol {
        converged = true;
    }
    if !converged {
        warn!(
            "logistic regression did not converge in {} iterations (l2 = {l2})",
            iterations
        );
    }

    let head_order = design.heads.to_vec();
    let detector = UtilizationDetector {
        format_version: DETECTOR_FORMAT_VERSION,
        layout_id: layout_id(geometry, &head_order),
        geometry,
        head_order,
        coefficients: theta[..d].to_vec(),
        bias: theta[d],
        threshold: DEFAULT_THRESHOLD,
        training: TrainingMetadata {
            seed: config.seed,
            l2_strength: l2,
            data_fingerprint: design.fingerprint(),
            n_examples: examples.len(),
            iterations,
            converged,
        },
    };
    Ok(TrainOutcome {
        detector,
        loss_history: history,
    })
}

/// Stratified fold assignment: each class is shuffled with the seed and
/// dealt round-robin.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut offset = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            assignment[i] = (k + offset) % folds;
        }
        offset += 1;
    }
    assignment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub grid: Vec<f64>,
    pub mean_log_loss: Vec<f64>,
    pub best_l2: f64,
}

fn mean_log_loss(detector: &UtilizationDetector, examples: &[LabeledExample]) -> Result<f64> {
    let mut total = 0.0;
    for e in examples {
        let z = detector.logit(&e.features.values);
        total += softplus(z) - if e.label { z } else { 0.0 };
    }
    Ok(total / examples.len() as f64)
}

/// Picks the L2 strength from `grid` minimizing mean held-out log-loss.
/// Ties go to the earlier grid entry.
pub fn cross_validate(
    examples: &[LabeledExample],
    geometry: ModelGeometry,
    config: &TrainConfig,
    grid: &[f64],
) -> Result<CvReport> {
    config.validate()?;
    if grid.is_empty() {
        return Err(invalid("empty L2 grid"));
    }
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let (n_pos, n_neg) = label_counts(&labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{n_pos} positive and {n_neg} negative examples"
        )));
    }
    let folds = config.folds.min(n_pos).min(n_neg);
    if folds < 2 {
        return Err(invalid(
            "each class needs at least 2 examples for cross-validation",
        ));
    }
    let assignment = stratified_folds(&labels, folds, config.seed);
    let mut losses = Vec::with_capacity(grid.len());
    for &l2 in grid {
        let cfg = TrainConfig {
            l2_strength: l2,
            ..config.clone()
        };
        let mut sum = 0.0;
        for f in 0..folds {
            let (held, train_set): (Vec<_>, Vec<_>) =
                examples.iter().zip(&assignment).partition(|(_, &a)| a == f);
            let train_set: Vec<LabeledExample> =
                train_set.into_iter().map(|(e, _)| e.clone()).collect();
            let held: Vec<LabeledExample> = held.into_iter().map(|(e, _)| e.clone()).collect();
            let fit = train(&train_set, geometry, &cfg)?;
            sum += mean_log_loss(&fit.detector, &held)?;
        }
        losses.push(sum / folds as f64);
    }
    let best = (0..grid.len())
        .min_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)))
        .expect("grid is non-empty");
    Ok(CvReport {
        folds,
        grid: grid.to_vec(),
        mean_log_loss: losses,
        best_l2: grid[best],
    })
}

/// Cross-validates the L2 strength over [`L2_GRID`], then refits on all data.
pub fn train_with_cv(
    examples: &[LabeledExample],
    geometry: ModelGeometry,
    config: &TrainConfig,
) -> Result<(TrainOutcome, CvReport)> {
    let cv = cross_validate(examples, geometry, config, &L2_GRID)?;
    let cfg = TrainConfig {
        l2_strength: cv.best_l2,
        ..config.clone()
    };
    Ok((train(examples, geometry, &cfg)?, cv))
}

/// Restricts every example to `heads`, in that order.
pub fn project_examples(
    examples: &[LabeledExample],
    heads: &[HeadId],
) -> Result<Vec<LabeledExample>> {
    examples
        .iter()
        .map(|e| {
            Ok(LabeledExample {
                features: e.features.select(heads)?,
                label: e.label,
                provenance: e.provenance.clone(),
            })
        })
        .collect()
}

/// One decoding step's worth of labeling input.
#[derive(Debug, Clone)]
pub struct DecodingRecord {
    pub id: String,
    pub snapshot: AttentionSnapshot,
    pub span: ContextSpan,
    /// Context positions holding gold-answer tokens.
    pub gold_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingRule {
    /// Feature layout; every head in the snapshot when unset.
    pub heads: Option<Vec<HeadId>>,
    /// Negatives sampled per positive.
    pub negative_ratio: f64,
    pub seed: u64,
}

impl Default for LabelingRule {
    fn default() -> Self {
        Self {
            heads: None,
            negative_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub examples: Vec<LabeledExample>,
    pub skipped: usize,
}

/// Positives are the gold positions; negatives are drawn uniformly without
/// replacement from the remaining context positions.
pub fn build_training_set(records: &[DecodingRecord], rule: &LabelingRule) -> Result<TrainingSet> {
    if !(rule.negative_ratio >= 0.0 && rule.negative_ratio.is_finite()) {
        return Err(invalid("negative_ratio must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rule.seed);
    let mut examples = Vec::new();
    let mut skipped = 0;
    for rec in records {
        if rec.gold_positions.is_empty() {
            skipped += 1;
            continue;
        }
        let heads = rule
            .heads
            .clone()
            .unwrap_or_else(|| rec.snapshot.heads().to_vec());
        let matrix = context_ratio_matrix(&rec.snapshot, &rec.span, &heads)?;
        let index_of = |p: usize| {
            rec.span.positions().binary_search(&p).map_err(|_| {
                invalid(format!(
                    "record {}: gold position {p} not in context",
                    rec.id
                ))
            })
        };
        let mut gold: Vec<usize> = rec
            .gold_positions
            .iter()
            .map(|&p| index_of(p))
            .collect::<Result<_>>()?;
        gold.sort_unstable();
        gold.dedup();
        let mut pool: Vec<usize> = (0..rec.span.len())
            .filter(|i| gold.binary_search(i).is_err())
            .collect();
        let want = ((gold.len() as f64) * rule.negative_ratio).round() as usize;
        let take = want.min(pool.len());
        let (chosen, _) = pool.partial_shuffle(&mut rng, take);
        let mut negatives = chosen.to_vec();
        negatives.sort_unstable();

        let mut push = |i: usize, label: bool| {
            examples.push(LabeledExample {
                features: FeatureVector {
                    values: matrix[i].clone(),
                    head_order: heads.clone(),
                },
                label,
                provenance: Some(format!("{}@{}", rec.id, rec.span.positions()[i])),
            });
        };
        for &i in &gold {
            push(i, true);
        }
        for &i in &negatives {
            push(i, false);
        }
    }
    Ok(TrainingSet { examples, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn geom() -> ModelGeometry {
        ModelGeometry::new(2, 2)
    }

    fn heads2() -> Vec<HeadId> {
        vec![HeadId::new(0, 0), HeadId::new(0, 1)]
    }

    fn example(values: Vec<f64>, label: bool) -> LabeledExample {
        LabeledExample {
            features: FeatureVector {
                head_order: heads2()[..values.len()].to_vec(),
                values,
            },
            label,
            provenance: None,
        }
    }

    fn separable(n: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let pos = i % 2 == 0;
                let c = if pos { 0.9 } else { 0.1 };
                let v = vec![
                    c + rng.random_range(-0.08..0.08),
                    c + rng.random_range(-0.08..0.08),
                ];
                example(v, pos)
            })
            .collect()
    }

    #[test]
    fn separable_training() {
        let train_set = separable(60, 1);
        let held = separable(60, 2);
        let out = train(&train_set, geom(), &TrainConfig::default()).unwrap();
        assert!(out.converged());
        let ev = evaluate(&out.detector, &held).unwrap();
        assert_eq!(ev.auc, 1.0);
        let pos: Vec<_> = held.iter().filter(|e| e.label).collect();
        let hits = pos
            .iter()
            .filter(|e| out.detector.classify(&e.features).unwrap())
            .count();
        assert!(hits as f64 >= 0.99 * pos.len() as f64);
    }

    #[test]
    fn training_errors() {
        let all_pos: Vec<_> = (0..4).map(|_| example(vec![0.5, 0.5], true)).collect();
        assert!(matches!(
            train(&all_pos, geom(), &TrainConfig::default()),
            Err(Error::DegenerateLabels(_))
        ));
        let empty_layout = vec![
            LabeledExample {
                features: FeatureVector {
                    values: vec![],
                    head_order: vec![],
                },
                label: true,
                provenance: None,
            },
            LabeledExample {
                features: FeatureVector {
                    values: vec![],
                    head_order: vec![],
                },
                label: false,
                provenance: None,
            },
        ];
        assert!(matches!(
            train(&empty_layout, geom(), &TrainConfig::default()),
            Err(Error::InvalidInput(_))
        ));
        let mixed = vec![example(vec![0.5, 0.5], true), example(vec![0.5], false)];
        assert!(matches!(
            train(&mixed, geom(), &TrainConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn non_convergence_is_flagged() {
        let cfg = TrainConfig {
            max_iterations: 2,
            convergence_tol: 1e-14,
            ..TrainConfig::default()
        };
        let out = train(&separable(40, 3), geom(), &cfg).unwrap();
        assert!(!out.converged());
    }

    #[test]
    fn loss_is_monotone() {
        let out = train(
            &separable(80, 4),
            geom(),
            &TrainConfig {
                l2_strength: 0.001,
                ..Default::default()
            },
        )
        .unwrap();
        for w in out.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn retraining_is_bit_reproducible() {
        let data = separable(50, 5);
        let a = train_with_cv(&data, geom(), &TrainConfig::default()).unwrap();
        let b = train_with_cv(&data, geom(), &TrainConfig::default()).unwrap();
        assert_eq!(a.0.detector, b.0.detector);
        assert_eq!(
            a.0.detector.to_json().unwrap(),
            b.0.detector.to_json().unwrap()
        );
        assert_eq!(a.1, b.1);
    }

    fn manual(coefs: Vec<f64>, bias: f64) -> UtilizationDetector {
        let g = ModelGeometry::new(1, coefs.len());
        UtilizationDetector::from_parameters(g, g.all_heads(), coefs, bias, 0.5).unwrap()
    }

    fn fv(d: &UtilizationDetector, values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            values,
            head_order: d.head_order.clone(),
        }
    }

    #[test]
    fn predict_examples() {
        let d = manual(vec![0.0], 0.0);
        assert_eq!(d.predict_proba(&fv(&d, vec![0.3])).unwrap(), 0.5);
        let d = manual(vec![0.0], 10.0);
        let p = d.predict_proba(&fv(&d, vec![0.3])).unwrap();
        assert!((p - 0.999_954_602_131_297_5).abs() < 1e-15);
        let d = manual(vec![2.0], 0.0);
        let p = d.predict_proba(&fv(&d, vec![0.5])).unwrap();
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-15);
        let wrong = FeatureVector {
            values: vec![0.5],
            head_order: vec![HeadId::new(0, 1)],
        };
        assert!(d.predict_proba(&wrong).is_err());
    }

    #[test]
    fn classify_boundary() {
        let d = manual(vec![0.0], 0.0);
        assert!(d.classify(&fv(&d, vec![0.1])).unwrap());
        // logit(0.49) = ln(0.49 / 0.51)
        let d = manual(vec![0.0], (0.49f64 / 0.51).ln());
        assert!(!d.classify(&fv(&d, vec![0.1])).unwrap());
    }

    #[test]
    fn top_heads() {
        let d = manual(vec![0.9, -1.2, 0.3], 0.0);
        let h = &d.head_order;
        assert_eq!(select_top_heads(&d, 2).unwrap(), vec![h[1], h[0]]);
        let mut all = select_top_heads(&d, 3).unwrap();
        all.sort();
        assert_eq!(&all, h);
        let d = manual(vec![1.0, -1.0, 1.0], 0.0);
        assert_eq!(select_top_heads(&d, 3).unwrap(), d.head_order);
        assert!(select_top_heads(&d, 0).is_err());
        assert!(select_top_heads(&d, 4).is_err());
    }

    #[test]
    fn weights() {
        assert_eq!(
            head_weights(&manual(vec![2.0, 1.0, 1.0], 0.0)).unwrap(),
            vec![0.5, 0.25, 0.25]
        );
        assert_eq!(
            head_weights(&manual(vec![3.0, -1.0], 0.0)).unwrap(),
            vec![1.0, 0.0]
        );
        assert!(matches!(
            head_weights(&manual(vec![-1.0, -2.0], 0.0)),
            Err(Error::NoPositiveEvidence)
        ));
    }

    /// P(score_pos > score_neg) + 0.5 P(tie), by enumerating every pair.
    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        let s = [0.9, 0.8, 0.7, 0.1];
        let l = [true, false, true, false];
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert_eq!(brute_auc(&s, &l), 0.75);
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn evaluate_perfect() {
        let d = manual(vec![10.0], -5.0);
        let ex: Vec<_> = [(0.9, true), (0.8, true), (0.2, false), (0.1, false)]
            .iter()
            .map(|&(v, l)| LabeledExample {
                features: fv(&d, vec![v]),
                label: l,
                provenance: None,
            })
            .collect();
        let ev = evaluate(&d, &ex).unwrap();
        assert_eq!((ev.accuracy, ev.auc), (1.0, 1.0));
    }

    #[test]
    fn detector_file_round_trip() {
        let mut d = train(&separable(30, 9), geom(), &TrainConfig::default())
            .unwrap()
            .detector;
        d.coefficients[0] = 0.1 + 0.2;
        d.bias = -1.0 / 3.0;
        let text = d.to_json().unwrap();
        let back = UtilizationDetector::from_json(&text).unwrap();
        for (a, b) in d.coefficients.iter().zip(&back.coefficients) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, d);
        assert_eq!(back.to_json().unwrap(), text);

        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 7");
        assert!(matches!(
            UtilizationDetector::from_json(&bumped),
            Err(Error::UnsupportedVersion(7))
        ));
    }

    fn record(id: &str, context_len: usize, gold: Vec<usize>) -> DecodingRecord {
        let seq = context_len + 1;
        let row: Vec<f64> = (0..seq).map(|i| (i + 1) as f64).collect();
        let s: f64 = row.iter().sum();
        let row: Vec<f64> = row.into_iter().map(|w| w / s).collect();
        let snapshot = AttentionSnapshot::new(
            seq,
            vec![(HeadId::new(0, 0), row.clone()), (HeadId::new(0, 1), row)],
        )
        .unwrap();
        let span = ContextSpan::new((1..seq).collect(), vec![5; context_len]).unwrap();
        DecodingRecord {
            id: id.into(),
            snapshot,
            span,
            gold_positions: gold,
        }
    }

    #[test]
    fn training_set_construction() {
        let ts =
            build_training_set(&[record("a", 8, vec![2, 5])], &LabelingRule::default()).unwrap();
        assert_eq!(ts.examples.iter().filter(|e| e.label).count(), 2);
        assert_eq!(ts.examples.iter().filter(|e| !e.label).count(), 2);
        assert_eq!(ts.skipped, 0);

        let ts = build_training_set(&[record("b", 8, vec![])], &LabelingRule::default()).unwrap();
        assert!(ts.examples.is_empty());
        assert_eq!(ts.skipped, 1);

        assert!(build_training_set(&[record("c", 3, vec![9])], &LabelingRule::default()).is_err());
    }

    #[test]
    fn training_set_is_seeded() {
        let recs: Vec<_> = (0..100)
            .map(|i| {
                record(
                    &format!("r{i}"),
                    6 + i % 5,
                    if i % 7 == 0 { vec![] } else { vec![1 + i % 6] },
                )
            })
            .collect();
        let rule = LabelingRule {
            seed: 42,
            ..Default::default()
        };
        let a = build_training_set(&recs, &rule).unwrap();
        let b = build_training_set(&recs, &rule).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_eq!(a.skipped, 15);
        let c = build_training_set(
            &recs,
            &LabelingRule {
                seed: 43,
                ..Default::default()
            },
        )
        .unwrap();
        let prov = |t: &TrainingSet| {
            t.examples
                .iter()
                .map(|e| e.provenance.clone())
                .collect::<Vec<_>>()
        };
        assert_ne!(prov(&a), prov(&c));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..200),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let (p, n) = label_counts(&labels);
            prop_assume!(p > 0 && n > 0);
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn proba_monotone_in_positive_features(
            c in prop::collection::vec(0.01f64..5.0, 1..6),
            bias in -3.0f64..3.0,
            x in prop::collection::vec(0.0f64..0.9, 6),
            k in 0usize..6,
            bump in 0.01f64..0.1,
        ) {
            let d = manual(c.clone(), bias);
            let k = k % c.len();
            let lo: Vec<f64> = x[..c.len()].to_vec();
            let mut hi = lo.clone();
            hi[k] += bump;
            prop_assert!(d.predict_proba_values(&hi).unwrap() > d.predict_proba_values(&lo).unwrap());
        }

        #[test]
        fn weights_are_a_distribution(c in prop::collection::vec(-3.0f64..3.0, 1..12)) {
            prop_assume!(c.iter().any(|&x| x > 0.0));
            let w = head_weights(&manual(c, 0.0)).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn top_heads_prefix(c in prop::collection::vec(-3.0f64..3.0, 1..12), a in 1usize..12, b in 1usize..12) {
            let d = manual(c.clone(), 0.0);
            let n = c.len();
            let (k1, k2) = ((a.min(b) - 1) % n + 1, (a.max(b) - 1) % n + 1);
            let (k1, k2) = (k1.min(k2), k1.max(k2));
            let short = select_top_heads(&d, k1).unwrap();
            let long = select_top_heads(&d, k2).unwrap();
            prop_assert_eq!(&long[..k1], &short[..]);
        }
    }
}
