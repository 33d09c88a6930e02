//! Attention-ratio featurization of retrieved-context tokens.
//!
//! A head's raw attention row is restricted to the context positions and
//! renormalized there, which strips out attention-sink mass and makes heads
//! with different overall scales comparable. A context token's feature
//! vector is the list of those ratios across a chosen list of heads.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::TokenId;

/// Context mass below which a head is treated as not attending to the context.
pub const DEGENERATE_CONTEXT_MASS: f64 = 1e-12;

/// Tolerance on attention row sums.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// `(layer, head)`, both 0-based. Serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl From<(usize, usize)> for HeadId {
    fn from((layer, head): (usize, usize)) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for (usize, usize) {
    fn from(h: HeadId) -> Self {
        (h.layer, h.head)
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub num_layers: usize,
    pub num_heads: usize,
}

impl ModelGeometry {
    pub const fn new(num_layers: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            num_heads,
        }
    }

    pub fn contains(&self, head: HeadId) -> bool {
        head.layer < self.num_layers && head.head < self.num_heads
    }

    /// Every head in layer-major order.
    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.num_layers)
            .flat_map(|l| (0..self.num_heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }

    pub fn head_count(&self) -> usize {
        self.num_layers * self.num_heads
    }
}

impl fmt::Display for ModelGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.num_layers, self.num_heads)
    }
}

/// Attention rows from the current decode position to every prior position,
/// one per recorded head. Rows are kept sorted by head id.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    seq_len: usize,
    heads: Vec<HeadId>,
    rows: Vec<Vec<f64>>,
}

impl AttentionSnapshot {
    pub fn new(seq_len: usize, mut rows: Vec<(HeadId, Vec<f64>)>) -> Result<Self> {
        if seq_len == 0 {
            return Err(invalid("snapshot seq_len must be positive"));
        }
        rows.sort_by_key(|(h, _)| *h);
        for pair in rows.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(invalid(format!(
                    "duplicate attention row for {}",
                    pair[0].0
                )));
            }
        }
        for (head, row) in &rows {
            if row.len() != seq_len {
                return Err(invalid(format!(
                    "row for {head} has length {}, expected {seq_len}",
                    row.len()
                )));
            }
            if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(invalid(format!(
                    "row for {head} has a negative or non-finite weight"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("row for {head} sums to {s}")));
            }
        }
        let (heads, rows) = rows.into_iter().unzip();
        Ok(Self {
            seq_len,
            heads,
            rows,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Recorded heads in layer-major order.
    pub fn heads(&self) -> &[HeadId] {
        &self.heads
    }

    pub fn row(&self, head: HeadId) -> Result<&[f64]> {
        self.heads
            .binary_search(&head)
            .map(|i| self.rows[i].as_slice())
            .map_err(|_| invalid(format!("head {head} not present in snapshot")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Template,
    Context,
    Question,
    Generated,
}

impl Role {
    pub fn code(self) -> char {
        match self {
            Role::Template => 'T',
            Role::Context => 'C',
            Role::Question => 'Q',
            Role::Generated => 'G',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'T' => Some(Role::Template),
            'C' => Some(Role::Context),
            'Q' => Some(Role::Question),
            'G' => Some(Role::Generated),
            _ => None,
        }
    }
}

/// Prompt token ids with one role label per position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub tokens: Vec<TokenId>,
    pub roles: Vec<Role>,
}

impl PromptLayout {
    pub fn new(tokens: Vec<TokenId>, roles: Vec<Role>) -> Result<Self> {
        if tokens.len() != roles.len() {
            return Err(invalid(format!(
                "{} tokens but {} role labels",
                tokens.len(),
                roles.len()
            )));
        }
        Ok(Self { tokens, roles })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sequence positions of the retrieved context and the token at each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpan {
    positions: Vec<usize>,
    token_ids: Vec<TokenId>,
}

impl ContextSpan {
    pub fn new(positions: Vec<usize>, token_ids: Vec<TokenId>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyContext);
        }
        if positions.len() != token_ids.len() {
            return Err(invalid("context positions and token ids differ in length"));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("context positions must be strictly increasing"));
        }
        Ok(Self {
            positions,
            token_ids,
        })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.positions.binary_search(&position).is_ok()
    }

    fn last_position(&self) -> usize {
        *self.positions.last().expect("span is non-empty")
    }
}

/// Selects exactly the positions labeled as context.
pub fn context_mask(layout: &PromptLayout) -> Result<ContextSpan> {
    let (positions, token_ids) = layout
        .roles
        .iter()
        .zip(&layout.tokens)
        .enumerate()
        .filter(|(_, (role, _))| **role == Role::Context)
        .map(|(i, (_, &tok))| (i, tok))
        .unzip();
    ContextSpan::new(positions, token_ids)
}

/// Attention ratios for one context token, laid out in `head_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub head_order: Vec<HeadId>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, head_order: Vec<HeadId>) -> Result<Self> {
        if values.len() != head_order.len() {
            return Err(invalid("feature values and head order differ in length"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("feature values must lie in [0, 1]"));
        }
        Ok(Self { values, head_order })
    }

    /// Keeps the entries for `heads`, in that order.
    pub fn select(&self, heads: &[HeadId]) -> Result<Self> {
        let values = heads
            .iter()
            .map(|h| {
                self.head_order
                    .iter()
                    .position(|x| x == h)
                    .map(|i| self.values[i])
                    .ok_or_else(|| invalid(format!("head {h} not in feature layout")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            values,
            head_order: heads.to_vec(),
        })
    }
}

fn context_mass(row: &[f64], span: &ContextSpan) -> f64 {
    span.positions.iter().map(|&p| row[p]).sum()
}

fn ratio(weight: f64, mass: f64) -> f64 {
    if mass < DEGENERATE_CONTEXT_MASS {
        0.0
    } else {
        (weight / mass).clamp(0.0, 1.0)
    }
}

fn check_span_fits(span: &ContextSpan, seq_len: usize) -> Result<()> {
    if span.last_position() >= seq_len {
        return Err(invalid(format!(
            "context position {} beyond sequence length {seq_len}",
            span.last_position()
        )));
    }
    Ok(())
}

/// Ratio of position `j`'s weight to the total context weight of one raw row.
/// The row need not be normalized.
pub fn row_attention_ratio(row: &[f64], span: &ContextSpan, j: usize) -> Result<f64> {
    if !span.contains(j) {
        return Err(invalid(format!("position {j} is not in the context span")));
    }
    check_span_fits(span, row.len())?;
    Ok(ratio(row[j], context_mass(row, span)))
}

pub fn attention_ratio(
    snapshot: &AttentionSnapshot,
    head: HeadId,
    span: &ContextSpan,
    j: usize,
) -> Result<f64> {
    row_attention_ratio(snapshot.row(head)?, span, j)
}

fn check_heads(heads: &[HeadId]) -> Result<()> {
    if heads.is_empty() {
        return Err(invalid("head list is empty"));
    }
    let mut seen = BTreeSet::new();
    for h in heads {
        if !seen.insert(*h) {
            return Err(invalid(format!("duplicate head {h}")));
        }
    }
    Ok(())
}

pub fn topk_feature_vector(
    snapshot: &AttentionSnapshot,
    span: &ContextSpan,
    j: usize,
    heads: &[HeadId],
) -> Result<FeatureVector> {
    check_heads(heads)?;
    let values = heads
        .iter()
        .map(|&h| attention_ratio(snapshot, h, span, j))
        .collect::<Result<_>>()?;
    Ok(FeatureVector {
        values,
        head_order: heads.to_vec(),
    })
}

/// Ratios over every head in the snapshot, layer-major.
pub fn full_feature_vector(
    snapshot: &AttentionSnapshot,
    span: &ContextSpan,
    j: usize,
) -> Result<FeatureVector> {
    topk_feature_vector(snapshot, span, j, snapshot.heads())
}

/// Ratio matrix for all context positions at once: entry `[i][k]` is the
/// ratio of the i-th span position under `heads[k]`. Context mass is summed
/// once per head.
pub fn context_ratio_matrix(
    snapshot: &AttentionSnapshot,
    span: &ContextSpan,
    heads: &[HeadId],
) -> Result<Vec<Vec<f64>>> {
    check_heads(heads)?;
    check_span_fits(span, snapshot.seq_len())?;
    let mut out = vec![Vec::with_capacity(heads.len()); span.len()];
    for &h in heads {
        let row = snapshot.row(h)?;
        let mass = context_mass(row, span);
        for (feat, &p) in out.iter_mut().zip(&span.positions) {
            feat.push(ratio(row[p], mass));
        }
    }
    Ok(out)
}
