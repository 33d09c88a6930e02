//! Recorded decoding runs and their replay.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "DGTR" | u32 version | u32 header_len | header (JSON, UTF-8)
//!        | u64 payload_len | payload | u32 CRC-32C(payload)
//! ```
//!
//! The payload holds each step in order: its logits (either `vocab_size`
//! f64s, or `m` pairs of u32 id and f64 log-probability followed by the f64
//! remainder log-mass), then one f64 attention row per recorded head, each as
//! long as the prefix at that step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{greedy_decode, DecoderConfig, GenerationResult, StepOracle, StepOutput};
use crate::error::{invalid, Error, Result};
use crate::features::{context_mask, AttentionSnapshot, HeadId, ModelGeometry, PromptLayout, Role};
use crate::math::{LogitVector, TokenId};
use crate::util::crc32c;

pub const TRACE_MAGIC: &[u8; 4] = b"DGTR";
pub const TRACE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TOP_M: usize = 100;
/// Tolerance on `sum(exp(recorded)) + exp(remainder) == 1`.
pub const MASS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum LogitPayload {
    Full(LogitVector),
    /// Log-probabilities of the `m` most likely ids plus the log of the
    /// probability mass left to every other id.
    TopM {
        entries: Vec<(TokenId, f64)>,
        remainder_log_mass: f64,
    },
}

impl LogitPayload {
    pub fn top_m(logits: &LogitVector, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(invalid("top-m needs m >= 1"));
        }
        let lp = logits.log_softmax();
        let ids = logits.softmax().top_r(m)?;
        let entries: Vec<(TokenId, f64)> = ids.iter().map(|&t| (t, lp[t as usize])).collect();
        let mut kept = vec![false; lp.len()];
        ids.iter().for_each(|&t| kept[t as usize] = true);
        let rest: Vec<f64> = lp
            .iter()
            .zip(&kept)
            .filter(|(_, k)| !**k)
            .map(|(x, _)| *x)
            .collect();
        Ok(LogitPayload::TopM {
            entries,
            remainder_log_mass: log_sum_exp(&rest),
        })
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        match self {
            LogitPayload::Full(l) if l.len() != vocab_size => Err(invalid(format!(
                "{} logits for a vocabulary of {vocab_size}",
                l.len()
            ))),
            LogitPayload::Full(_) => Ok(()),
            LogitPayload::TopM {
                entries,
                remainder_log_mass,
            } => {
                if entries.is_empty() || entries.len() > vocab_size {
                    return Err(invalid(format!(
                        "top-m size {} outside 1..={vocab_size}",
                        entries.len()
                    )));
                }
                let mut seen = vec![false; vocab_size];
                for &(t, lp) in entries {
                    let slot = seen
                        .get_mut(t as usize)
                        .ok_or_else(|| invalid(format!("token {t} outside vocabulary")))?;
                    if *slot {
                        return Err(invalid(format!("token {t} recorded twice")));
                    }
                    *slot = true;
                    if !(lp <= 0.0) || lp.is_infinite() {
                        return Err(invalid(format!("log-probability {lp} for token {t}")));
                    }
                }
                if remainder_log_mass.is_nan() || *remainder_log_mass > 0.0 {
                    return Err(invalid("remainder log-mass must be <= 0"));
                }
                let mass: f64 =
                    entries.iter().map(|(_, lp)| lp.exp()).sum::<f64>() + remainder_log_mass.exp();
                if (mass - 1.0).abs() > MASS_TOL {
                    return Err(invalid(format!("recorded mass sums to {mass}")));
                }
                Ok(())
            }
        }
    }

    /// Full logit vector. For top-m payloads the remainder is spread
    /// uniformly over the unrecorded ids.
    pub fn reconstruct(&self, vocab_size: usize) -> Result<LogitVector> {
        match self {
            LogitPayload::Full(l) => Ok(l.clone()),
            LogitPayload::TopM {
                entries,
                remainder_log_mass,
            } => {
                let unrecorded = vocab_size - entries.len();
                let fill = if unrecorded == 0 {
                    0.0
                } else {
                    (remainder_log_mass - (unrecorded as f64).ln()).max(-1e300)
                };
                let mut out = vec![fill; vocab_size];
                for &(t, lp) in entries {
                    out[t as usize] = lp;
                }
                LogitVector::new(out)
            }
        }
    }

    /// Upper bound on the normalized-entropy error introduced by
    /// `reconstruct`: `r * ln(N - m) / ln N` for remainder mass `r`.
    pub fn entropy_error_bound(&self, vocab_size: usize) -> f64 {
        match self {
            LogitPayload::Full(_) => 0.0,
            LogitPayload::TopM {
                entries,
                remainder_log_mass,
            } => {
                let unrecorded = vocab_size - entries.len();
                if unrecorded <= 1 || vocab_size < 2 {
                    0.0
                } else {
                    remainder_log_mass.exp() * (unrecorded as f64).ln() / (vocab_size as f64).ln()
                }
            }
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step_index: usize,
    pub logits: LogitPayload,
    /// Rows for the trace's recorded heads over the prefix at this step.
    pub attention: AttentionSnapshot,
    pub recorded_token_id: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub format_version: u32,
    pub model_name: String,
    pub vocab_size: usize,
    pub geometry: ModelGeometry,
    /// Strictly increasing.
    pub heads: Vec<HeadId>,
    pub layout: PromptLayout,
    pub steps: Vec<StepTrace>,
    /// Display string per token id, when the recording had a tokenizer.
    pub token_strings: Option<Vec<String>>,
    pub gold_answer_ids: Option<Vec<TokenId>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_name: String,
    vocab_size: usize,
    geometry: ModelGeometry,
    heads: Vec<HeadId>,
    prompt_tokens: Vec<TokenId>,
    /// One role code per prompt token.
    prompt_roles: String,
    steps: Vec<StepHeader>,
    max_entropy_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_strings: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_answer_ids: Option<Vec<TokenId>>,
}

#[derive(Serialize, Deserialize)]
struct StepHeader {
    recorded_token_id: TokenId,
    /// Absent for full-vocabulary logits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top_m: Option<usize>,
}

impl TraceFile {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != TRACE_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.format_version));
        }
        if self.vocab_size < 2 {
            return Err(invalid("vocabulary needs at least 2 tokens"));
        }
        if self.heads.is_empty() {
            return Err(invalid("trace records no heads"));
        }
        if !self.heads.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("recorded heads must be strictly increasing"));
        }
        if let Some(h) = self.heads.iter().find(|h| !self.geometry.contains(**h)) {
            return Err(invalid(format!(
                "head {h} outside geometry {}",
                self.geometry
            )));
        }
        context_mask(&self.layout)?;
        if let Some(t) = self
            .layout
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.vocab_size)
        {
            return Err(invalid(format!("prompt token {t} outside vocabulary")));
        }
        if let Some(s) = &self.token_strings {
            if s.len() != self.vocab_size {
                return Err(invalid("token_strings must have one entry per id"));
            }
        }
        for (i, st) in self.steps.iter().enumerate() {
            if st.step_index != i {
                return Err(invalid(format!("step {i} carries index {}", st.step_index)));
            }
            if st.recorded_token_id as usize >= self.vocab_size {
                return Err(invalid(format!(
                    "step {i} recorded token outside vocabulary"
                )));
            }
            st.logits.validate(self.vocab_size)?;
            if st.attention.heads() != self.heads.as_slice() {
                return Err(invalid(format!(
                    "step {i} attention heads differ from the header"
                )));
            }
            if st.attention.seq_len() != self.layout.len() + i {
                return Err(invalid(format!(
                    "step {i} attention covers {} positions",
                    st.attention.seq_len()
                )));
            }
        }
        Ok(())
    }

    pub fn max_entropy_error(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.logits.entropy_error_bound(self.vocab_size))
            .fold(0.0, f64::max)
    }

    pub fn recorded_tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.recorded_token_id).collect()
    }

    /// Concatenated display strings, if the trace has them.
    pub fn render(&self, ids: &[TokenId]) -> Option<String> {
        let strings = self.token_strings.as_ref()?;
        ids.iter()
            .map(|&t| strings.get(t as usize).map(String::as_str))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            format_version: self.format_version,
            model_name: self.model_name.clone(),
            vocab_size: self.vocab_size,
            geometry: self.geometry,
            heads: self.heads.clone(),
            prompt_tokens: self.layout.tokens.clone(),
            prompt_roles: self.layout.roles.iter().map(|r| r.code()).collect(),
            steps: self
                .steps
                .iter()
                .map(|s| StepHeader {
                    recorded_token_id: s.recorded_token_id,
                    top_m: match &s.logits {
                        LogitPayload::Full(_) => None,
                        LogitPayload::TopM { entries, .. } => Some(entries.len()),
                    },
                })
                .collect(),
            max_entropy_error: self.max_entropy_error(),
            token_strings: self.token_strings.clone(),
            gold_answer_ids: self.gold_answer_ids.clone(),
        };
        let header = serde_json::to_vec(&header)?;

        let mut payload = Vec::new();
        for st in &self.steps {
            match &st.logits {
                LogitPayload::Full(l) => l
                    .as_slice()
                    .iter()
                    .for_each(|x| payload.extend(x.to_le_bytes())),
                LogitPayload::TopM {
                    entries,
                    remainder_log_mass,
                } => {
                    for &(t, lp) in entries {
                        payload.extend(t.to_le_bytes());
                        payload.extend(lp.to_le_bytes());
                    }
                    payload.extend(remainder_log_mass.to_le_bytes());
                }
            }
            for &h in &self.heads {
                st.attention
                    .row(h)?
                    .iter()
                    .for_each(|x| payload.extend(x.to_le_bytes()));
            }
        }

        let mut out = Vec::with_capacity(header.len() + payload.len() + 24);
        out.extend(TRACE_MAGIC);
        out.extend(self.format_version.to_le_bytes());
        out.extend(
            u32::try_from(header.len())
                .map_err(|_| invalid("header too large"))?
                .to_le_bytes(),
        );
        out.extend(&header);
        out.extend((payload.len() as u64).to_le_bytes());
        out.extend(&payload);
        out.extend(crc32c(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != TRACE_MAGIC {
            return Err(Error::CorruptTrace("bad magic".into()));
        }
        let version = r.u32()?;
        if version != TRACE_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::CorruptTrace(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(Error::UnsupportedVersion(header.format_version));
        }
        let payload_len =
            usize::try_from(r.u64()?).map_err(|_| Error::CorruptTrace("payload length".into()))?;
        let payload = r.take(payload_len)?;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptTrace(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let actual = crc32c(payload);
        if stored != actual {
            return Err(Error::CorruptTrace(format!(
                "checksum {stored:08x} does not match payload {actual:08x}"
            )));
        }

        let corrupt = |e: Error| Error::CorruptTrace(e.to_string());
        let roles = header
            .prompt_roles
            .chars()
            .map(|c| {
                Role::from_code(c).ok_or_else(|| Error::CorruptTrace(format!("role code {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = PromptLayout::new(header.prompt_tokens, roles).map_err(corrupt)?;
        let mut p = Reader {
            bytes: payload,
            pos: 0,
        };
        let mut steps = Vec::with_capacity(header.steps.len());
        for (i, sh) in header.steps.iter().enumerate() {
            let logits = match sh.top_m {
                None => LogitPayload::Full(
                    LogitVector::new(
                        (0..header.vocab_size)
                            .map(|_| p.f64())
                            .collect::<Result<_>>()?,
                    )
                    .map_err(corrupt)?,
                ),
                Some(m) => {
                    if m > header.vocab_size {
                        return Err(Error::CorruptTrace(format!(
                            "step {i} top-m {m} exceeds vocabulary"
                        )));
                    }
                    let entries = (0..m)
                        .map(|_| Ok((p.u32()?, p.f64()?)))
                        .collect::<Result<_>>()?;
                    LogitPayload::TopM {
                        entries,
                        remainder_log_mass: p.f64()?,
                    }
                }
            };
            let seq_len = layout.len() + i;
            let rows = header
                .heads
                .iter()
                .map(|&h| {
                    Ok((
                        h,
                        (0..seq_len).map(|_| p.f64()).collect::<Result<Vec<_>>>()?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            steps.push(StepTrace {
                step_index: i,
                logits,
                attention: AttentionSnapshot::new(seq_len, rows).map_err(corrupt)?,
                recorded_token_id: sh.recorded_token_id,
            });
        }
        if p.pos != payload.len() {
            return Err(Error::CorruptTrace(
                "payload longer than the header describes".into(),
            ));
        }
        let trace = TraceFile {
            format_version: version,
            model_name: header.model_name,
            vocab_size: header.vocab_size,
            geometry: header.geometry,
            heads: header.heads,
            layout,
            steps,
            token_strings: header.token_strings,
            gold_answer_ids: header.gold_answer_ids,
        };
        trace.validate().map_err(|e| match e {
            Error::UnsupportedVersion(_) => e,
            other => corrupt(other),
        })?;
        if trace.max_entropy_error().to_bits() != header.max_entropy_error.to_bits() {
            return Err(Error::CorruptTrace(
                "entropy error bound disagrees with payload".into(),
            ));
        }
        Ok(trace)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptTrace(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn write_trace(trace: &TraceFile, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, trace.to_bytes()?)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceFile> {
    TraceFile::from_bytes(&fs::read(path)?)
}

/// Serves recorded steps for as long as the decoder follows the recording.
#[derive(Debug, Clone)]
pub struct ReplayOracle {
    trace: TraceFile,
    logits: Vec<LogitVector>,
    calls: usize,
}

impl ReplayOracle {
    pub fn new(trace: TraceFile) -> Result<Self> {
        trace.validate()?;
        let logits = trace
            .steps
            .iter()
            .map(|s| s.logits.reconstruct(trace.vocab_size))
            .collect::<Result<_>>()?;
        Ok(Self {
            trace,
            logits,
            calls: 0,
        })
    }

    pub fn trace(&self) -> &TraceFile {
        &self.trace
    }
}

impl StepOracle for ReplayOracle {
    fn geometry(&self) -> ModelGeometry {
        self.trace.geometry
    }

    fn vocab_size(&self) -> usize {
        self.trace.vocab_size
    }

    fn step(&mut self, prefix: &[TokenId]) -> Result<StepOutput> {
        self.calls += 1;
        let prompt = &self.trace.layout.tokens;
        if !prefix.starts_with(prompt) {
            return Err(invalid("prefix does not start with the recorded prompt"));
        }
        let generated = &prefix[prompt.len()..];
        let t = generated.len();
        if generated
            .iter()
            .zip(&self.trace.steps)
            .any(|(&g, s)| g != s.recorded_token_id)
        {
            return Err(Error::Divergence { step: t });
        }
        let st = self
            .trace
            .steps
            .get(t)
            .ok_or(Error::TraceExhausted { step: t })?;
        Ok(StepOutput {
            logits: self.logits[t].clone(),
            attention: st.attention.clone(),
        })
    }

    fn calls(&self) -> usize {
        self.calls
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordConfig {
    pub model_name: String,
    /// `None` stores full logits.
    pub top_m: Option<usize>,
    /// `None` records every head.
    pub heads: Option<Vec<HeadId>>,
    pub decoder: DecoderConfig,
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self {
            model_name: "toy".into(),
            top_m: Some(DEFAULT_TOP_M),
            heads: None,
            decoder: DecoderConfig::default(),
        }
    }
}

struct Recorder<'a, O> {
    inner: &'a mut O,
    outputs: Vec<StepOutput>,
}

impl<O: StepOracle> StepOracle for Recorder<'_, O> {
    fn geometry(&self) -> ModelGeometry {
        self.inner.geometry()
    }
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn step(&mut self, prefix: &[TokenId]) -> Result<StepOutput> {
        let out = self.inner.step(prefix)?;
        self.outputs.push(out.clone());
        Ok(out)
    }
    fn calls(&self) -> usize {
        self.inner.calls()
    }
}

/// Runs greedy decoding and captures every step as a trace.
pub fn record_greedy_trace<O: StepOracle>(
    oracle: &mut O,
    layout: &PromptLayout,
    config: &RecordConfig,
) -> Result<(TraceFile, GenerationResult)> {
    let geometry = oracle.geometry();
    let vocab_size = oracle.vocab_size();
    let heads = match &config.heads {
        Some(h) => {
            let mut h = h.clone();
            h.sort();
            h.dedup();
            h
        }
        None => geometry.all_heads(),
    };
    let mut rec = Recorder {
        inner: oracle,
        outputs: Vec::new(),
    };
    let result = greedy_decode(&mut rec, layout, &config.decoder)?;
    let steps = rec
        .outputs
        .into_iter()
        .zip(&result.token_ids)
        .enumerate()
        .map(|(i, (out, &tok))| {
            let logits = match config.top_m {
                Some(m) if m < vocab_size => LogitPayload::top_m(&out.logits, m)?,
                _ => LogitPayload::Full(out.logits),
            };
            let rows = heads
                .iter()
                .map(|&h| Ok((h, out.attention.row(h)?.to_vec())))
                .collect::<Result<Vec<_>>>()?;
            Ok(StepTrace {
                step_index: i,
                logits,
                attention: AttentionSnapshot::new(out.attention.seq_len(), rows)?,
                recorded_token_id: tok,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let trace = TraceFile {
        format_version: TRACE_FORMAT_VERSION,
        model_name: config.model_name.clone(),
        vocab_size,
        geometry,
        heads,
        layout: layout.clone(),
        steps,
        token_strings: None,
        gold_answer_ids: None,
    };
    trace.validate()?;
    Ok((trace, result))
}
