// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generation traces and their JSON file format.
//!
//! A trace holds everything the uncertainty scores consume: prompt and
//! response ids, the per-step next-token distributions, attention matrices
//! over the full `prompt ++ response` sequence and the final block's MLP
//! pre-activations. Externally produced traces may carry only the chosen-token
//! log-probabilities and token entropies; operations that need the full
//! distributions then fail with [`Error::CapabilityMissing`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadId;
use crate::tensor::Matrix;

pub const TRACE_SCHEMA: &str = "MECHUQ-TRACE-v1";

/// Ground-truth label of a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Grounded,
    Hallucinated,
}

impl Label {
    /// `0` for grounded, `1` for hallucinated.
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Grounded => 0,
            Label::Hallucinated => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Grounded),
            1 => Ok(Label::Hallucinated),
            _ => Err(Error::invalid(format!("label must be 0 or 1, got {v}"))),
        }
    }

    pub fn is_hallucinated(self) -> bool {
        self == Label::Hallucinated
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).map_err(serde::de::Error::custom)
    }
}

/// How a trace was produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceMeta {
    /// `"greedy"`, `"temperature"` or `"external"`.
    pub decoding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Per-step predictive data of a trace.
#[derive(Debug, Clone, PartialEq)]
pub enum StepData {
    /// One full next-token distribution per response token.
    Full(Vec<Vec<f64>>),
    /// Only the entropy of each step distribution.
    Compressed { token_entropies: Vec<f64> },
}

/// A prompt, the generated response and everything captured while scoring it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub id: String,
    pub model_id: String,
    pub prompt_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    pub steps: StepData,
    /// `ln p(r_t)` for each response token.
    pub chosen_logprobs: Vec<f64>,
    /// `N × N` post-softmax attention per captured head.
    pub attention: BTreeMap<HeadId, Matrix>,
    /// `N × d_mlp`
    pub final_mlp_preact: Option<Matrix>,
    pub label: Option<Label>,
    pub meta: TraceMeta,
}

impl GenerationTrace {
    /// Response length `n`.
    pub fn n(&self) -> usize {
        self.response_tokens.len()
    }

    /// Total length `N = |prompt| + n`.
    pub fn total_len(&self) -> usize {
        self.prompt_tokens.len() + self.response_tokens.len()
    }

    /// `prompt ++ response`.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.response_tokens);
        t
    }

    pub fn has_full_distributions(&self) -> bool {
        matches!(self.steps, StepData::Full(_))
    }

    /// The per-step distributions, or a capability error for compressed traces.
    pub fn step_distributions(&self) -> Result<&[Vec<f64>]> {
        match &self.steps {
            StepData::Full(d) => Ok(d),
            StepData::Compressed { .. } => Err(Error::CapabilityMissing(format!(
                "trace {} carries no step_distributions (compressed form)",
                self.id
            ))),
        }
    }

    pub fn attention_for(&self, head: HeadId) -> Result<&Matrix> {
        self.attention.get(&head).ok_or_else(|| {
            Error::MissingCapture(format!(
                "trace {} has no attention for head {head}",
                self.id
            ))
        })
    }

    pub fn require_label(&self) -> Result<Label> {
        self.label
            .ok_or_else(|| Error::invalid(format!("trace {} is unlabeled", self.id)))
    }

    /// Check the structural invariants; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let total = self.total_len();
        if n == 0 {
            return Err(Error::invalid(
                "response_tokens: response must contain at least one token",
            ));
        }
        if self.prompt_tokens.is_empty() {
            return Err(Error::invalid("prompt_tokens: prompt must be nonempty"));
        }
        if self.chosen_logprobs.len() != n {
            return Err(Error::invalid(format!(
                "chosen_logprobs: expected {n} entries, got {}",
                self.chosen_logprobs.len()
            )));
        }
        if self.chosen_logprobs.iter().any(|v| v.is_nan() || *v > 1e-9) {
            return Err(Error::invalid(
                "chosen_logprobs: entries must be log-probabilities (≤ 0)",
            ));
        }
        match &self.steps {
            StepData::Full(dists) => {
                if dists.len() != n {
                    return Err(Error::invalid(format!(
                        "step_distributions: expected {n} rows, got {}",
                        dists.len()
                    )));
                }
                for (t, (d, &tok)) in dists.iter().zip(&self.response_tokens).enumerate() {
                    check_distribution(d)
                        .map_err(|m| Error::invalid(format!("step_distributions[{t}]: {m}")))?;
                    if tok >= d.len() {
                        return Err(Error::invalid(format!(
                            "response_tokens[{t}]: id {tok} outside the vocabulary"
                        )));
                    }
                    let lp = d[tok].max(1e-300).ln();
                    if (lp - self.chosen_logprobs[t]).abs() > 1e-9 {
                        return Err(Error::invalid(format!(
                            "chosen_logprobs[{t}]: {} disagrees with step distribution ({lp})",
                            self.chosen_logprobs[t]
                        )));
                    }
                }
            }
            StepData::Compressed { token_entropies } => {
                if token_entropies.len() != n {
                    return Err(Error::invalid(format!(
                        "token_entropies: expected {n} entries, got {}",
                        token_entropies.len()
                    )));
                }
                if token_entropies
                    .iter()
                    .any(|e| !e.is_finite() || *e < -1e-12)
                {
                    return Err(Error::invalid(
                        "token_entropies: entries must be finite and nonnegative",
                    ));
                }
            }
        }
        for (h, a) in &self.attention {
            if a.shape() != (total, total) {
                return Err(Error::invalid(format!(
                    "attention.{h}: expected {total}×{total}, got {}×{}",
                    a.rows(),
                    a.cols()
                )));
            }
            check_causal_stochastic(a)
                .map_err(|m| Error::invalid(format!("attention.{h}: {m}")))?;
        }
        if let Some(m) = &self.final_mlp_preact {
            if m.rows() != total {
                return Err(Error::invalid(format!(
                    "final_mlp_preact: expected {total} rows, got {}",
                    m.rows()
                )));
            }
        }
        Ok(())
    }
}

fn check_distribution(d: &[f64]) -> std::result::Result<(), String> {
    if d.is_empty() {
        return Err("empty distribution".into());
    }
    if d.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("entries must be finite and nonnegative".into());
    }
    let s: f64 = d.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(format!("sums to {s}, not 1"));
    }
    Ok(())
}

/// Causal (upper triangle zero) with rows summing to 1 within 1e-6.
pub(crate) fn check_causal_stochastic(a: &Matrix) -> std::result::Result<(), String> {
    for i in 0..a.rows() {
        let row = a.row(i);
        if row.iter().any(|&x| !(-1e-12..=1.0 + 1e-9).contains(&x)) {
            return Err(format!("row {i} has entries outside [0,1]"));
        }
        if row[i + 1..].iter().any(|&x| x != 0.0) {
            return Err(format!("row {i} attends to future positions"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(format!("row {i} sums to {s}"));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceFile {
    schema_version: String,
    id: String,
    model_id: String,
    prompt_tokens: Vec<usize>,
    response_tokens: Vec<usize>,
    /// Declared `n`.
    n: usize,
    /// Declared `N`.
    total_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step_distributions: Option<Vec<Vec<f64>>>,
    chosen_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_entropies: Option<Vec<f64>>,
    #[serde(default)]
    attention: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_mlp_preact: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    #[serde(default)]
    meta: TraceMeta,
}

fn matrix_from_nested(field: &str, rows: Vec<Vec<f64>>) -> Result<Matrix> {
    Matrix::from_rows(&rows).map_err(|e| Error::invalid(format!("{field}: {e}")))
}

impl GenerationTrace {
    /// Serialize to the `MECHUQ-TRACE-v1` JSON document.
    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let (step_distributions, token_entropies) = match &self.steps {
            StepData::Full(d) => (Some(d.clone()), None),
            StepData::Compressed { token_entropies } => (None, Some(token_entropies.clone())),
        };
        let doc = TraceFile {
            schema_version: TRACE_SCHEMA.into(),
            id: self.id.clone(),
            model_id: self.model_id.clone(),
            prompt_tokens: self.prompt_tokens.clone(),
            response_tokens: self.response_tokens.clone(),
            n: self.n(),
            total_len: self.total_len(),
            step_distributions,
            chosen_logprobs: self.chosen_logprobs.clone(),
            token_entropies,
            attention: self
                .attention
                .iter()
                .map(|(h, m)| (h.to_string(), m.to_rows()))
                .collect(),
            final_mlp_preact: self.final_mlp_preact.as_ref().map(Matrix::to_rows),
            label: self.label,
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_str()) {
            Some(TRACE_SCHEMA) => {}
            Some(other) => {
                return Err(Error::format(format!(
                    "schema_version: unknown version {other:?}"
                )))
            }
            None => return Err(Error::format("schema_version: missing")),
        }
        let doc: TraceFile = serde_json::from_value(value)?;
        let steps = match (doc.step_distributions, doc.token_entropies) {
            (Some(d), None) => StepData::Full(d),
            (None, Some(e)) => StepData::Compressed { token_entropies: e },
            (Some(_), Some(_)) => return Err(Error::invalid(
                "step_distributions: give either full distributions or token_entropies, not both",
            )),
            (None, None) => {
                return Err(Error::invalid(
                    "step_distributions: neither distributions nor token_entropies present",
                ))
            }
        };
        let mut attention = BTreeMap::new();
        for (k, rows) in doc.attention {
            let h: HeadId = k
                .parse()
                .map_err(|_| Error::invalid(format!("attention: bad head key {k:?}")))?;
            attention.insert(h, matrix_from_nested(&format!("attention.{k}"), rows)?);
        }
        let final_mlp_preact = doc
            .final_mlp_preact
            .map(|r| matrix_from_nested("final_mlp_preact", r))
            .transpose()?;
        let trace = GenerationTrace {
            id: doc.id,
            model_id: doc.model_id,
            prompt_tokens: doc.prompt_tokens,
            response_tokens: doc.response_tokens,
            steps,
            chosen_logprobs: doc.chosen_logprobs,
            attention,
            final_mlp_preact,
            label: doc.label,
            meta: doc.meta,
        };
        if doc.n != trace.n() {
            return Err(Error::invalid(format!(
                "n: declared {} but response has {} tokens",
                doc.n,
                trace.n()
            )));
        }
        if doc.total_len != trace.total_len() {
            return Err(Error::invalid(format!(
                "total_len: declared {} but sequence has {}",
                doc.total_len,
                trace.total_len()
            )));
        }
        trace.validate()?;
        Ok(trace)
    }
}

pub fn write_trace(trace: &GenerationTrace, path: impl AsRef<Path>) -> Result<()> {
    crate::io_util::write_atomic(path.as_ref(), trace.to_json()?.as_bytes())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<GenerationTrace> {
    GenerationTrace::from_json(&std::fs::read_to_string(path)?)
}

/// Read every `*.json` trace in a directory, ordered by file name.
pub fn read_trace_dir(dir: impl AsRef<Path>) -> Result<Vec<GenerationTrace>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(read_trace).collect()
}
