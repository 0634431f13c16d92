// SPDX-License-Identifier: MIT OR Apache-2.0

//! Uncertainty scores over generation traces.
//!
//! The gated score multiplies an aggregate of the induction heads' sink
//! rates with an aggregate of per-token predictive entropy:
//!
//! ```text
//! score = transform(f(s_1..s_k)) · g(e_1..e_n)
//! ```
//!
//! A sink rate near 1 means the response's attention piles onto one
//! position (the head is idle); near `1/n` means the head spreads attention
//! over the context it copies from. Every score here is oriented so that
//! larger means more uncertain.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::HeadRanking;
use crate::error::{Error, Result};
use crate::tensor::{entropy, Matrix};
use crate::trace::{check_causal_stochastic, GenerationTrace, StepData};

/// Floor applied to chosen-token probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-300;

/// Natural-log entropy of each step distribution.
pub fn token_entropies(trace: &GenerationTrace) -> Result<Vec<f64>> {
    match &trace.steps {
        StepData::Compressed { token_entropies } => Ok(token_entropies.clone()),
        StepData::Full(dists) => dists
            .iter()
            .enumerate()
            .map(|(t, d)| {
                let s: f64 = d.iter().sum();
                if d.is_empty()
                    || d.iter().any(|p| !p.is_finite() || *p < 0.0)
                    || (s - 1.0).abs() > 1e-9
                {
                    return Err(Error::invalid(format!(
                        "step distribution {t} is not a probability vector"
                    )));
                }
                Ok(entropy(d))
            })
            .collect(),
    }
}

/// Maximum over columns of the attention the last `n` rows send to that
/// column, divided by the number of those rows that can see it.
///
/// With 1-based indices the rows are `N−n+1..N` and column `j` is normalized
/// by `min(n, N−j+1)`.
///
/// ```
/// use mechuq::tensor::Matrix;
/// use mechuq::uq::sink_rate;
///
/// let a = Matrix::from_rows(&[
///     vec![1.0, 0.0, 0.0],
///     vec![0.5, 0.5, 0.0],
///     vec![0.2, 0.3, 0.5],
/// ])
/// .unwrap();
/// assert!((sink_rate(&a, 2).unwrap() - 0.5).abs() < 1e-12);
/// ```
pub fn sink_rate(attn: &Matrix, n: usize) -> Result<f64> {
    let big_n = attn.rows();
    if attn.cols() != big_n {
        return Err(Error::shape(format!(
            "attention must be square, got {}×{}",
            attn.rows(),
            attn.cols()
        )));
    }
    if n == 0 || n >= big_n {
        return Err(Error::invalid(format!(
            "response length n = {n} must satisfy 1 ≤ n < N = {big_n}"
        )));
    }
    check_causal_stochastic(attn).map_err(|m| Error::invalid(format!("attention: {m}")))?;
    Ok(sink_rate_unchecked(attn, n))
}

pub(crate) fn sink_rate_unchecked(attn: &Matrix, n: usize) -> f64 {
    let big_n = attn.rows();
    let mut col_sums = vec![0.0; big_n];
    for i in big_n - n..big_n {
        for (s, a) in col_sums.iter_mut().zip(attn.row(i)) {
            *s += a;
        }
    }
    // 0-based column j has N − j response-or-later rows able to see it.
    col_sums
        .iter()
        .enumerate()
        .map(|(j, s)| s / n.min(big_n - j) as f64)
        .fold(0.0, f64::max)
}

/// Sink rates of the top-`k` ranked heads, in ranking order.
pub fn head_sink_rates(trace: &GenerationTrace, heads: &HeadRanking, k: usize) -> Result<Vec<f64>> {
    heads
        .top(k)?
        .into_iter()
        .map(|h| sink_rate(trace.attention_for(h)?, trace.n()))
        .collect()
}

/// How a sequence of values is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Min,
    Max,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Min => "min",
            Aggregation::Max => "max",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "min" => Ok(Aggregation::Min),
            "max" => Ok(Aggregation::Max),
            _ => Err(Error::invalid(format!(
                "unknown aggregation {s:?} (mean, min, max)"
            ))),
        }
    }
}

pub fn aggregate(values: &[f64], kind: Aggregation) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty sequence"));
    }
    Ok(match kind {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Transform applied to the aggregated sink rate before gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    /// Replace the sink rate by 1, leaving the pure entropy score.
    Trivial,
    Tanh,
    Softsign,
}

impl Transform {
    pub const ALL: [Transform; 4] = [
        Transform::Identity,
        Transform::Trivial,
        Transform::Tanh,
        Transform::Softsign,
    ];
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::Identity => "identity",
            Transform::Trivial => "trivial",
            Transform::Tanh => "tanh",
            Transform::Softsign => "softsign",
        })
    }
}

impl FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Transform::Identity),
            "trivial" => Ok(Transform::Trivial),
            "tanh" => Ok(Transform::Tanh),
            "softsign" => Ok(Transform::Softsign),
            _ => Err(Error::invalid(format!(
                "unknown transform {s:?} (identity, trivial, tanh, softsign)"
            ))),
        }
    }
}

pub fn gating_transform(s: f64, kind: Transform) -> f64 {
    match kind {
        Transform::Identity => s,
        Transform::Trivial => 1.0,
        Transform::Tanh => s.tanh(),
        Transform::Softsign => s / (1.0 + s.abs()),
    }
}

/// A score with its audit components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqScore {
    pub method: String,
    pub value: f64,
    /// Named intermediate values (per-head sink rates, aggregates).
    pub components: BTreeMap<String, f64>,
    /// Set when a chosen-token probability hit [`LOG_FLOOR`].
    pub floored: bool,
}

/// Configuration of the gated score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrygueConfig {
    pub k: usize,
    /// Aggregation over the top-k sink rates.
    pub f: Aggregation,
    /// Aggregation over token entropies.
    pub g: Aggregation,
    pub transform: Transform,
}

impl IntrygueConfig {
    /// Minimum sink rate times maximum token entropy.
    pub fn minmax(k: usize) -> Self {
        Self {
            k,
            f: Aggregation::Min,
            g: Aggregation::Max,
            transform: Transform::Identity,
        }
    }

    /// Mean sink rate times mean token entropy.
    pub fn mean(k: usize) -> Self {
        Self {
            k,
            f: Aggregation::Mean,
            g: Aggregation::Mean,
            transform: Transform::Identity,
        }
    }

    pub fn with_transform(mut self, t: Transform) -> Self {
        self.transform = t;
        self
    }

    pub fn name(&self) -> String {
        let base = match (self.f, self.g) {
            (Aggregation::Min, Aggregation::Max) => "intrygue-minmax".to_string(),
            (Aggregation::Mean, Aggregation::Mean) => "intrygue-mean".to_string(),
            (f, g) => format!("intrygue-{f}-{g}"),
        };
        if self.transform == Transform::Identity {
            base
        } else {
            format!("{base}-{}", self.transform)
        }
    }
}

/// Combine precomputed sink rates and entropies.
pub fn intrygue_from_parts(sinks: &[f64], entropies: &[f64], cfg: IntrygueConfig) -> Result<f64> {
    let s = aggregate(sinks, cfg.f)?;
    let e = aggregate(entropies, cfg.g)?;
    Ok(gating_transform(s, cfg.transform) * e)
}

pub fn intrygue(
    trace: &GenerationTrace,
    heads: &HeadRanking,
    cfg: IntrygueConfig,
) -> Result<UqScore> {
    let sinks = head_sink_rates(trace, heads, cfg.k)?;
    let ents = token_entropies(trace)?;
    let value = intrygue_from_parts(&sinks, &ents, cfg)?;
    let mut components = BTreeMap::new();
    for (h, s) in heads.top(cfg.k)?.iter().zip(&sinks) {
        components.insert(format!("sink_{h}"), *s);
    }
    components.insert("sink_agg".into(), aggregate(&sinks, cfg.f)?);
    components.insert("entropy_agg".into(), aggregate(&ents, cfg.g)?);
    Ok(UqScore {
        method: cfg.name(),
        value,
        components,
        floored: false,
    })
}

/// Logit-based baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    MaxEntropy,
    LnEntropy,
    MaxProb,
    Perplexity,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::MaxEntropy,
        Baseline::LnEntropy,
        Baseline::MaxProb,
        Baseline::Perplexity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::MaxEntropy => "max_entropy",
            Baseline::LnEntropy => "ln_entropy",
            Baseline::MaxProb => "max_prob",
            Baseline::Perplexity => "perplexity",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s || b.name().replace('_', "-") == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline {s:?}")))
    }
}

/// Chosen-token log-probabilities with the floor applied; the flag reports
/// whether any entry was floored.
fn chosen_logprobs(trace: &GenerationTrace) -> (Vec<f64>, bool) {
    let floor = LOG_FLOOR.ln();
    let mut floored = false;
    let lp = trace
        .chosen_logprobs
        .iter()
        .map(|&l| {
            if l < floor || l.is_nan() {
                floored = true;
                floor
            } else {
                l
            }
        })
        .collect();
    (lp, floored)
}

pub fn baseline_score(trace: &GenerationTrace, method: Baseline) -> Result<UqScore> {
    if trace.n() == 0 {
        return Err(Error::invalid("trace has an empty response"));
    }
    let (value, floored) = match method {
        Baseline::MaxEntropy => (
            aggregate(&token_entropies(trace)?, Aggregation::Max)?,
            false,
        ),
        Baseline::LnEntropy => (
            aggregate(&token_entropies(trace)?, Aggregation::Mean)?,
            false,
        ),
        Baseline::MaxProb => {
            let (lp, fl) = chosen_logprobs(trace);
            (1.0 - lp.iter().sum::<f64>().exp(), fl)
        }
        Baseline::Perplexity => {
            let (lp, fl) = chosen_logprobs(trace);
            ((-lp.iter().sum::<f64>() / lp.len() as f64).exp(), fl)
        }
    };
    Ok(UqScore {
        method: method.name().into(),
        value,
        components: BTreeMap::new(),
        floored,
    })
}

/// Rank of each chosen token within its step distribution (0 = argmax).
/// Needs full distributions.
pub fn chosen_token_ranks(trace: &GenerationTrace) -> Result<Vec<usize>> {
    let dists = trace.step_distributions()?;
    Ok(dists
        .iter()
        .zip(&trace.response_tokens)
        .map(|(d, &tok)| d.iter().filter(|&&p| p > d[tok]).count())
        .collect())
}

/// Any scoring method understood by [`score_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Intrygue(IntrygueConfig),
    Baseline(Baseline),
    /// Aggregated top-k sink rate alone.
    SinkRate {
        k: usize,
        f: Aggregation,
    },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Intrygue(c) => c.name(),
            Method::Baseline(b) => b.name().to_string(),
            Method::SinkRate { f, .. } => format!("sink-{f}"),
        }
    }

    /// Parse a method name; `k` applies to head-based methods.
    pub fn parse(name: &str, k: usize) -> Result<Self> {
        match name {
            "intrygue-minmax" => Ok(Method::Intrygue(IntrygueConfig::minmax(k))),
            "intrygue-mean" => Ok(Method::Intrygue(IntrygueConfig::mean(k))),
            "sink-mean" => Ok(Method::SinkRate {
                k,
                f: Aggregation::Mean,
            }),
            "sink-min" => Ok(Method::SinkRate {
                k,
                f: Aggregation::Min,
            }),
            "sink-max" => Ok(Method::SinkRate {
                k,
                f: Aggregation::Max,
            }),
            other => {
                if let Some(rest) = other.strip_prefix("intrygue-") {
                    // intrygue-<f>-<g>[-<transform>]
                    let parts: Vec<&str> = rest.split('-').collect();
                    let (f, g, t) = match parts.as_slice() {
                        ["minmax", t] => (Aggregation::Min, Aggregation::Max, t.parse()?),
                        ["mean", t] if t.parse::<Transform>().is_ok() => {
                            (Aggregation::Mean, Aggregation::Mean, t.parse()?)
                        }
                        [f, g] => (f.parse()?, g.parse()?, Transform::Identity),
                        [f, g, t] => (f.parse()?, g.parse()?, t.parse()?),
                        _ => return Err(Error::invalid(format!("unknown method {other:?}"))),
                    };
                    return Ok(Method::Intrygue(IntrygueConfig {
                        k,
                        f,
                        g,
                        transform: t,
                    }));
                }
                Ok(Method::Baseline(other.parse()?))
            }
        }
    }
}

pub fn score_trace(
    trace: &GenerationTrace,
    heads: &HeadRanking,
    method: Method,
) -> Result<UqScore> {
    match method {
        Method::Intrygue(c) => intrygue(trace, heads, c),
        Method::Baseline(b) => baseline_score(trace, b),
        Method::SinkRate { k, f } => {
            let sinks = head_sink_rates(trace, heads, k)?;
            let mut components = BTreeMap::new();
            for (h, s) in heads.top(k)?.iter().zip(&sinks) {
                components.insert(format!("sink_{h}"), *s);
            }
            Ok(UqScore {
                method: method.name(),
                value: aggregate(&sinks, f)?,
                components,
                floored: false,
            })
        }
    }
}

/// One row of a score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub trace_id: String,
    pub score: UqScore,
    pub label: Option<u8>,
}

/// Score traces in parallel; rows come back sorted by trace id.
pub fn score_traces(
    traces: &[GenerationTrace],
    heads: &HeadRanking,
    methods: &[Method],
) -> Result<Vec<ScoreRow>> {
    let mut rows: Vec<ScoreRow> = traces
        .par_iter()
        .map(|t| {
            methods
                .iter()
                .map(|m| {
                    Ok(ScoreRow {
                        trace_id: t.id.clone(),
                        score: score_trace(t, heads, *m)?,
                        label: t.label.map(|l| l.as_u8()),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        a.trace_id
            .cmp(&b.trace_id)
            .then_with(|| a.score.method.cmp(&b.score.method))
    });
    Ok(rows)
}

/// Render rows as CSV: `trace_id,method,value,label` followed by one column
/// per component name seen in any row (sorted). Missing cells are empty.
pub fn scores_to_csv(rows: &[ScoreRow]) -> Result<String> {
    let comps: std::collections::BTreeSet<&str> = rows
        .iter()
        .flat_map(|r| r.score.components.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trace_id", "method", "value", "label"];
    header.extend(comps.iter().copied());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.trace_id.clone(),
            r.score.method.clone(),
            r.score.value.to_string(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
        ];
        rec.extend(comps.iter().map(|c| {
            r.score
                .components
                .get(*c)
                .map(|v| v.to_string())
                .unwrap_or_default()
        }));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("score table: {e}"))
}

/// A parsed score-table row (components are not retained).
#[derive(Debug, Clone, PartialEq)]
pub struct CsvScore {
    pub trace_id: String,
    pub method: String,
    pub value: f64,
    pub label: Option<u8>,
}

/// Parse the first four columns of a score table.
pub fn scores_from_csv(text: &str) -> Result<Vec<CsvScore>> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?;
    if header.len() < 4
        || header
            .iter()
            .take(4)
            .ne(["trace_id", "method", "value", "label"])
    {
        return Err(Error::format(
            "score table header must start with trace_id,method,value,label",
        ));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(csv_err)?;
            let line = i + 2;
            let value = rec[2]
                .parse()
                .map_err(|_| Error::format(format!("score table line {line}: bad value")))?;
            let label = match &rec[3] {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => {
                    return Err(Error::format(format!(
                        "score table line {line}: bad label {other:?}"
                    )))
                }
            };
            Ok(CsvScore {
                trace_id: rec[0].to_string(),
                method: rec[1].to_string(),
                value,
                label,
            })
        })
        .collect()
}
