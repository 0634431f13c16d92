// SPDX-License-Identifier: MIT OR Apache-2.0

//! Induction-head and entropy-neuron detectors.
//!
//! Induction heads are found by probing with a random sequence repeated
//! twice and measuring how much attention each head places on the token
//! that followed the current token's first occurrence. Entropy neurons are
//! final-block neurons whose output column has near-zero variance of cosine
//! similarity with the unembedding rows (they move every logit alike).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{CaptureSpec, InterventionSpec};
use crate::model::{forward, HeadId, ModelBundle};
use crate::tensor::{moments_unchecked, norm, Matrix};
use crate::trace::GenerationTrace;

pub const HEADS_SCHEMA: &str = "MECHUQ-HEADS-v1";
pub const NEURONS_SCHEMA: &str = "MECHUQ-NEURONS-v1";

/// Mean attention from each token of the second copy to the position after
/// that token's first occurrence.
///
/// With 0-based rows and columns this is `(1/L) Σ_{j=1..L} attn[L+j−1][j]`.
///
/// ```
/// use mechuq::detect::induction_score;
/// use mechuq::tensor::Matrix;
///
/// // Uniform causal attention over 4 positions.
/// let rows: Vec<Vec<f64>> = (0..4)
///     .map(|i| (0..4).map(|j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 }).collect())
///     .collect();
/// let s = induction_score(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
/// assert!((s - 7.0 / 24.0).abs() < 1e-12);
/// ```
pub fn induction_score(attn: &Matrix, l: usize) -> Result<f64> {
    if l == 0 || attn.shape() != (2 * l, 2 * l) {
        return Err(Error::shape(format!(
            "attention must be {0}×{0} for L = {l}, got {1}×{2}",
            2 * l,
            attn.rows(),
            attn.cols()
        )));
    }
    for i in 0..attn.rows() {
        let row = attn.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| !(x >= -1e-12)) {
            return Err(Error::invalid(format!(
                "attention row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok((1..=l).map(|j| attn.get(l + j - 1, j)).sum::<f64>() / l as f64)
}

/// Parameters of an induction probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeParams {
    #[serde(rename = "L")]
    pub l: usize,
    pub trials: usize,
    pub seed: u64,
    /// Prepend this token to every probe; scores then use rows and columns
    /// shifted by one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos: Option<usize>,
}

impl ProbeParams {
    pub fn new(l: usize, trials: usize, seed: u64) -> Self {
        Self {
            l,
            trials,
            seed,
            bos: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub induction_score: f64,
}

impl HeadScore {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

/// Heads ordered by descending mean induction score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub entries: Vec<HeadScore>,
    pub probe_params: ProbeParams,
}

impl HeadRanking {
    /// The first `k` heads, or an error if fewer are ranked.
    pub fn top(&self, k: usize) -> Result<Vec<HeadId>> {
        if k == 0 || k > self.entries.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside 1..={} ranked heads",
                self.entries.len()
            )));
        }
        Ok(self.entries[..k].iter().map(HeadScore::id).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v.as_object_mut()
            .expect("struct serializes to object")
            .insert("schema".into(), HEADS_SCHEMA.into());
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        check_schema(&v, HEADS_SCHEMA)?;
        let r: HeadRanking = serde_json::from_value(v)?;
        for w in r.entries.windows(2) {
            if w[0].induction_score < w[1].induction_score {
                return Err(Error::format(
                    "head ranking is not sorted by descending score",
                ));
            }
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_schema(v: &serde_json::Value, expected: &str) -> Result<()> {
    match v.get("schema").and_then(|s| s.as_str()) {
        Some(s) if s == expected => Ok(()),
        Some(s) => Err(Error::format(format!(
            "schema {s:?}, expected {expected:?}"
        ))),
        None => Err(Error::format(format!(
            "missing schema, expected {expected:?}"
        ))),
    }
}

/// Probe every head with `trials` repeated random sequences of half-length `L`.
///
/// Trials run in parallel; the ranking is assembled in trial order so the
/// result depends only on the arguments. Ties keep `(layer, head)` order.
pub fn rank_induction_heads(model: &ModelBundle, params: ProbeParams) -> Result<HeadRanking> {
    let ProbeParams { l, trials, bos, .. } = params;
    let offset = usize::from(bos.is_some());
    if l == 0 || trials == 0 {
        return Err(Error::invalid("L and trials must be at least 1"));
    }
    if 2 * l + offset > model.config.max_seq_len {
        return Err(Error::invalid(format!(
            "probe length {} exceeds max_seq_len {}",
            2 * l + offset,
            model.config.max_seq_len
        )));
    }
    let probes = probe_sequences(model.config.vocab_size, params);
    let per_trial: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|tokens| -> Result<Vec<f64>> {
            let r = forward(
                model,
                tokens,
                &CaptureSpec::all(),
                &InterventionSpec::none(),
            )?;
            r.attention
                .values()
                .map(|a| {
                    let sub = if offset == 0 {
                        a.clone()
                    } else {
                        trim_first(a)
                    };
                    induction_score(&sub, l)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let heads = model.config.heads();
    let mut entries: Vec<HeadScore> = heads
        .iter()
        .enumerate()
        .map(|(i, h)| HeadScore {
            layer: h.layer,
            head: h.head,
            induction_score: per_trial.iter().map(|t| t[i]).sum::<f64>() / trials as f64,
        })
        .collect();
    entries.sort_by(|a, b| b.induction_score.total_cmp(&a.induction_score));
    Ok(HeadRanking {
        entries,
        probe_params: params,
    })
}

/// The token sequences used by [`rank_induction_heads`].
pub fn probe_sequences(vocab_size: usize, params: ProbeParams) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..params.trials)
        .map(|_| {
            let half: Vec<usize> = (0..params.l)
                .map(|_| rng.gen_range(0..vocab_size))
                .collect();
            let mut s: Vec<usize> = params.bos.into_iter().collect();
            s.extend_from_slice(&half);
            s.extend_from_slice(&half);
            s
        })
        .collect()
}

/// Drop the first row and column and renormalize rows.
fn trim_first(a: &Matrix) -> Matrix {
    let n = a.rows() - 1;
    let rows: Vec<Vec<f64>> = (1..=n)
        .map(|i| {
            let r = &a.row(i)[1..];
            let s: f64 = r.iter().sum();
            r.iter()
                .map(|x| if s > 0.0 { x / s } else { 1.0 / (i as f64) })
                .collect()
        })
        .collect();
    Matrix::from_rows(&rows).expect("finite attention")
}

/// Variance over the vocabulary of the cosine between `w_out` and each row of `W_U`.
///
/// ```
/// use mechuq::detect::logit_var;
/// use mechuq::tensor::Matrix;
///
/// let w_u = Matrix::identity(2);
/// assert!((logit_var(&[1.0, 0.0], &w_u).unwrap() - 0.25).abs() < 1e-15);
/// ```
pub fn logit_var(w_out: &[f64], w_u: &Matrix) -> Result<f64> {
    if w_out.len() != w_u.cols() {
        return Err(Error::shape(format!(
            "w_out has {} entries, W_U has {} columns",
            w_out.len(),
            w_u.cols()
        )));
    }
    let wn = norm(w_out);
    if !(wn > 0.0) {
        return Err(Error::invalid("w_out has zero norm"));
    }
    let mut cos = Vec::with_capacity(w_u.rows());
    for v in 0..w_u.rows() {
        let row = w_u.row(v);
        let rn = norm(row);
        if !(rn > 0.0) {
            return Err(Error::invalid(format!("row {v} of W_U has zero norm")));
        }
        cos.push(crate::tensor::dot(row, w_out) / (rn * wn));
    }
    Ok(moments_unchecked(&cos).variance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub neuron: usize,
    pub logit_var: f64,
    pub w_out_norm: f64,
}

/// Final-block neurons ordered by ascending LogitVar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRanking {
    pub entries: Vec<NeuronScore>,
    pub layer: usize,
}

impl NeuronRanking {
    pub fn top(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.entries.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside 1..={} ranked neurons",
                self.entries.len()
            )));
        }
        Ok(self.entries[..k].iter().map(|e| e.neuron).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v.as_object_mut()
            .expect("struct serializes to object")
            .insert("schema".into(), NEURONS_SCHEMA.into());
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        check_schema(&v, NEURONS_SCHEMA)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// The `top_n` final-block neurons with the lowest LogitVar. Ties keep
/// neuron order.
pub fn rank_entropy_neurons(model: &ModelBundle, top_n: usize) -> Result<NeuronRanking> {
    let d_mlp = model.config.d_mlp;
    if top_n > d_mlp {
        return Err(Error::invalid(format!(
            "top_n {top_n} exceeds d_mlp {d_mlp}"
        )));
    }
    let w_u = model.unembed();
    let mut entries = (0..d_mlp)
        .map(|n| {
            let w = model.neuron_w_out(n);
            let lv = logit_var(&w, &w_u).map_err(|e| Error::invalid(format!("neuron {n}: {e}")))?;
            Ok(NeuronScore {
                neuron: n,
                logit_var: lv,
                w_out_norm: norm(&w),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.logit_var.total_cmp(&b.logit_var));
    entries.truncate(top_n);
    Ok(NeuronRanking {
        entries,
        layer: model.final_layer(),
    })
}

/// Maximum pre-activation of `neuron` over the response positions of a trace.
pub fn neuron_activation_score(trace: &GenerationTrace, neuron: usize) -> Result<f64> {
    let m = trace.final_mlp_preact.as_ref().ok_or_else(|| {
        Error::MissingCapture(format!(
            "trace {} has no final-block pre-activations",
            trace.id
        ))
    })?;
    if neuron >= m.cols() {
        return Err(Error::invalid(format!(
            "neuron {neuron} out of range for d_mlp {}",
            m.cols()
        )));
    }
    if m.rows() != trace.total_len() || trace.n() == 0 {
        return Err(Error::invalid("pre-activation rows do not cover the trace"));
    }
    Ok((trace.prompt_tokens.len()..trace.total_len())
        .map(|r| m.get(r, neuron))
        .fold(f64::NEG_INFINITY, f64::max))
}
