// SPDX-License-Identifier: MIT OR Apache-2.0

//! Capture selection, mean ablation and the pre/post metrics of causal studies.
//!
//! A head is ablated by replacing its per-position output (the attention
//! weighted value vectors, before `W_O`) with the mean of that output over a
//! reference corpus. A neuron is ablated by replacing its final-block
//! pre-activation with its reference mean before the nonlinearity. Boosts
//! multiply a pre-activation at the same site.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{forward, ForwardResult, HeadId, ModelBundle, ModelConfig};
use crate::trace::GenerationTrace;

/// Which attention heads to capture.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum HeadSelection {
    #[default]
    None,
    All,
    Only(BTreeSet<HeadId>),
}

/// What a forward pass should record besides logits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CaptureSpec {
    pub attention_heads: HeadSelection,
    pub final_mlp_preact: bool,
    /// Per-head outputs before `W_O` (used to build mean banks).
    pub head_outputs: bool,
}

impl CaptureSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// All attention patterns and the final-block pre-activations.
    pub fn all() -> Self {
        Self {
            attention_heads: HeadSelection::All,
            final_mlp_preact: true,
            head_outputs: false,
        }
    }

    pub fn heads(heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self {
            attention_heads: HeadSelection::Only(heads.into_iter().collect()),
            ..Self::default()
        }
    }

    pub fn with_final_mlp(mut self) -> Self {
        self.final_mlp_preact = true;
        self
    }

    pub fn with_head_outputs(mut self) -> Self {
        self.head_outputs = true;
        self
    }

    pub fn wants_head(&self, id: HeadId) -> bool {
        match &self.attention_heads {
            HeadSelection::None => false,
            HeadSelection::All => true,
            HeadSelection::Only(set) => set.contains(&id),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if let HeadSelection::Only(set) = &self.attention_heads {
            if let Some(h) = set.iter().find(|h| !config.has_head(**h)) {
                return Err(Error::invalid(format!(
                    "capture requested for nonexistent head {h}"
                )));
            }
        }
        Ok(())
    }
}

/// Reference means used for mean ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanBank {
    /// Mean pre-`W_O` output per head, length `d_head`.
    pub head_means: BTreeMap<HeadId, Vec<f64>>,
    /// Mean final-block pre-activation per neuron.
    pub neuron_means: BTreeMap<usize, f64>,
    /// SHA-256 of the reference corpus.
    pub reference_id: String,
}

impl MeanBank {
    pub fn validate(&self) -> Result<()> {
        if self.reference_id.is_empty() {
            return Err(Error::invalid("mean bank reference_id is empty"));
        }
        let finite = self
            .head_means
            .values()
            .flatten()
            .chain(self.neuron_means.values())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("mean bank contains non-finite means"));
        }
        Ok(())
    }
}

/// Heads and neurons to ablate or boost.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionSpec {
    pub ablate_heads: BTreeSet<HeadId>,
    pub ablate_neurons: BTreeSet<usize>,
    /// Multiplicative factor applied to a final-block pre-activation.
    pub boost_neurons: BTreeMap<usize, f64>,
    /// Source of the substituted means; required when anything is ablated.
    pub means: Option<MeanBank>,
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn ablate_heads(means: MeanBank, heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self {
            ablate_heads: heads.into_iter().collect(),
            means: Some(means),
            ..Self::default()
        }
    }

    pub fn ablate_neurons(means: MeanBank, neurons: impl IntoIterator<Item = usize>) -> Self {
        Self {
            ablate_neurons: neurons.into_iter().collect(),
            means: Some(means),
            ..Self::default()
        }
    }

    pub fn boost(neuron: usize, factor: f64) -> Self {
        Self {
            boost_neurons: BTreeMap::from([(neuron, factor)]),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ablate_heads.is_empty()
            && self.ablate_neurons.is_empty()
            && self.boost_neurons.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if let Some((n, f)) = self.boost_neurons.iter().find(|(_, f)| !f.is_finite()) {
            return Err(Error::invalid(format!(
                "boost factor for neuron {n} is not finite ({f})"
            )));
        }
        let all_neurons = self.ablate_neurons.iter().chain(self.boost_neurons.keys());
        for n in all_neurons {
            if *n >= config.d_mlp {
                return Err(Error::invalid(format!(
                    "neuron {n} out of range for d_mlp {}",
                    config.d_mlp
                )));
            }
        }
        if let Some(h) = self.ablate_heads.iter().find(|h| !config.has_head(**h)) {
            return Err(Error::invalid(format!(
                "ablation target {h} does not exist"
            )));
        }
        if self.ablate_heads.is_empty() && self.ablate_neurons.is_empty() {
            return Ok(());
        }
        let means = self
            .means
            .as_ref()
            .ok_or_else(|| Error::invalid("ablation requested without a mean bank"))?;
        for h in &self.ablate_heads {
            match means.head_means.get(h) {
                None => {
                    return Err(Error::invalid(format!(
                        "head {h} has no entry in the mean bank"
                    )))
                }
                Some(m) if m.len() != config.d_head => {
                    return Err(Error::shape(format!(
                        "mean for head {h} has length {}, expected d_head {}",
                        m.len(),
                        config.d_head
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(n) = self
            .ablate_neurons
            .iter()
            .find(|n| !means.neuron_means.contains_key(n))
        {
            return Err(Error::invalid(format!(
                "neuron {n} has no entry in the mean bank"
            )));
        }
        Ok(())
    }

    pub(crate) fn head_mean(&self, id: HeadId) -> Option<&[f64]> {
        if !self.ablate_heads.contains(&id) {
            return None;
        }
        self.means
            .as_ref()
            .and_then(|m| m.head_means.get(&id))
            .map(Vec::as_slice)
    }

    pub(crate) fn apply_to_preacts(&self, pre: &mut [f64]) {
        if let Some(means) = &self.means {
            for &n in &self.ablate_neurons {
                pre[n] = means.neuron_means[&n];
            }
        }
        for (&n, &f) in &self.boost_neurons {
            pre[n] *= f;
        }
    }
}

/// Content digest of a token corpus.
pub fn corpus_digest(reference: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for seq in reference {
        h.update((seq.len() as u64).to_le_bytes());
        for &t in seq {
            h.update((t as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Mean head outputs and final-block pre-activations over every token of
/// every reference sequence.
pub fn compute_mean_bank(model: &ModelBundle, reference: &[Vec<usize>]) -> Result<MeanBank> {
    if reference.is_empty() {
        return Err(Error::invalid("reference corpus is empty"));
    }
    let capture = CaptureSpec {
        final_mlp_preact: true,
        head_outputs: true,
        ..CaptureSpec::none()
    };
    let passes: Vec<ForwardResult> = reference
        .par_iter()
        .map(|seq| forward(model, seq, &capture, &InterventionSpec::none()))
        .collect::<Result<_>>()?;

    let cfg = &model.config;
    let mut head_sums: BTreeMap<HeadId, Vec<f64>> = cfg
        .heads()
        .into_iter()
        .map(|h| (h, vec![0.0; cfg.d_head]))
        .collect();
    let mut neuron_sums = vec![0.0; cfg.d_mlp];
    let mut count = 0usize;
    // Sequential reduction in corpus order keeps the sums deterministic.
    for pass in &passes {
        for (id, out) in &pass.head_outputs {
            let acc = head_sums.get_mut(id).expect("every head captured");
            for r in 0..out.rows() {
                for (a, v) in acc.iter_mut().zip(out.row(r)) {
                    *a += v;
                }
            }
        }
        let pre = pass
            .final_mlp_preact
            .as_ref()
            .expect("pre-activations captured");
        for r in 0..pre.rows() {
            for (a, v) in neuron_sums.iter_mut().zip(pre.row(r)) {
                *a += v;
            }
        }
        count += pass.len();
    }
    let n = count as f64;
    Ok(MeanBank {
        head_means: head_sums
            .into_iter()
            .map(|(h, s)| (h, s.into_iter().map(|v| v / n).collect()))
            .collect(),
        neuron_means: neuron_sums
            .into_iter()
            .enumerate()
            .map(|(i, s)| (i, s / n))
            .collect(),
        reference_id: corpus_digest(reference),
    })
}

/// Forward pass with the interventions of `spec` applied.
pub fn ablated_forward(
    model: &ModelBundle,
    tokens: &[usize],
    spec: &InterventionSpec,
    capture: &CaptureSpec,
) -> Result<ForwardResult> {
    forward(model, tokens, capture, spec)
}

/// A percent change, or an absolute delta when the baseline is ~0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub value: f64,
    /// True when `|pre| < 1e-12` and `value` is `post − pre` instead of a percentage.
    pub absolute: bool,
}

impl Change {
    pub fn percent(pre: f64, post: f64) -> Self {
        if pre.abs() < 1e-12 {
            Change {
                value: post - pre,
                absolute: true,
            }
        } else {
            Change {
                value: 100.0 * (post - pre) / pre,
                absolute: false,
            }
        }
    }
}

/// Effect of an intervention on a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub nll_pre: f64,
    pub nll_post: f64,
    pub nll_change: Change,
    pub mean_entropy_pre: f64,
    pub mean_entropy_post: f64,
    pub entropy_change: Change,
    /// `‖post‖₂ − ‖pre‖₂` of the designated neurons' pre-activations over
    /// response positions; `None` when no neurons were designated.
    pub neuron_l2_delta: Option<f64>,
    /// Mean response entropy `pre − post`.
    pub entropy_delta: f64,
}

/// Response NLL and mean entropy under `pass`, which must cover
/// `prompt ++ response`.
pub(crate) fn response_nll_entropy(
    pass: &ForwardResult,
    prompt_len: usize,
    response: &[usize],
) -> (f64, f64) {
    let mut nll = 0.0;
    let mut ent = 0.0;
    for (t, &tok) in response.iter().enumerate() {
        let row = pass.probabilities.row(prompt_len + t - 1);
        nll -= row[tok].max(1e-300).ln();
        ent += crate::tensor::entropy(row);
    }
    (nll, ent / response.len() as f64)
}

/// Compare two passes over the same `prompt ++ response` sequence.
pub fn delta_report(
    trace: &GenerationTrace,
    pre: &ForwardResult,
    post: &ForwardResult,
    neurons: &[usize],
) -> Result<DeltaReport> {
    let tokens = trace.tokens();
    if pre.tokens != tokens || post.tokens != tokens {
        return Err(Error::invalid(
            "pre/post passes were not computed on the trace's token sequence",
        ));
    }
    let p = trace.prompt_tokens.len();
    let (nll_pre, ent_pre) = response_nll_entropy(pre, p, &trace.response_tokens);
    let (nll_post, ent_post) = response_nll_entropy(post, p, &trace.response_tokens);

    let neuron_l2_delta = if neurons.is_empty() {
        None
    } else {
        let l2 = |r: &ForwardResult, which: &str| -> Result<f64> {
            let m = r.final_mlp_preact.as_ref().ok_or_else(|| {
                Error::MissingCapture(format!("{which} pass has no final MLP pre-activations"))
            })?;
            if let Some(n) = neurons.iter().find(|&&n| n >= m.cols()) {
                return Err(Error::invalid(format!("neuron {n} out of range")));
            }
            let mut s = 0.0;
            for row in p..tokens.len() {
                for &n in neurons {
                    s += m.get(row, n).powi(2);
                }
            }
            Ok(s.sqrt())
        };
        Some(l2(post, "post")? - l2(pre, "pre")?)
    };

    Ok(DeltaReport {
        nll_pre,
        nll_post,
        nll_change: Change::percent(nll_pre, nll_post),
        mean_entropy_pre: ent_pre,
        mean_entropy_post: ent_post,
        entropy_change: Change::percent(ent_pre, ent_post),
        neuron_l2_delta,
        entropy_delta: ent_pre - ent_post,
    })
}

/// Write a mean bank in the container format with magic `MECHUQ-MEANS-v1`.
pub fn save_means(bank: &MeanBank, path: impl AsRef<Path>) -> Result<()> {
    bank.validate()?;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = bank
        .head_means
        .iter()
        .map(|(h, m)| (format!("head.{h}"), vec![m.len()], m.clone()))
        .collect();
    let idx: Vec<f64> = bank.neuron_means.keys().map(|&k| k as f64).collect();
    let vals: Vec<f64> = bank.neuron_means.values().copied().collect();
    if !idx.is_empty() {
        tensors.push(("neurons.index".into(), vec![idx.len()], idx));
        tensors.push(("neurons.mean".into(), vec![vals.len()], vals));
    }
    let header = serde_json::json!({ "reference_id": bank.reference_id });
    crate::model::io::write_container(
        path.as_ref(),
        crate::model::io::MEANS_MAGIC,
        header,
        &tensors,
    )
}

pub fn load_means(path: impl AsRef<Path>) -> Result<MeanBank> {
    let (header, tensors) =
        crate::model::io::read_container(path.as_ref(), crate::model::io::MEANS_MAGIC)?;
    let reference_id = header
        .get("reference_id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format("means manifest lacks reference_id"))?
        .to_string();
    let mut head_means = BTreeMap::new();
    let mut index = None;
    let mut values = None;
    for (name, _shape, data) in tensors {
        if let Some(h) = name.strip_prefix("head.") {
            head_means.insert(h.parse::<HeadId>()?, data);
        } else if name == "neurons.index" {
            index = Some(data);
        } else if name == "neurons.mean" {
            values = Some(data);
        } else {
            return Err(Error::format(format!(
                "unexpected tensor {name} in means file"
            )));
        }
    }
    let neuron_means = match (index, values) {
        (Some(i), Some(v)) if i.len() == v.len() => {
            i.into_iter().map(|k| k as usize).zip(v).collect()
        }
        (None, None) => BTreeMap::new(),
        _ => {
            return Err(Error::format(
                "tensor neurons.index / neurons.mean mismatch",
            ))
        }
    };
    let bank = MeanBank {
        head_means,
        neuron_means,
        reference_id,
    };
    bank.validate()?;
    Ok(bank)
}
