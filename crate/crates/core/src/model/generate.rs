// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::instrument::{CaptureSpec, InterventionSpec};
use crate::trace::{GenerationTrace, StepData, TraceMeta};

use super::forward::Session;
use super::ModelBundle;

/// Token selection rule for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Sample from `softmax(logits / t)` with a seeded generator.
    Temperature {
        t: f64,
        seed: u64,
    },
}

/// Index of the largest entry; the lowest index wins ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Autoregressively extend `prompt` by `max_new` tokens.
///
/// The recorded step distributions are the model's untempered next-token
/// distributions. Attention for every head and the final-block
/// pre-activations are captured over the whole `prompt ++ response`
/// sequence; because the pass is causal these are exactly what a separate
/// final forward pass would produce.
pub fn generate(
    model: &ModelBundle,
    prompt: &[usize],
    max_new: usize,
    decoding: Decoding,
) -> Result<GenerationTrace> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt is empty"));
    }
    if max_new == 0 {
        return Err(Error::invalid("max_new must be at least 1"));
    }
    if prompt.len() + max_new > model.config.max_seq_len {
        return Err(Error::invalid(format!(
            "prompt length {} + max_new {max_new} exceeds max_seq_len {}",
            prompt.len(),
            model.config.max_seq_len
        )));
    }
    let (meta, mut rng) = match decoding {
        Decoding::Greedy => (
            TraceMeta {
                decoding: "greedy".into(),
                ..TraceMeta::default()
            },
            None,
        ),
        Decoding::Temperature { t, seed } => {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!(
                    "temperature must be positive and finite, got {t}"
                )));
            }
            let meta = TraceMeta {
                decoding: "temperature".into(),
                temperature: Some(t),
                seed: Some(seed),
            };
            (meta, Some((t, ChaCha8Rng::seed_from_u64(seed))))
        }
    };
    model.check_tokens(prompt)?;

    let capture = CaptureSpec::all();
    let none = InterventionSpec::none();
    let mut session = Session::new(model, &capture, &none)?;
    let mut last = Vec::new();
    for &t in prompt {
        last = session.push(t)?.to_vec();
    }
    let mut response = Vec::with_capacity(max_new);
    let mut dists = Vec::with_capacity(max_new);
    let mut logprobs = Vec::with_capacity(max_new);
    for step in 0..max_new {
        let tok = match rng.as_mut() {
            None => argmax(&last),
            Some((t, rng)) => sample(&last, *t, rng),
        };
        response.push(tok);
        logprobs.push(last[tok].max(1e-300).ln());
        dists.push(std::mem::take(&mut last));
        if step + 1 < max_new {
            last = session.push(tok)?.to_vec();
        } else {
            session.push(tok)?;
        }
    }
    let pass = session.finish();
    Ok(GenerationTrace {
        id: String::new(),
        model_id: String::new(),
        prompt_tokens: prompt.to_vec(),
        response_tokens: response,
        steps: StepData::Full(dists),
        chosen_logprobs: logprobs,
        attention: pass.attention,
        final_mlp_preact: pass.final_mlp_preact,
        label: None,
        meta,
    })
}

fn sample(probs: &[f64], t: f64, rng: &mut ChaCha8Rng) -> usize {
    // p^(1/t) renormalized equals softmax(logits / t).
    let logw: Vec<f64> = probs.iter().map(|p| p.max(1e-300).ln() / t).collect();
    let w = crate::tensor::softmax_unchecked(&logw);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}
