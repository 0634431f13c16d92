// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labelled synthetic corpus for the induction toys.
//!
//! Every prompt is `[0] ++ context ++ [q1, q2]`, where token 0 is the
//! begin-of-sequence sink and the context is a random walk over tokens
//! `1..|V|` with no repeated bigram and no immediate repeat.
//!
//! * Grounded: `(q1, q2)` is a bigram of the context with at least
//!   `response_length + 1` tokens after it, so induction can copy the
//!   continuation.
//! * Hallucinated: `q2` never occurs in the context, so there is nothing to
//!   copy.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate, Decoding, ModelBundle};
use crate::trace::{GenerationTrace, Label};

/// Shape of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCorpusSpec {
    pub n_grounded: usize,
    pub n_hallucinated: usize,
    pub context_length: usize,
    pub seed: u64,
    /// Tokens generated per item.
    pub response_length: usize,
}

impl SynthCorpusSpec {
    pub fn new(n_grounded: usize, n_hallucinated: usize, seed: u64) -> Self {
        Self {
            n_grounded,
            n_hallucinated,
            context_length: 24,
            seed,
            response_length: 6,
        }
    }

    fn validate(&self, model: &ModelBundle) -> Result<()> {
        if self.n_grounded == 0 || self.n_hallucinated == 0 {
            return Err(Error::invalid("both label counts must be at least 1"));
        }
        if self.response_length == 0 {
            return Err(Error::invalid("response_length must be at least 1"));
        }
        if self.context_length < self.response_length + 3 {
            return Err(Error::invalid(format!(
                "context_length {} too small: a grounded pattern needs at least {}",
                self.context_length,
                self.response_length + 3
            )));
        }
        let total = 1 + self.context_length + 2 + self.response_length;
        if total > model.config.max_seq_len {
            return Err(Error::invalid(format!(
                "prompt plus response ({total}) exceeds max_seq_len {}",
                model.config.max_seq_len
            )));
        }
        let v = model.config.vocab_size;
        // The walk needs enough distinct bigrams and one spare token.
        if v < 5 || (v - 2) * (v - 3) < self.context_length {
            return Err(Error::invalid(format!(
                "vocabulary of {v} too small for context_length {}",
                self.context_length
            )));
        }
        Ok(())
    }
}

/// Random walk over `allowed` with no immediate repeat and no repeated bigram.
fn context_walk(len: usize, allowed: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    'retry: loop {
        let mut seen = BTreeSet::new();
        let mut ctx = vec![*allowed.choose(rng).expect("nonempty alphabet")];
        while ctx.len() < len {
            let prev = *ctx.last().expect("nonempty");
            let options: Vec<usize> = allowed
                .iter()
                .copied()
                .filter(|&t| t != prev && !seen.contains(&(prev, t)))
                .collect();
            let Some(&next) = options.choose(rng) else {
                continue 'retry;
            };
            seen.insert((prev, next));
            ctx.push(next);
        }
        return ctx;
    }
}

/// The prompt for one item.
pub fn synth_prompt(
    vocab_size: usize,
    spec: &SynthCorpusSpec,
    label: Label,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let m = spec.context_length;
    let all: Vec<usize> = (1..vocab_size).collect();
    let (ctx, q1, q2) = match label {
        Label::Grounded => {
            let ctx = context_walk(m, &all, rng);
            // q2 = ctx[k] needs ctx[k+1..=k+n+1] inside the context.
            let k = rng.gen_range(1..=m - spec.response_length - 2);
            (ctx.clone(), ctx[k - 1], ctx[k])
        }
        Label::Hallucinated => {
            let q2 = *all.choose(rng).expect("nonempty alphabet");
            let allowed: Vec<usize> = all.iter().copied().filter(|&t| t != q2).collect();
            let ctx = context_walk(m, &allowed, rng);
            (ctx, *allowed.choose(rng).expect("nonempty alphabet"), q2)
        }
    };
    let mut prompt = Vec::with_capacity(m + 3);
    prompt.push(0);
    prompt.extend(ctx);
    prompt.push(q1);
    prompt.push(q2);
    prompt
}

/// Generate a labelled corpus with full captures, greedily decoded.
///
/// Labels are interleaved in a seeded order; trace ids are `item-NNNN` in
/// that order, so ids carry no label information.
pub fn synth_corpus(model: &ModelBundle, spec: &SynthCorpusSpec) -> Result<Vec<GenerationTrace>> {
    spec.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<Label> = std::iter::repeat(Label::Grounded)
        .take(spec.n_grounded)
        .chain(std::iter::repeat(Label::Hallucinated).take(spec.n_hallucinated))
        .collect();
    labels.shuffle(&mut rng);
    let prompts: Vec<(Label, Vec<usize>)> = labels
        .iter()
        .map(|&l| (l, synth_prompt(model.config.vocab_size, spec, l, &mut rng)))
        .collect();
    let model_id = model.digest();
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, (label, prompt))| {
            let mut t = generate(model, prompt, spec.response_length, Decoding::Greedy)?;
            t.id = format!("item-{i:04}");
            t.model_id = model_id.clone();
            t.label = Some(*label);
            t.meta.seed = Some(spec.seed);
            Ok(t)
        })
        .collect()
}
