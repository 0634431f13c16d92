// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mechuq::detect::{probe_sequences, HeadRanking, HeadScore, ProbeParams};
use mechuq::model::{HeadId, ModelBundle};
use mechuq::tensor::Matrix;
use mechuq::trace::{GenerationTrace, Label, StepData, TraceMeta};

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of second-half positions of repeated probes whose argmax is the
/// next token of the first half.
pub fn copy_accuracy(model: &ModelBundle, l: usize, trials: usize, seed: u64) -> f64 {
    let seqs = probe_sequences(model.config.vocab_size, ProbeParams::new(l, trials, seed));
    let (mut hit, mut total) = (0, 0);
    for s in &seqs {
        let logits = model.logits(s).unwrap();
        for j in 1..l {
            total += 1;
            if argmax(logits.row(l + j - 1)) == s[j] {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

/// Lower-triangular attention with every row uniform over its prefix.
pub fn uniform_causal(n: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 }).collect())
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

/// Attention where every row puts all its mass on position 0.
pub fn sink_attention(n: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect()).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// A hand-built trace with full step distributions.
pub fn make_trace(
    prompt: Vec<usize>,
    response: Vec<usize>,
    dists: Vec<Vec<f64>>,
    attention: BTreeMap<HeadId, Matrix>,
    preact: Option<Matrix>,
    label: Option<Label>,
) -> GenerationTrace {
    let chosen_logprobs = response.iter().zip(&dists).map(|(&r, d)| d[r].ln()).collect();
    GenerationTrace {
        id: "t".into(),
        model_id: "hand".into(),
        prompt_tokens: prompt,
        response_tokens: response,
        steps: StepData::Full(dists),
        chosen_logprobs,
        attention,
        final_mlp_preact: preact,
        label,
        meta: TraceMeta { decoding: "external".into(), ..TraceMeta::default() },
    }
}

/// A ranking over the given heads in the given order.
pub fn ranking(heads: &[(HeadId, f64)]) -> HeadRanking {
    HeadRanking {
        entries: heads
            .iter()
            .map(|(id, s)| HeadScore { layer: id.layer, head: id.head, induction_score: *s })
            .collect(),
        probe_params: ProbeParams::new(1, 1, 0),
    }
}
