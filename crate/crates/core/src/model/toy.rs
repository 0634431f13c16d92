// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-wired models with known circuits.
//!
//! # Induction toy
//!
//! The residual stream is split into orthonormal, mean-zero subspaces (so
//! layer norm only rescales them):
//!
//! | subspace | width | content |
//! |---|---|---|
//! | `TOK`   | `T` | current token code |
//! | `PREV`  | `T` | previous token code, written by `L0H0` |
//! | `PREV2` | `T` | token code two back, written by `L0H1` |
//! | `POS`   | 3 | `(p/M, (p/M)², filler)` with constant norm |
//! | `CONST` | 1 | always 1 |
//! | `FLAG`  | 1 | +1 for token 0 (begin-of-sequence), −1 otherwise |
//! | `FIRED` | 1 | set when the induction head attends away from token 0 |
//! | `ENT`   | 1 | reserved for the entropy neuron, read by nothing |
//!
//! Token `2a` is coded `+e_a` and token `2a+1` is coded `−e_a`; any tokens
//! beyond `2T` get dense sign codes.
//!
//! * `L0H0` scores key `j` by `−β/2·(j − (i−1))²` from the position code and
//!   copies that token's code into `PREV`; `L0H1` does the same for `i−2`.
//! * `L1H0`, the induction head, matches the current token against `PREV` of
//!   earlier positions (unigram score) and the previous token against their
//!   `PREV2` (bigram score), so a repeated bigram beats a lone repeat.
//!   Positions holding token 0 get a flat bonus: when there is no evidence
//!   the head sinks onto the begin-of-sequence token. By default a unigram
//!   match alone beats the sink; the composite variant weighs both scores
//!   equally so only a full bigram match beats it. Its value
//!   `3·TOK − 2·PREV − PREV2` is zero whenever the attended position and its
//!   two predecessors hold the same token, which makes the single-token and
//!   sink cases copy nothing.
//! * `W_U` reads `TOK − PREV2`, so a copy predicts the attended token with
//!   low entropy and a sink leaves a broad distribution.
//! * Every other head is inert: it sinks onto token 0 and writes small
//!   amounts into directions `W_U` ignores.
//!
//! The composite variant adds weaker copies of the induction head and a
//! final-block entropy neuron whose input reads `FIRED` plus a token-dependent
//! term and whose output writes only into `ENT`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{names, Activation, HeadId, ModelBundle, ModelConfig};

const LN_EPS: f64 = 1e-5;
/// Sharpness of the previous-token heads.
const BETA_PREV: f64 = 30.0;
/// Half the score gap between token-0 keys and ordinary keys.
const SIGMA_SINK: f64 = 49.0;
/// Sink strength of inert heads.
const SIGMA_INERT: f64 = 20.0;
/// Target logit scale of a confident copy.
const COPY_LOGIT: f64 = 3.0;
/// Size of the writes inert heads make into junk directions.
const JUNK_WRITE: f64 = 0.05;

/// Knobs for [`build_induction_toy_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub max_seq_len: usize,
    /// Heads per layer; by default the largest count whose `d_head` can host
    /// the induction head's query.
    pub n_heads: Option<usize>,
    /// Weaker copies of the induction head in layer 1.
    pub extra_induction_heads: usize,
    /// Add an entropy neuron to the final block gated by induction firing.
    pub entropy_neuron: bool,
    pub d_mlp: usize,
    /// Key weight that penalises induction matches onto an earlier copy of
    /// the current token, which stops greedy loops from re-triggering the
    /// induction head.
    pub self_match_penalty: f64,
    /// Induction score for a key whose previous token is the current token.
    pub unigram_match: f64,
    /// Induction score for a key whose token two back is the current
    /// previous token.
    pub bigram_match: f64,
    /// Logit offset for token 0 at confident positions; negative values keep
    /// greedy decoding from emitting the sink token.
    pub bos_logit: f64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            max_seq_len: 128,
            n_heads: None,
            extra_induction_heads: 0,
            entropy_neuron: false,
            d_mlp: 16,
            self_match_penalty: 0.0,
            unigram_match: 110.0,
            bigram_match: 40.0,
            bos_logit: 0.0,
        }
    }
}

/// An induction toy together with the coordinates of its circuit.
#[derive(Debug, Clone)]
pub struct InductionToy {
    pub model: ModelBundle,
    /// Layer-0 head that copies the previous token.
    pub previous_token_head: HeadId,
    /// Layer-0 head that copies the token two positions back.
    pub second_previous_head: HeadId,
    /// The wired layer-1 induction head.
    pub induction_head: HeadId,
    /// Weaker induction heads (composite variant).
    pub extra_induction_heads: Vec<HeadId>,
    /// Heads that only sink onto token 0.
    pub inert_heads: Vec<HeadId>,
    /// Final-block entropy neuron (composite variant).
    pub entropy_neuron: Option<usize>,
    /// The token that acts as begin-of-sequence and attention sink.
    pub bos_token: usize,
}

/// A one-layer model with a designated null-space entropy neuron.
#[derive(Debug, Clone)]
pub struct EntropyNeuronToy {
    pub model: ModelBundle,
    pub neuron: usize,
}

/// Orthonormal basis of the mean-zero subspace of `R^d` (`d − 1` vectors).
fn mean_zero_basis(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d - 1);
    while basis.len() < d - 1 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Two Gram-Schmidt passes keep the basis orthogonal to rounding level.
        for _ in 0..2 {
            for b in std::iter::once(&ones).chain(basis.iter()) {
                let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn axpy(out: &mut [f64], a: f64, v: &[f64]) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += a * x;
    }
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random unit vector in the span of `dirs`.
fn random_in_span(dirs: &[&Vec<f64>], d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let coef = random_unit(dirs.len(), rng);
    let mut v = vec![0.0; d];
    for (c, b) in coef.iter().zip(dirs) {
        axpy(&mut v, *c, b);
    }
    v
}

/// Writes a `d × k` projection column by column.
struct Proj {
    d: usize,
    k: usize,
    data: Vec<f64>,
}

impl Proj {
    fn new(d: usize, k: usize) -> Self {
        Self {
            d,
            k,
            data: vec![0.0; d * k],
        }
    }

    /// Column `c` += `a · v`.
    fn add_col(&mut self, c: usize, a: f64, v: &[f64]) {
        for (r, x) in v.iter().enumerate() {
            self.data[r * self.k + c] += a * x;
        }
    }

    fn into_data(self) -> Vec<f64> {
        debug_assert_eq!(self.data.len(), self.d * self.k);
        self.data
    }
}

/// Named subspaces of the induction toy's residual stream.
struct Layout {
    t: usize,
    tok: Vec<Vec<f64>>,
    prev: Vec<Vec<f64>>,
    prev2: Vec<Vec<f64>>,
    pos: [Vec<f64>; 3],
    constant: Vec<f64>,
    flag: Vec<f64>,
    fired: Vec<f64>,
    ent: Vec<f64>,
    junk: Vec<Vec<f64>>,
}

impl Layout {
    fn new(d: usize, t: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b = mean_zero_basis(d, rng).into_iter();
        let mut take = |n: usize| -> Vec<Vec<f64>> { b.by_ref().take(n).collect() };
        let tok = take(t);
        let prev = take(t);
        let prev2 = take(t);
        let mut p = take(3).into_iter();
        let pos = [p.next().unwrap(), p.next().unwrap(), p.next().unwrap()];
        let mut one = || take(1).pop().expect("basis large enough");
        let constant = one();
        let flag = one();
        let fired = one();
        let ent = one();
        let junk = b.collect();
        Self {
            t,
            tok,
            prev,
            prev2,
            pos,
            constant,
            flag,
            fired,
            ent,
            junk,
        }
    }

    fn combine(&self, space: &[Vec<f64>], coords: &[f64], d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        for (c, b) in coords.iter().zip(space) {
            axpy(&mut v, *c, b);
        }
        v
    }
}

/// Token codes over `T` coordinates: `±e_a` for the first `2T` tokens, dense
/// sign vectors with low mutual coherence for the rest.
fn token_codes(vocab: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut codes = Vec::with_capacity(vocab);
    for v in 0..vocab.min(2 * t) {
        let mut c = vec![0.0; t];
        c[v / 2] = if v % 2 == 0 { 1.0 } else { -1.0 };
        codes.push(c);
    }
    let s = 1.0 / (t as f64).sqrt();
    let mut dense: Vec<Vec<f64>> = Vec::new();
    for _ in codes.len()..vocab {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..64 {
            let c: Vec<f64> = (0..t)
                .map(|_| if rng.gen::<bool>() { s } else { -s })
                .collect();
            let coh = dense
                .iter()
                .map(|o| o.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>().abs())
                .fold(0.0, f64::max);
            if best.as_ref().map_or(true, |(b, _)| coh < *b) {
                best = Some((coh, c));
            }
        }
        dense.push(best.expect("at least one candidate").1);
    }
    codes.extend(dense);
    codes
}

/// Pick `(T, n_heads)` for the induction toy.
fn choose_dims(vocab: usize, d: usize, n_heads: Option<usize>) -> Result<(usize, usize)> {
    let ideal = vocab.div_ceil(2);
    let lowest = ideal.saturating_sub(2).max(2);
    for t in (lowest..=ideal).rev() {
        if 3 * t + 8 > d - 1 {
            continue;
        }
        let fits = |h: usize| h >= 2 && d % h == 0 && d / h > 2 * t;
        match n_heads {
            Some(h) if fits(h) => return Ok((t, h)),
            Some(_) => {}
            None => {
                if let Some(h) = (2..=d).rev().find(|&h| fits(h)) {
                    return Ok((t, h));
                }
            }
        }
    }
    Err(Error::invalid(format!(
        "insufficient d_model {d} for an induction toy over {vocab} tokens{}",
        n_heads
            .map(|h| format!(" with {h} heads"))
            .unwrap_or_default()
    )))
}

/// Build the two-layer induction toy with default options.
pub fn build_induction_toy(vocab_size: usize, d_model: usize, seed: u64) -> Result<InductionToy> {
    build_induction_toy_with(vocab_size, d_model, seed, &ToyOptions::default())
}

/// The induction toy plus four weaker induction heads and an entropy neuron
/// that fires when induction copies, so confident copies carry inflated
/// entropy on some tokens. Induction keys carry a self-match penalty of 0.5
/// and token 0 is kept out of greedy output.
pub fn build_composite_toy(vocab_size: usize, d_model: usize, seed: u64) -> Result<InductionToy> {
    let opts = ToyOptions {
        extra_induction_heads: 4,
        entropy_neuron: true,
        self_match_penalty: 0.5,
        unigram_match: 60.0,
        bigram_match: 60.0,
        bos_logit: -10.0,
        ..ToyOptions::default()
    };
    build_induction_toy_with(vocab_size, d_model, seed, &opts)
}

pub fn build_induction_toy_with(
    vocab_size: usize,
    d_model: usize,
    seed: u64,
    opts: &ToyOptions,
) -> Result<InductionToy> {
    if vocab_size < 4 {
        return Err(Error::invalid(format!(
            "induction toy needs vocab_size ≥ 4, got {vocab_size}"
        )));
    }
    if d_model < 16 {
        return Err(Error::invalid(format!(
            "insufficient d_model {d_model} for an induction toy"
        )));
    }
    if opts.max_seq_len < 2 || opts.d_mlp == 0 {
        return Err(Error::invalid("max_seq_len must be ≥ 2 and d_mlp ≥ 1"));
    }
    let (t, n_heads) = choose_dims(vocab_size, d_model, opts.n_heads)?;
    let layer1_heads = 1 + opts.extra_induction_heads;
    if layer1_heads > n_heads {
        return Err(Error::invalid(format!(
            "{} extra induction heads do not fit in {n_heads} heads per layer",
            opts.extra_induction_heads
        )));
    }
    let d = d_model;
    let dh = d / n_heads;
    let m = opts.max_seq_len;
    let cfg = ModelConfig {
        vocab_size,
        d_model: d,
        n_layers: 2,
        n_heads,
        d_head: dh,
        d_mlp: opts.d_mlp,
        max_seq_len: m,
        activation: Activation::Relu,
        layernorm_eps: LN_EPS,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = Layout::new(d, t, &mut rng);
    let codes = token_codes(vocab_size, t, &mut rng);
    let df = d as f64;
    let sdh = (dh as f64).sqrt();
    let mut model = ModelBundle::zeros(cfg)?;

    // Embeddings.
    let mut tok = vec![0.0; vocab_size * d];
    for (v, code) in codes.iter().enumerate() {
        let mut row = lay.combine(&lay.tok, code, d);
        axpy(&mut row, if v == 0 { 1.0 } else { -1.0 }, &lay.flag);
        tok[v * d..(v + 1) * d].copy_from_slice(&row);
    }
    model.set_tensor(names::TOK_EMBED, tok)?;
    let mut pos = vec![0.0; m * d];
    for p in 0..m {
        let p1 = p as f64 / m as f64;
        let p2 = p1 * p1;
        let fill = (2.0 - p1 * p1 - p2 * p2).sqrt();
        let row = &mut pos[p * d..(p + 1) * d];
        axpy(row, p1, &lay.pos[0]);
        axpy(row, p2, &lay.pos[1]);
        axpy(row, fill, &lay.pos[2]);
        axpy(row, 1.0, &lay.constant);
    }
    model.set_tensor(names::POS_EMBED, pos)?;

    // Layer-norm scales: |x|² is 5 at layer 0 and about 7 at layer 1.
    let c0 = 1.0 / (5.0 / df + LN_EPS).sqrt();
    let c1 = 1.0 / (7.0 / df + LN_EPS).sqrt();

    // Layer 0: previous-token and second-previous-token heads.
    let gamma = BETA_PREV * (m * m) as f64 * sdh;
    for (h, back, target) in [(0usize, 1.0, &lay.prev), (1, 2.0, &lay.prev2)] {
        let mut q = Proj::new(d, dh);
        q.add_col(0, gamma / c0, &lay.pos[0]);
        q.add_col(0, -gamma * back / (m as f64 * c0), &lay.constant);
        q.add_col(1, -gamma / (2.0 * c0), &lay.constant);
        let mut k = Proj::new(d, dh);
        k.add_col(0, 1.0 / c0, &lay.pos[0]);
        k.add_col(1, 1.0 / c0, &lay.pos[1]);
        let mut v = Proj::new(d, dh);
        let mut o = vec![0.0; dh * d];
        for a in 0..t {
            v.add_col(a, 1.0 / c0, &lay.tok[a]);
            o[a * d..(a + 1) * d].copy_from_slice(&target[a]);
        }
        model.set_tensor(&names::w_q(0, h), q.into_data())?;
        model.set_tensor(&names::w_k(0, h), k.into_data())?;
        model.set_tensor(&names::w_v(0, h), v.into_data())?;
        model.set_tensor(&names::w_o(0, h), o)?;
    }

    // Layer 1: induction head and its weaker copies.
    let induction_q = {
        let mut q = Proj::new(d, dh);
        for a in 0..t {
            q.add_col(a, opts.unigram_match * sdh / c1, &lay.tok[a]);
            q.add_col(t + a, opts.bigram_match * sdh / c1, &lay.prev[a]);
        }
        q.add_col(2 * t, SIGMA_SINK * sdh / c1, &lay.constant);
        q.into_data()
    };
    let induction_k = {
        let mut k = Proj::new(d, dh);
        for a in 0..t {
            k.add_col(a, 1.0 / c1, &lay.prev[a]);
            k.add_col(t + a, 1.0 / c1, &lay.prev2[a]);
            if opts.self_match_penalty != 0.0 {
                k.add_col(a, -opts.self_match_penalty / c1, &lay.tok[a]);
            }
        }
        k.add_col(2 * t, 1.0 / c1, &lay.flag);
        k.into_data()
    };
    {
        let mut v = Proj::new(d, dh);
        let mut o = vec![0.0; dh * d];
        for a in 0..t {
            v.add_col(a, 3.0 / c1, &lay.tok[a]);
            v.add_col(a, -2.0 / c1, &lay.prev[a]);
            v.add_col(a, -1.0 / c1, &lay.prev2[a]);
            o[a * d..(a + 1) * d].copy_from_slice(&lay.tok[a]);
        }
        // (CONST − FLAG) is 0 on token 0 and 2 elsewhere.
        v.add_col(t, 1.0 / c1, &lay.constant);
        v.add_col(t, -1.0 / c1, &lay.flag);
        axpy(&mut o[t * d..(t + 1) * d], 0.5, &lay.fired);
        model.set_tensor(&names::w_q(1, 0), induction_q.clone())?;
        model.set_tensor(&names::w_k(1, 0), induction_k.clone())?;
        model.set_tensor(&names::w_v(1, 0), v.into_data())?;
        model.set_tensor(&names::w_o(1, 0), o)?;
    }
    let mut extra = Vec::new();
    for e in 0..opts.extra_induction_heads {
        let h = 1 + e;
        let scale = 0.85 - 0.1 * e as f64;
        model.set_tensor(
            &names::w_q(1, h),
            induction_q.iter().map(|x| x * scale).collect(),
        )?;
        model.set_tensor(&names::w_k(1, h), induction_k.clone())?;
        junk_writer(&mut model, &lay, HeadId::new(1, h), c1, &mut rng)?;
        extra.push(HeadId::new(1, h));
    }

    // Inert heads.
    let mut inert = Vec::new();
    for id in model.config.heads() {
        let used = (id.layer == 0 && id.head < 2) || (id.layer == 1 && id.head < layer1_heads);
        if used {
            continue;
        }
        let c = if id.layer == 0 { c0 } else { c1 };
        let mut q = Proj::new(d, dh);
        let mut k = Proj::new(d, dh);
        q.add_col(0, SIGMA_INERT * sdh / c, &lay.constant);
        k.add_col(0, 1.0 / c, &lay.flag);
        for col in 1..dh {
            q.add_col(col, 1.0 / c, &random_unit(d, &mut rng));
            k.add_col(col, 1.0 / c, &random_unit(d, &mut rng));
        }
        model.set_tensor(&names::w_q(id.layer, id.head), q.into_data())?;
        model.set_tensor(&names::w_k(id.layer, id.head), k.into_data())?;
        junk_writer(&mut model, &lay, id, c, &mut rng)?;
        inert.push(id);
    }

    // Unembedding reads TOK − PREV2. The final |x|² of a confident copy is about 18.
    let lambda = COPY_LOGIT * (18.0 / df + LN_EPS).sqrt();
    let mut wu = vec![0.0; vocab_size * d];
    for (v, code) in codes.iter().enumerate() {
        let row = &mut wu[v * d..(v + 1) * d];
        for a in 0..t {
            axpy(row, lambda * code[a], &lay.tok[a]);
            axpy(row, -lambda * code[a], &lay.prev2[a]);
        }
    }
    axpy(
        &mut wu[..d],
        opts.bos_logit / COPY_LOGIT * lambda,
        &lay.constant,
    );
    model.set_tensor(names::UNEMBED, wu)?;

    let entropy_neuron = if opts.entropy_neuron {
        Some(wire_entropy_neuron(&mut model, &lay, &mut rng)?)
    } else {
        None
    };

    Ok(InductionToy {
        model,
        previous_token_head: HeadId::new(0, 0),
        second_previous_head: HeadId::new(0, 1),
        induction_head: HeadId::new(1, 0),
        extra_induction_heads: extra,
        inert_heads: inert,
        entropy_neuron,
        bos_token: 0,
    })
}

/// Value/output weights that write a small input-dependent vector into the
/// junk subspace, which `W_U` does not read.
fn junk_writer(
    model: &mut ModelBundle,
    lay: &Layout,
    id: HeadId,
    c: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = model.config.d_model;
    let dh = model.config.d_head;
    let mut v = Proj::new(d, dh);
    let mut o = vec![0.0; dh * d];
    if !lay.junk.is_empty() {
        let junk: Vec<&Vec<f64>> = lay.junk.iter().collect();
        for col in 0..dh {
            v.add_col(col, JUNK_WRITE / c, &random_unit(d, rng));
            let dir = random_in_span(&junk, d, rng);
            axpy(
                &mut o[col * d..(col + 1) * d],
                1.0 / (dh as f64).sqrt(),
                &dir,
            );
        }
    }
    model.set_tensor(&names::w_v(id.layer, id.head), v.into_data())?;
    model.set_tensor(&names::w_o(id.layer, id.head), o)
}

/// Final-block neurons for the composite toy. Returns the entropy neuron.
///
/// The entropy neuron's pre-activation is `η·FIRED + ξ·TOK − 0.6·η`, with a
/// per-token `ξ`: on copying positions it is positive by a token-dependent
/// amount, on sinking positions it stays negative. Its output writes only
/// `ENT`, growing the final norm and flattening the logits. The remaining neurons are small random
/// readers and writers.
fn wire_entropy_neuron(
    model: &mut ModelBundle,
    lay: &Layout,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let d = model.config.d_model;
    let dm = model.config.d_mlp;
    let t = lay.t;
    let df = d as f64;
    // |x|² after layer-1 attention on a copying position.
    let c2 = 1.0 / (18.0 / df + LN_EPS).sqrt();
    let neuron = rng.gen_range(0..dm);
    let xi_scale = 1.0;
    let eta = 3.0 * xi_scale * 11f64.sqrt();
    let rho = 2.0;

    let mut w_in = vec![0.0; dm * d];
    let mut b_in = vec![0.0; dm];
    let mut w_out = vec![0.0; d * dm];
    let mut readout: Vec<&Vec<f64>> = lay.tok.iter().chain(&lay.prev2).collect();
    readout.extend(lay.junk.iter());
    for n in 0..dm {
        let row = &mut w_in[n * d..(n + 1) * d];
        let out_dir = if n == neuron {
            axpy(row, eta / c2, &lay.fired);
            for a in 0..t {
                let xi: f64 = rng.gen_range(-1.0..1.0) * xi_scale * 3f64.sqrt();
                axpy(row, xi / c2, &lay.tok[a]);
            }
            b_in[n] = -0.6 * eta;
            lay.ent.iter().map(|x| x * rho).collect::<Vec<_>>()
        } else {
            axpy(row, 0.05 / c2, &random_unit(d, rng));
            b_in[n] = rng.gen_range(-0.05..0.05);
            random_in_span(&readout, d, rng)
                .into_iter()
                .map(|x| x * 0.02)
                .collect()
        };
        for (r, x) in out_dir.iter().enumerate() {
            w_out[r * dm + n] = *x;
        }
    }
    model.set_tensor(&names::w_in(1), w_in)?;
    model.set_tensor(&names::b_in(1), b_in)?;
    model.set_tensor(&names::w_out(1), w_out)?;
    Ok(neuron)
}

/// One-layer model whose final-block MLP contains a neuron with a large
/// output column in the mean-zero null space of `W_U`.
///
/// `W_U` rows live in a subspace `U`; one further mean-zero direction `E` is
/// orthogonal to `U` and to every other write, and the designated neuron
/// writes `ρ·E` with `ρ` eight times the median column norm. Its input bias
/// keeps it active on every input.
pub fn build_entropy_neuron_toy(
    vocab_size: usize,
    d_model: usize,
    seed: u64,
) -> Result<EntropyNeuronToy> {
    if d_model <= vocab_size {
        return Err(Error::invalid(format!(
            "d_model ({d_model}) must exceed vocab_size ({vocab_size}) so W_U has a null space"
        )));
    }
    if vocab_size < 2 || d_model < 3 {
        return Err(Error::invalid(
            "entropy-neuron toy needs vocab_size ≥ 2 and d_model ≥ 3",
        ));
    }
    let d = d_model;
    let n_heads = if d % 2 == 0 { 2 } else { 1 };
    let d_mlp = 2 * d;
    let max_seq_len = 64;
    let cfg = ModelConfig {
        vocab_size,
        d_model: d,
        n_layers: 1,
        n_heads,
        d_head: d / n_heads,
        d_mlp,
        max_seq_len,
        activation: Activation::Relu,
        layernorm_eps: LN_EPS,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = mean_zero_basis(d, &mut rng);
    let span = vocab_size.min(d - 2);
    let u: Vec<&Vec<f64>> = basis[..span].iter().collect();
    let ent = &basis[span];
    let junk: Vec<&Vec<f64>> = basis[span + 1..].iter().collect();
    let writable: Vec<&Vec<f64>> = u.iter().chain(junk.iter()).copied().collect();
    let mut model = ModelBundle::zeros(cfg)?;

    let fill = |model: &mut ModelBundle,
                name: &str,
                rows: usize,
                scale: f64,
                rng: &mut ChaCha8Rng|
     -> Result<()> {
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend(
                random_in_span(&writable, d, rng)
                    .into_iter()
                    .map(|x| x * scale),
            );
        }
        model.set_tensor(name, data)
    };
    fill(&mut model, names::TOK_EMBED, vocab_size, 2.0, &mut rng)?;
    fill(&mut model, names::POS_EMBED, max_seq_len, 0.3, &mut rng)?;
    let mut wu = Vec::with_capacity(vocab_size * d);
    for _ in 0..vocab_size {
        wu.extend(random_in_span(&u, d, &mut rng).into_iter().map(|x| x * 3.0));
    }
    model.set_tensor(names::UNEMBED, wu)?;

    let dh = d / n_heads;
    for h in 0..n_heads {
        let mut q = vec![0.0; d * dh];
        let mut k = vec![0.0; d * dh];
        let mut v = vec![0.0; d * dh];
        for x in q.iter_mut().chain(k.iter_mut()).chain(v.iter_mut()) {
            *x = rng.gen_range(-1.0..1.0) / (d as f64).sqrt();
        }
        let mut o = Vec::with_capacity(dh * d);
        for _ in 0..dh {
            o.extend(
                random_in_span(&writable, d, &mut rng)
                    .into_iter()
                    .map(|x| x * 0.5),
            );
        }
        model.set_tensor(&names::w_q(0, h), q)?;
        model.set_tensor(&names::w_k(0, h), k)?;
        model.set_tensor(&names::w_v(0, h), v)?;
        model.set_tensor(&names::w_o(0, h), o)?;
    }

    let neuron = rng.gen_range(0..d_mlp);
    let mut w_in = vec![0.0; d_mlp * d];
    let mut b_in = vec![0.0; d_mlp];
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d_mlp);
    for n in 0..d_mlp {
        let row = &mut w_in[n * d..(n + 1) * d];
        if n == neuron {
            // |LN(x)| = sqrt(d), so this keeps the pre-activation within 1 ± 0.4.
            axpy(row, 0.4 / (d as f64).sqrt(), &random_unit(d, &mut rng));
            b_in[n] = 1.0;
            cols.push(Vec::new());
        } else {
            axpy(row, 1.0 / (d as f64).sqrt(), &random_unit(d, &mut rng));
            b_in[n] = rng.gen_range(-0.2..0.2);
            let norm = rng.gen_range(0.5..1.5);
            cols.push(
                random_in_span(&writable, d, &mut rng)
                    .into_iter()
                    .map(|x| x * norm)
                    .collect(),
            );
        }
    }
    let mut norms: Vec<f64> = cols
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    norms.sort_by(f64::total_cmp);
    let median = norms[norms.len() / 2];
    cols[neuron] = ent.iter().map(|x| x * 8.0 * median).collect();
    let mut w_out = vec![0.0; d * d_mlp];
    for (n, c) in cols.iter().enumerate() {
        for (r, x) in c.iter().enumerate() {
            w_out[r * d_mlp + n] = *x;
        }
    }
    model.set_tensor(&names::w_in(0), w_in)?;
    model.set_tensor(&names::b_in(0), b_in)?;
    model.set_tensor(&names::w_out(0), w_out)?;
    Ok(EntropyNeuronToy { model, neuron })
}
