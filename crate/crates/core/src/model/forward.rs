// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::instrument::{CaptureSpec, InterventionSpec};
use crate::tensor::{dot, layer_norm, softmax_unchecked, Matrix};

use super::{names, HeadId, ModelBundle, Tensor};

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// Input token ids, kept so paired results can be checked for alignment.
    pub tokens: Vec<usize>,
    /// `positions × |V|`
    pub logits: Matrix,
    /// Row-wise softmax of `logits`.
    pub probabilities: Matrix,
    /// Post-softmax attention per captured head, `positions × positions`.
    pub attention: BTreeMap<HeadId, Matrix>,
    /// Final-block MLP pre-activations, `positions × d_mlp`.
    pub final_mlp_preact: Option<Matrix>,
    /// Per-head output before the output projection, `positions × d_head`.
    pub head_outputs: BTreeMap<HeadId, Matrix>,
}

impl ForwardResult {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Run the model on `tokens`.
///
/// Pre-norm residual stream: each layer adds causal multi-head attention
/// (scaled by `1/sqrt(d_head)`) and then the MLP, both reading a layer-normed
/// copy of the residual. The final residual is layer-normed and projected by
/// `W_U`. Head ablations replace a head's output rows before `W_O`; neuron
/// ablations and boosts act on final-block pre-activations before the
/// nonlinearity.
pub fn forward(
    model: &ModelBundle,
    tokens: &[usize],
    capture: &CaptureSpec,
    interventions: &InterventionSpec,
) -> Result<ForwardResult> {
    model.check_tokens(tokens)?;
    let mut session = Session::new(model, capture, interventions)?;
    for &t in tokens {
        session.push(t)?;
    }
    Ok(session.finish())
}

/// Per-layer weight references, resolved once per session.
struct LayerWeights<'a> {
    ln_attn: (&'a Tensor, &'a Tensor),
    heads: Vec<[&'a Tensor; 4]>,
    ln_mlp: (&'a Tensor, &'a Tensor),
    w_in: &'a Tensor,
    b_in: &'a Tensor,
    w_out: &'a Tensor,
    b_out: &'a Tensor,
}

/// Incremental forward pass with a key/value cache.
///
/// Each pushed token is processed against the cached keys and values of the
/// earlier positions, so a full pass and an autoregressive loop produce
/// bit-identical rows.
pub(crate) struct Session<'a> {
    model: &'a ModelBundle,
    capture: &'a CaptureSpec,
    iv: &'a InterventionSpec,
    layers: Vec<LayerWeights<'a>>,
    tokens: Vec<usize>,
    /// `[layer][head][position]`
    keys: Vec<Vec<Vec<Vec<f64>>>>,
    values: Vec<Vec<Vec<Vec<f64>>>>,
    attention: BTreeMap<HeadId, Vec<Vec<f64>>>,
    head_outputs: BTreeMap<HeadId, Vec<f64>>,
    preacts: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl<'a> Session<'a> {
    pub(crate) fn new(
        model: &'a ModelBundle,
        capture: &'a CaptureSpec,
        iv: &'a InterventionSpec,
    ) -> Result<Self> {
        capture.validate(&model.config)?;
        iv.validate(&model.config)?;
        let cfg = &model.config;
        let layers = (0..cfg.n_layers)
            .map(|l| LayerWeights {
                ln_attn: (
                    model.tensor(&names::ln_attn_gamma(l)),
                    model.tensor(&names::ln_attn_beta(l)),
                ),
                heads: (0..cfg.n_heads)
                    .map(|h| {
                        [
                            model.tensor(&names::w_q(l, h)),
                            model.tensor(&names::w_k(l, h)),
                            model.tensor(&names::w_v(l, h)),
                            model.tensor(&names::w_o(l, h)),
                        ]
                    })
                    .collect(),
                ln_mlp: (
                    model.tensor(&names::ln_mlp_gamma(l)),
                    model.tensor(&names::ln_mlp_beta(l)),
                ),
                w_in: model.tensor(&names::w_in(l)),
                b_in: model.tensor(&names::b_in(l)),
                w_out: model.tensor(&names::w_out(l)),
                b_out: model.tensor(&names::b_out(l)),
            })
            .collect();
        let empty = || vec![vec![Vec::new(); cfg.n_heads]; cfg.n_layers];
        Ok(Self {
            model,
            capture,
            iv,
            layers,
            tokens: Vec::new(),
            keys: empty(),
            values: empty(),
            attention: BTreeMap::new(),
            head_outputs: BTreeMap::new(),
            preacts: Vec::new(),
            logits: Vec::new(),
            probs: Vec::new(),
        })
    }

    /// Process one more token and return its next-token distribution.
    pub(crate) fn push(&mut self, token: usize) -> Result<&[f64]> {
        let cfg = &self.model.config;
        if token >= cfg.vocab_size {
            return Err(Error::invalid(format!(
                "token id {token} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if self.tokens.len() >= cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.tokens.len() + 1,
                cfg.max_seq_len
            )));
        }
        self.step(token);
        let v = cfg.vocab_size;
        let start = self.probs.len() - v;
        Ok(&self.probs[start..])
    }

    fn step(&mut self, token: usize) {
        let model = self.model;
        let cfg = &model.config;
        let p = self.tokens.len();
        self.tokens.push(token);
        let scale = 1.0 / (cfg.d_head as f64).sqrt();
        let eps = cfg.layernorm_eps;
        let mut resid: Vec<f64> = model
            .tensor(names::TOK_EMBED)
            .row(token)
            .iter()
            .zip(model.tensor(names::POS_EMBED).row(p))
            .map(|(a, b)| a + b)
            .collect();

        for (l, lw) in self.layers.iter().enumerate() {
            let x = layer_norm(&resid, &lw.ln_attn.0.data, &lw.ln_attn.1.data, eps)
                .expect("norm shapes match");
            let mut attn_out = vec![0.0; cfg.d_model];
            for (h, [wq, wk, wv, wo]) in lw.heads.iter().enumerate() {
                let id = HeadId::new(l, h);
                let q = project(&x, wq);
                self.keys[l][h].push(project(&x, wk));
                self.values[l][h].push(project(&x, wv));
                let ablated = self.iv.head_mean(id);
                let want_pattern = self.capture.wants_head(id);
                let mut pattern = Vec::new();
                if ablated.is_none() || want_pattern {
                    let scores: Vec<f64> =
                        self.keys[l][h].iter().map(|k| dot(&q, k) * scale).collect();
                    pattern = softmax_unchecked(&scores);
                }
                let z = match ablated {
                    Some(mean) => mean.to_vec(),
                    None => {
                        let mut z = vec![0.0; cfg.d_head];
                        for (a, v) in pattern.iter().zip(&self.values[l][h]) {
                            if *a == 0.0 {
                                continue;
                            }
                            for (o, vv) in z.iter_mut().zip(v) {
                                *o += a * vv;
                            }
                        }
                        z
                    }
                };
                for (o, v) in attn_out.iter_mut().zip(project(&z, wo)) {
                    *o += v;
                }
                if want_pattern {
                    self.attention.entry(id).or_default().push(pattern);
                }
                if self.capture.head_outputs {
                    self.head_outputs
                        .entry(id)
                        .or_default()
                        .extend_from_slice(&z);
                }
            }
            for (r, a) in resid.iter_mut().zip(&attn_out) {
                *r += a;
            }

            let x2 = layer_norm(&resid, &lw.ln_mlp.0.data, &lw.ln_mlp.1.data, eps)
                .expect("norm shapes match");
            let mut pre: Vec<f64> = (0..cfg.d_mlp)
                .map(|i| dot(lw.w_in.row(i), &x2) + lw.b_in.data[i])
                .collect();
            if l + 1 == cfg.n_layers {
                self.iv.apply_to_preacts(&mut pre);
                if self.capture.final_mlp_preact {
                    self.preacts.extend_from_slice(&pre);
                }
            }
            let act: Vec<f64> = pre.iter().map(|&v| cfg.activation.apply(v)).collect();
            for (k, r) in resid.iter_mut().enumerate() {
                *r += dot(lw.w_out.row(k), &act) + lw.b_out.data[k];
            }
        }

        let normed = layer_norm(
            &resid,
            &model.tensor(names::LN_FINAL_GAMMA).data,
            &model.tensor(names::LN_FINAL_BETA).data,
            eps,
        )
        .expect("norm shapes match");
        let w_u = model.tensor(names::UNEMBED);
        let row: Vec<f64> = (0..cfg.vocab_size)
            .map(|t| dot(w_u.row(t), &normed))
            .collect();
        self.probs.extend(softmax_unchecked(&row));
        self.logits.extend(row);
    }

    pub(crate) fn finish(self) -> ForwardResult {
        let cfg = &self.model.config;
        let n = self.tokens.len();
        let attention = self
            .attention
            .into_iter()
            .map(|(id, rows)| {
                let mut m = Matrix::zeros(n, n);
                for (i, r) in rows.iter().enumerate() {
                    m.row_mut(i)[..r.len()].copy_from_slice(r);
                }
                (id, m)
            })
            .collect();
        let head_outputs = self
            .head_outputs
            .into_iter()
            .map(|(id, d)| {
                (
                    id,
                    Matrix::new(n, cfg.d_head, d).expect("finite head output"),
                )
            })
            .collect();
        ForwardResult {
            tokens: self.tokens,
            logits: Matrix::new(n, cfg.vocab_size, self.logits).expect("finite logits"),
            probabilities: Matrix::new(n, cfg.vocab_size, self.probs)
                .expect("finite probabilities"),
            attention,
            final_mlp_preact: self
                .capture
                .final_mlp_preact
                .then(|| Matrix::new(n, cfg.d_mlp, self.preacts).expect("finite pre-activations")),
            head_outputs,
        }
    }
}

/// `x (d) · W (d × k)` for a rank-2 tensor.
fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let k = w.shape[1];
    let mut out = vec![0.0; k];
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xv * wv;
        }
    }
    out
}

impl ModelBundle {
    /// Plain forward pass without captures or interventions.
    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(forward(
            self,
            tokens,
            &CaptureSpec::none(),
            &InterventionSpec::none(),
        )?
        .logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_config;
    use crate::model::ModelBundle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_model(seed: u64) -> ModelBundle {
        let mut m = ModelBundle::zeros(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = m.tensors().keys().cloned().collect();
        for name in names {
            let len = m.tensor(&name).data.len();
            let data = (0..len)
                .map(|_| {
                    let r: f64 = rng.gen_range(-1.0..1.0);
                    if name.ends_with(".gamma") {
                        1.0 + 0.2 * r
                    } else {
                        r
                    }
                })
                .collect();
            m.set_tensor(&name, data).unwrap();
        }
        m
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = random_model(1);
        let r = forward(&m, &[3], &CaptureSpec::all(), &InterventionSpec::none()).unwrap();
        assert_eq!(r.logits.shape(), (1, 5));
        for a in r.attention.values() {
            assert_eq!(a.data(), &[1.0]);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = ModelBundle::zeros(small_config()).unwrap();
        let r = forward(
            &m,
            &[0, 1, 2],
            &CaptureSpec::none(),
            &InterventionSpec::none(),
        )
        .unwrap();
        assert!(r.logits.data().iter().all(|&x| x == 0.0));
        assert!(r
            .probabilities
            .data()
            .iter()
            .all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = ModelBundle::zeros(small_config()).unwrap();
        assert!(forward(&m, &[5], &CaptureSpec::none(), &InterventionSpec::none()).is_err());
        assert!(forward(&m, &[0; 9], &CaptureSpec::none(), &InterventionSpec::none()).is_err());
        assert!(forward(&m, &[], &CaptureSpec::none(), &InterventionSpec::none()).is_err());
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let m = random_model(7);
        let toks = [1, 4, 0, 2, 2, 3, 1];
        let r = forward(&m, &toks, &CaptureSpec::all(), &InterventionSpec::none()).unwrap();
        for a in r.attention.values() {
            for i in 0..toks.len() {
                let row = a.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
        for i in 0..toks.len() {
            assert!((r.probabilities.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn causality_is_exact() {
        let m = random_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = rng.gen_range(2..=8);
            let toks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let t = rng.gen_range(0..n - 1);
            let mut zeroed = toks.clone();
            for z in zeroed.iter_mut().skip(t + 1) {
                *z = 0;
            }
            let a = m.logits(&toks).unwrap();
            let b = m.logits(&zeroed).unwrap();
            for p in 0..=t {
                assert_eq!(a.row(p), b.row(p));
            }
        }
    }
}
