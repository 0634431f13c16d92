// SPDX-License-Identifier: MIT OR Apache-2.0

//! A minimal pre-norm decoder-only transformer.
//!
//! The model is stored as a [`ModelBundle`]: a [`ModelConfig`] plus a map of
//! named `f64` tensors. [`forward`] runs the full pass with per-head attention
//! decomposition and exposes the final block's MLP pre-activations, which is
//! where entropy neurons live. [`toy`] holds constructors for hand-wired
//! models with known circuits.

mod forward;
mod generate;
pub mod io;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{forward, ForwardResult};
pub use generate::{generate, Decoding};
pub use io::{load_model, save_model};
pub use toy::{
    build_composite_toy, build_entropy_neuron_toy, build_induction_toy, build_induction_toy_with,
    EntropyNeuronToy, InductionToy, ToyOptions,
};

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
            }
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub layernorm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!(
                "config field {name} must be positive"
            )));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::invalid(format!(
                "n_heads ({}) * d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if !(self.layernorm_eps > 0.0 && self.layernorm_eps.is_finite()) {
            return Err(Error::invalid("layernorm_eps must be positive and finite"));
        }
        Ok(())
    }

    /// Every (layer, head) pair in canonical order.
    pub fn heads(&self) -> Vec<HeadId> {
        (0..self.n_layers)
            .flat_map(|layer| (0..self.n_heads).map(move |head| HeadId { layer, head }))
            .collect()
    }

    pub fn has_head(&self, id: HeadId) -> bool {
        id.layer < self.n_layers && id.head < self.n_heads
    }

    /// Expected shape of every named tensor, in canonical (serialization) order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, dh, m) = (self.vocab_size, self.d_model, self.d_head, self.d_mlp);
        let mut out = vec![
            (names::TOK_EMBED.to_string(), vec![v, d]),
            (names::POS_EMBED.to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            out.push((names::ln_attn_gamma(l), vec![d]));
            out.push((names::ln_attn_beta(l), vec![d]));
            for h in 0..self.n_heads {
                out.push((names::w_q(l, h), vec![d, dh]));
                out.push((names::w_k(l, h), vec![d, dh]));
                out.push((names::w_v(l, h), vec![d, dh]));
                out.push((names::w_o(l, h), vec![dh, d]));
            }
            out.push((names::ln_mlp_gamma(l), vec![d]));
            out.push((names::ln_mlp_beta(l), vec![d]));
            out.push((names::w_in(l), vec![m, d]));
            out.push((names::b_in(l), vec![m]));
            out.push((names::w_out(l), vec![d, m]));
            out.push((names::b_out(l), vec![d]));
        }
        out.push((names::LN_FINAL_GAMMA.to_string(), vec![d]));
        out.push((names::LN_FINAL_BETA.to_string(), vec![d]));
        out.push((names::UNEMBED.to_string(), vec![v, d]));
        out
    }
}

/// Tensor naming scheme used by [`ModelBundle`] and the model file format.
pub mod names {
    pub const TOK_EMBED: &str = "tok_embed";
    pub const POS_EMBED: &str = "pos_embed";
    pub const LN_FINAL_GAMMA: &str = "ln_final.gamma";
    pub const LN_FINAL_BETA: &str = "ln_final.beta";
    pub const UNEMBED: &str = "unembed";

    pub fn ln_attn_gamma(l: usize) -> String {
        format!("blocks.{l}.ln_attn.gamma")
    }
    pub fn ln_attn_beta(l: usize) -> String {
        format!("blocks.{l}.ln_attn.beta")
    }
    pub fn ln_mlp_gamma(l: usize) -> String {
        format!("blocks.{l}.ln_mlp.gamma")
    }
    pub fn ln_mlp_beta(l: usize) -> String {
        format!("blocks.{l}.ln_mlp.beta")
    }
    pub fn w_q(l: usize, h: usize) -> String {
        format!("blocks.{l}.attn.h{h}.w_q")
    }
    pub fn w_k(l: usize, h: usize) -> String {
        format!("blocks.{l}.attn.h{h}.w_k")
    }
    pub fn w_v(l: usize, h: usize) -> String {
        format!("blocks.{l}.attn.h{h}.w_v")
    }
    pub fn w_o(l: usize, h: usize) -> String {
        format!("blocks.{l}.attn.h{h}.w_o")
    }
    /// `d_mlp × d_model`
    pub fn w_in(l: usize) -> String {
        format!("blocks.{l}.mlp.w_in")
    }
    pub fn b_in(l: usize) -> String {
        format!("blocks.{l}.mlp.b_in")
    }
    /// `d_model × d_mlp`; column `i` is neuron `i`'s output direction.
    pub fn w_out(l: usize) -> String {
        format!("blocks.{l}.mlp.w_out")
    }
    pub fn b_out(l: usize) -> String {
        format!("blocks.{l}.mlp.b_out")
    }
}

/// Attention head coordinate. Displays as `L{layer}H{head}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("head id must look like L<layer>H<head>, got {s:?}"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (l, h) = rest.split_once('H').ok_or_else(bad)?;
        Ok(HeadId {
            layer: l.parse().map_err(|_| bad())?,
            head: h.parse().map_err(|_| bad())?,
        })
    }
}

/// A dense tensor of rank 1 or 2 stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} does not match {} entries",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Column `c` of a rank-2 tensor.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.shape[0]).map(|r| self.get2(r, c)).collect()
    }
}

/// Configuration plus named weights of a decoder-only transformer.
///
/// Immutable once built or loaded; all forward-pass state lives in per-call
/// buffers, so a bundle can be shared across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelBundle {
    /// Validate and assemble a bundle. Every tensor named by
    /// [`ModelConfig::tensor_shapes`] must be present with that shape.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.tensor_shapes() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::shape(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "tensor {name} contains non-finite entries"
                )));
            }
        }
        let expected: std::collections::BTreeSet<String> =
            config.tensor_shapes().into_iter().map(|(n, _)| n).collect();
        if let Some(extra) = tensors.keys().find(|k| !expected.contains(*k)) {
            return Err(Error::invalid(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, tensors })
    }

    /// All-zero weights with unit layer-norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gamma") {
                    Tensor::filled(shape, 1.0)
                } else {
                    Tensor::zeros(shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("bundle invariant: tensor {name} present"))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Replace a tensor's data in place; the shape must not change.
    pub fn set_tensor(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown tensor {name}")))?;
        if t.data.len() != data.len() {
            return Err(Error::shape(format!(
                "tensor {name} needs {} entries, got {}",
                t.data.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("tensor {name}: non-finite entries")));
        }
        t.data = data;
        Ok(())
    }

    pub fn final_layer(&self) -> usize {
        self.config.n_layers - 1
    }

    /// Output direction (column of the final block's `W_out`) of a neuron.
    pub fn neuron_w_out(&self, neuron: usize) -> Vec<f64> {
        self.tensor(&names::w_out(self.final_layer()))
            .column(neuron)
    }

    /// `W_U` as a `|V| × d_model` matrix.
    pub fn unembed(&self) -> crate::tensor::Matrix {
        let t = self.tensor(names::UNEMBED);
        crate::tensor::Matrix::new(t.shape[0], t.shape[1], t.data.clone())
            .expect("bundle invariant: unembed is finite and non-empty")
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {t} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_head: 2,
            d_mlp: 3,
            max_seq_len: 8,
            activation: Activation::Relu,
            layernorm_eps: 1e-5,
        }
    }

    #[test]
    fn head_id_round_trips_through_text() {
        let h = HeadId::new(3, 11);
        assert_eq!(h.to_string(), "L3H11");
        assert_eq!("L3H11".parse::<HeadId>().unwrap(), h);
        assert!("3H1".parse::<HeadId>().is_err());
        assert!("L3Hx".parse::<HeadId>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.d_head = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn bundle_rejects_missing_and_misshapen_tensors() {
        let z = ModelBundle::zeros(small_config()).unwrap();
        let mut tensors = z.tensors().clone();
        tensors.remove(names::UNEMBED);
        let err = ModelBundle::new(small_config(), tensors).unwrap_err();
        assert!(err.to_string().contains("unembed"));

        let mut tensors = z.tensors().clone();
        tensors.insert(names::w_in(1), Tensor::zeros(vec![2, 4]));
        let err = ModelBundle::new(small_config(), tensors).unwrap_err();
        assert!(err.to_string().contains("blocks.1.mlp.w_in"));
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
    }
}
