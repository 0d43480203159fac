//! Pre-norm transformer blocks exposing every layer's output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::multires::{insert_linear, ENCODER_PREFIX};
use crate::numerics::{Bindings, Graph, ParamSet, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl TransformerConfig {
    pub fn new(n_layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            n_layers,
            hidden,
            heads,
            mlp_ratio: 4,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_layers == 0 {
            v.push("transformer needs at least one layer".to_string());
        }
        if self.hidden < 2 {
            v.push(format!("hidden size {} is below 2", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            v.push(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            v.push("mlp ratio must be positive".to_string());
        }
        v
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let m = d * self.mlp_ratio;
        let per_layer = 4 * (d * d + d) + (d * m + m) + (m * d + d) + 4 * d;
        self.n_layers * per_layer + 2 * d
    }
}

pub fn block_name(j: usize, part: &str) -> String {
    format!("{ENCODER_PREFIX}block{j}.{part}")
}

pub const FINAL_NORM: &str = "encoder.final_ln";

fn insert_norm<T: Scalar>(params: &mut ParamSet<T>, name: &str, d: usize) -> Result<()> {
    params.insert(format!("{name}.gamma"), Tensor::ones(&[d]))?;
    params.insert(format!("{name}.beta"), Tensor::zeros(&[d]))
}

pub fn init_transformer<T: Scalar, R: Rng + ?Sized>(
    cfg: &TransformerConfig,
    rng: &mut R,
    params: &mut ParamSet<T>,
) -> Result<()> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let d = cfg.hidden;
    for j in 0..cfg.n_layers {
        insert_norm(params, &block_name(j, "ln1"), d)?;
        for proj in ["q", "k", "v", "o"] {
            insert_linear(params, &block_name(j, &format!("attn.{proj}")), d, d, rng)?;
        }
        insert_norm(params, &block_name(j, "ln2"), d)?;
        insert_linear(params, &block_name(j, "mlp.fc1"), d, d * cfg.mlp_ratio, rng)?;
        insert_linear(params, &block_name(j, "mlp.fc2"), d * cfg.mlp_ratio, d, rng)?;
    }
    insert_norm(params, FINAL_NORM, d)
}

/// Scaled dot-product attention over already-projected `q, k, v` `[L, D]`,
/// heads concatenated back to `[L, D]`.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::dim("sequence", format!("attention input {shape:?}")));
    }
    let d = shape[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(
            "heads",
            format!("{d} features over {heads} heads"),
        ));
    }
    let hd = d / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores)?;
        outs.push(g.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

fn norm<T: Scalar>(g: &mut Graph<T>, b: &Bindings, x: Var, name: &str) -> Result<Var> {
    let gamma = b.get(&format!("{name}.gamma"))?;
    let beta = b.get(&format!("{name}.beta"))?;
    g.layer_norm(x, Some(gamma), Some(beta), LN_EPS)
}

fn linear<T: Scalar>(g: &mut Graph<T>, b: &Bindings, x: Var, name: &str) -> Result<Var> {
    let w = b.get(&format!("{name}.weight"))?;
    let bias = b.get(&format!("{name}.bias"))?;
    g.linear(x, w, bias)
}

/// `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &TransformerConfig,
    j: usize,
    x: Var,
) -> Result<Var> {
    let h = norm(g, b, x, &block_name(j, "ln1"))?;
    let q = linear(g, b, h, &block_name(j, "attn.q"))?;
    let k = linear(g, b, h, &block_name(j, "attn.k"))?;
    let v = linear(g, b, h, &block_name(j, "attn.v"))?;
    let a = attention(g, q, k, v, cfg.heads)?;
    let o = linear(g, b, a, &block_name(j, "attn.o"))?;
    let x = g.add(x, o)?;
    let h = norm(g, b, x, &block_name(j, "ln2"))?;
    let m = linear(g, b, h, &block_name(j, "mlp.fc1"))?;
    let m = g.gelu(m);
    let m = linear(g, b, m, &block_name(j, "mlp.fc2"))?;
    g.add(x, m)
}

/// Outputs of every block, `H^(1) .. H^(N)`.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &TransformerConfig,
    input: Var,
) -> Result<Vec<Var>> {
    let shape = g.shape(input);
    if shape.len() != 2 || shape[1] != cfg.hidden {
        return Err(Error::dim(
            "features",
            format!("transformer expects [L, {}], got {shape:?}", cfg.hidden),
        ));
    }
    let mut x = input;
    let mut states = Vec::with_capacity(cfg.n_layers);
    for j in 0..cfg.n_layers {
        x = block_forward(g, b, cfg, j, x)?;
        states.push(x);
    }
    Ok(states)
}

/// Final layer norm applied to a `[D]` or `[L, D]` value.
pub fn final_norm<T: Scalar>(g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
    norm(g, b, x, FINAL_NORM)
}

/// Every layer's hidden states, evaluated without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<T: Scalar> {
    pub hidden_states: Vec<Tensor<T>>,
}

pub fn encode_layers<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &TransformerConfig,
    tokens: &Tensor<T>,
) -> Result<LayerStack<T>> {
    let mut g = Graph::new();
    let b = Bindings::frozen(&mut g, params);
    let x = g.constant(tokens.clone());
    let states = encoder_forward(&mut g, &b, cfg, x)?;
    Ok(LayerStack {
        hidden_states: states.into_iter().map(|s| g.value(s).clone()).collect(),
    })
}
