//! Shared layers built on the autograd tape.
//!
//! Parameter naming: affine maps store `{name}.weight` as `[in, out]` and an
//! optional `{name}.bias`; layer norms store `{name}.gamma` / `{name}.beta`;
//! convolutions store `{name}.weight` as `[cout, cin / groups, k, k]`.

use ndarray::ArrayD;

use crate::autograd::{Graph, Scalar, Var};
use crate::params::{InitKind, ParamSpec};

pub const LN_EPS: f64 = 1e-5;
/// Standard deviation of learned embedding tables.
pub const EMBED_STD: f64 = 0.02;

pub fn linear_spec(
    out: &mut Vec<ParamSpec>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    out.push(ParamSpec::new(
        format!("{name}.weight"),
        &[fan_in, fan_out],
        InitKind::Fan(fan_in),
    ));
    if bias {
        out.push(ParamSpec::new(
            format!("{name}.bias"),
            &[fan_out],
            InitKind::Zeros,
        ));
    }
}

pub fn layer_norm_spec(out: &mut Vec<ParamSpec>, name: &str, dim: usize) {
    out.push(ParamSpec::new(
        format!("{name}.gamma"),
        &[dim],
        InitKind::Ones,
    ));
    out.push(ParamSpec::new(
        format!("{name}.beta"),
        &[dim],
        InitKind::Zeros,
    ));
}

pub fn conv_spec(
    out: &mut Vec<ParamSpec>,
    name: &str,
    cin_per_group: usize,
    cout: usize,
    k: usize,
    bias: bool,
) {
    let fan_in = cin_per_group * k * k;
    out.push(ParamSpec::new(
        format!("{name}.weight"),
        &[cout, cin_per_group, k, k],
        InitKind::Fan(fan_in),
    ));
    if bias {
        out.push(ParamSpec::new(
            format!("{name}.bias"),
            &[cout],
            InitKind::Zeros,
        ));
    }
}

pub fn attention_spec(out: &mut Vec<ParamSpec>, name: &str, dim: usize, qkv_bias: bool) {
    for proj in ["q", "k", "v"] {
        linear_spec(out, &format!("{name}.{proj}"), dim, dim, qkv_bias);
    }
    linear_spec(out, &format!("{name}.o"), dim, dim, true);
}

pub fn ffn_spec(out: &mut Vec<ParamSpec>, name: &str, dim: usize, hidden: usize, out_dim: usize) {
    linear_spec(out, &format!("{name}.fc1"), dim, hidden, true);
    linear_spec(out, &format!("{name}.fc2"), hidden, out_dim, true);
}

pub fn transformer_layer_spec(out: &mut Vec<ParamSpec>, name: &str, dim: usize, ffn_dim: usize) {
    layer_norm_spec(out, &format!("{name}.ln1"), dim);
    attention_spec(out, &format!("{name}.attn"), dim, true);
    layer_norm_spec(out, &format!("{name}.ln2"), dim);
    ffn_spec(out, &format!("{name}.ffn"), dim, ffn_dim, dim);
}

pub fn linear<F: Scalar>(g: &mut Graph<'_, F>, x: Var, name: &str) -> Var {
    let w = g.p(&format!("{name}.weight"));
    let bias_name = format!("{name}.bias");
    let b = g.has_param(&bias_name).then(|| g.p(&bias_name));
    g.linear(x, w, b)
}

pub fn layer_norm<F: Scalar>(g: &mut Graph<'_, F>, x: Var, name: &str) -> Var {
    let gamma = g.p(&format!("{name}.gamma"));
    let beta = g.p(&format!("{name}.beta"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Convolution with "same"-style padding `k / 2`.
pub fn conv<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    name: &str,
    stride: usize,
    groups: usize,
) -> Var {
    let w = g.p(&format!("{name}.weight"));
    let k = g.shape(w)[2];
    let bias_name = format!("{name}.bias");
    let b = g.has_param(&bias_name).then(|| g.p(&bias_name));
    g.conv2d(x, w, b, stride, k / 2, groups)
}

pub struct Attention {
    pub out: Var,
    /// Attention probabilities `[batch, heads, queries, keys]`.
    pub probs: Var,
}

/// Multi-head scaled dot-product attention with per-head `1/sqrt(d_head)` scaling.
///
/// `mask` is additive and broadcast against `[batch, heads, queries, keys]`.
pub fn attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    queries: Var,
    keys_values: Var,
    name: &str,
    heads: usize,
    mask: Option<ArrayD<F>>,
) -> Attention {
    let qs = g.shape(queries).to_vec();
    let ks = g.shape(keys_values).to_vec();
    let (batch, nq, dim) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    assert_eq!(dim % heads, 0, "width {dim} not divisible by {heads} heads");
    let dh = dim / heads;

    let q = linear(g, queries, &format!("{name}.q"));
    let k = linear(g, keys_values, &format!("{name}.k"));
    let v = linear(g, keys_values, &format!("{name}.v"));
    let split = |g: &mut Graph<'_, F>, t: Var, n: usize| {
        let t = g.reshape(t, &[batch, n, heads, dh]);
        g.permute(t, &[0, 2, 1, 3])
    };
    let q = split(g, q, nq);
    let k = split(g, k, nk);
    let v = split(g, v, nk);

    let scores = g.matmul(q, k, true);
    let mut scores = g.scale(scores, F::one() / F::c(dh as f64).sqrt());
    if let Some(mask) = mask {
        let m = g.constant(mask);
        scores = g.add(scores, m);
    }
    let probs = g.softmax(scores);
    let ctx = g.matmul(probs, v, false);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[batch, nq, dim]);
    let out = linear(g, ctx, &format!("{name}.o"));
    Attention { out, probs }
}

pub fn ffn<F: Scalar>(g: &mut Graph<'_, F>, x: Var, name: &str) -> Var {
    let h = linear(g, x, &format!("{name}.fc1"));
    let h = g.gelu(h);
    linear(g, h, &format!("{name}.fc2"))
}

/// Pre-norm transformer layer: `x + Attn(LN(x))` then `x + FFN(LN(x))`.
/// Returns the output and the attention probabilities.
pub fn transformer_layer<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    name: &str,
    heads: usize,
    mask: Option<ArrayD<F>>,
) -> (Var, Var) {
    let h = layer_norm(g, x, &format!("{name}.ln1"));
    let att = attention(g, h, h, &format!("{name}.attn"), heads, mask);
    let x = g.add(x, att.out);
    let h = layer_norm(g, x, &format!("{name}.ln2"));
    let h = ffn(g, h, &format!("{name}.ffn"));
    (g.add(x, h), att.probs)
}

/// Mean over axis 1 of `[batch, len, dim]` restricted to positions where `mask` is 1.
/// Rows without any kept position yield zeros.
pub fn masked_mean<F: Scalar>(g: &mut Graph<'_, F>, x: Var, mask: &[Vec<u8>]) -> Var {
    let shape = g.shape(x).to_vec();
    let (batch, len) = (shape[0], shape[1]);
    let mut m = ArrayD::<F>::zeros(ndarray::IxDyn(&[batch, len, 1]));
    let mut inv = ArrayD::<F>::zeros(ndarray::IxDyn(&[batch, 1]));
    for (b, row) in mask.iter().enumerate() {
        let count = row.iter().filter(|&&v| v != 0).count();
        for (t, &keep) in row.iter().enumerate() {
            if keep != 0 {
                m[[b, t, 0]] = F::one();
            }
        }
        inv[[b, 0]] = F::one() / F::c(count.max(1) as f64);
    }
    let m = g.constant(m);
    let inv = g.constant(inv);
    let xm = g.mul(x, m);
    let s = g.sum_axis(xm, 1, false);
    g.mul(s, inv)
}
