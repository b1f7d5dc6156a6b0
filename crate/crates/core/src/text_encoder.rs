//! Lightweight text encoder: factorised token embedding followed by
//! bottlenecked transformer layers. Token-level features are kept unpooled
//! for fusion; a masked-mean pooled vector serves the contrastive stage.

use crate::autograd::{key_mask, Graph, Scalar, Var};
use crate::config::ModelConfig;
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{self, attention, layer_norm, linear, masked_mean};
use crate::params::{count_specs, InitKind, ParamSpec, ParamStore};

pub const PREFIX: &str = "text_encoder/";

fn name(rest: &str) -> String {
    format!("{PREFIX}{rest}")
}

pub fn layer_name(l: usize) -> String {
    name(&format!("layer{l}"))
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (v, e, h, b) = (
        cfg.vocab_size,
        cfg.text_embed_factor,
        cfg.text_hidden,
        cfg.text_bottleneck,
    );
    let mut out = vec![
        ParamSpec::new(name("embed_a"), &[v, e], InitKind::Normal(1.0)),
        ParamSpec::new(name("embed_b.weight"), &[e, h], InitKind::Fan(e)),
        ParamSpec::new(name("pos"), &[cfg.text_max_len, h], InitKind::Normal(0.1)),
    ];
    for l in 0..cfg.text_layers {
        let p = layer_name(l);
        nn::layer_norm_spec(&mut out, &format!("{p}.ln_in"), h);
        nn::linear_spec(&mut out, &format!("{p}.down"), h, b, true);
        nn::attention_spec(&mut out, &format!("{p}.attn"), b, true);
        nn::ffn_spec(&mut out, &format!("{p}.ffn"), b, cfg.text_ffn_dim, b);
        nn::linear_spec(&mut out, &format!("{p}.up"), b, h, true);
        nn::layer_norm_spec(&mut out, &format!("{p}.ln_out"), h);
    }
    nn::linear_spec(&mut out, &name("proj"), h, cfg.embed_dim, true);
    out
}

/// Analytic parameter count of the encoder described by `cfg`.
pub fn text_param_count(cfg: &ModelConfig) -> usize {
    count_specs(&param_specs(cfg))
}

/// Number of scalars stored under the text encoder prefix.
pub fn count_text_params<F: Scalar>(params: &ParamStore<F>) -> usize {
    params.num_scalars(PREFIX)
}

/// Output of [`encode_text`].
pub struct TextFeatures {
    /// `[batch, len, d]` token features.
    pub tokens: Var,
    /// `[batch, len, hidden]` final hidden states.
    pub hidden: Var,
    pub mask: Vec<Vec<u8>>,
    /// Attention probabilities of every layer, `[batch, heads, len, len]`.
    pub probs: Vec<Var>,
}

/// One bottleneck layer:
/// `y = LN_out(x + Up(FFN(SelfAttn(Down(LN_in(x)), mask))))`.
///
/// Returns the output and the attention probabilities.
pub fn bottleneck_layer_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    x: Var,
    layer: &str,
    mask: &[Vec<u8>],
) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.text_hidden {
        return Err(Error::shape(format!(
            "text layer input {shape:?}, expected [batch, len, {}]",
            cfg.text_hidden
        )));
    }
    check_mask(mask, shape[0], shape[1])?;
    let h = layer_norm(g, x, &format!("{layer}.ln_in"));
    let h = linear(g, h, &format!("{layer}.down"));
    let att = attention(
        g,
        h,
        h,
        &format!("{layer}.attn"),
        cfg.text_heads,
        Some(key_mask(mask)),
    );
    let h = nn::ffn(g, att.out, &format!("{layer}.ffn"));
    let h = linear(g, h, &format!("{layer}.up"));
    let y = g.add(x, h);
    Ok((layer_norm(g, y, &format!("{layer}.ln_out")), att.probs))
}

fn check_mask(mask: &[Vec<u8>], batch: usize, len: usize) -> Result<()> {
    if mask.len() != batch || mask.iter().any(|m| m.len() != len) {
        return Err(Error::shape(format!(
            "mask does not align with [batch {batch}, len {len}]"
        )));
    }
    Ok(())
}

/// Encodes a batch of id rows of equal length `<= text_max_len`.
pub fn encode_text<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    ids: &[Vec<usize>],
    mask: &[Vec<u8>],
) -> Result<TextFeatures> {
    let batch = ids.len();
    let len = ids.first().map_or(0, Vec::len);
    if batch == 0 || len == 0 || ids.iter().any(|r| r.len() != len) {
        return Err(Error::shape(
            "text batch must be a non-empty rectangle of ids",
        ));
    }
    if len > cfg.text_max_len {
        return Err(Error::shape(format!(
            "sequence length {len} exceeds text_max_len {}",
            cfg.text_max_len
        )));
    }
    check_mask(mask, batch, len)?;
    let flat: Vec<usize> = ids.iter().flatten().copied().collect();
    if let Some(&bad) = flat.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }

    let table = g.p(&name("embed_a"));
    let e = g.gather_rows(table, &flat);
    let e = g.reshape(e, &[batch, len, cfg.text_embed_factor]);
    let wb = g.p(&name("embed_b.weight"));
    let e = g.linear(e, wb, None);
    let pos = g.p(&name("pos"));
    let pos = g.narrow(pos, 0, 0, len);
    let mut x = g.add(e, pos);

    let mut probs = Vec::with_capacity(cfg.text_layers);
    for l in 0..cfg.text_layers {
        let (y, p) = bottleneck_layer_forward(g, cfg, x, &layer_name(l), mask)?;
        x = y;
        probs.push(p);
    }
    let tokens = linear(g, x, &name("proj"));
    Ok(TextFeatures {
        tokens,
        hidden: x,
        mask: mask.to_vec(),
        probs,
    })
}

pub fn encode_sequences<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    seqs: &[TokenSequence],
) -> Result<TextFeatures> {
    let ids: Vec<Vec<usize>> = seqs.iter().map(|s| s.ids.clone()).collect();
    let mask: Vec<Vec<u8>> = seqs.iter().map(|s| s.attention_mask.clone()).collect();
    encode_text(g, cfg, &ids, &mask)
}

/// Contrastive embedding `T_s` (before normalisation): masked mean of the final
/// hidden states, then the output projection. `[batch, d]`.
pub fn pooled_text<F: Scalar>(g: &mut Graph<'_, F>, feats: &TextFeatures) -> Var {
    let pooled = masked_mean(g, feats.hidden, &feats.mask);
    linear(g, pooled, &name("proj"))
}
