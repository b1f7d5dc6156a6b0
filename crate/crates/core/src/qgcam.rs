//! Question-gated cross-modal attention.
//!
//! Visual patch tokens query the question tokens; a per-patch sigmoid gate,
//! computed from each patch and a projected pooled question vector, scales the
//! attended result before it is added back to the patch. A feed-forward
//! refinement with layer norm follows, and an affine adapter maps the result
//! into the decoder's embedding space as pseudo tokens.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{key_mask, Graph, Scalar, Var};
use crate::config::{FusionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{self, attention, layer_norm, linear, masked_mean, Attention};
use crate::params::{count_specs, ParamSpec};

pub const PREFIX: &str = "qgcam/";
pub const ATTN: &str = "qgcam/attn";
pub const TEXT_PROJ: &str = "qgcam/text_proj";
pub const GATE_FC1: &str = "qgcam/gate.fc1";
pub const GATE_FC2: &str = "qgcam/gate.fc2";
pub const FFN: &str = "qgcam/ffn";
pub const LN: &str = "qgcam/ln";
pub const ADAPTER: &str = "qgcam/adapter";
pub const VQ_ATTN: &str = "qgcam/vq_attn";

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut out = Vec::new();
    for proj in ["q", "k", "v"] {
        nn::linear_spec(&mut out, &format!("{ATTN}.{proj}"), d, d, false);
    }
    nn::linear_spec(&mut out, &format!("{ATTN}.o"), d, d, true);
    nn::linear_spec(&mut out, TEXT_PROJ, d, d, true);
    nn::linear_spec(&mut out, GATE_FC1, 2 * d, cfg.gate_hidden, true);
    nn::linear_spec(&mut out, GATE_FC2, cfg.gate_hidden, 1, true);
    nn::ffn_spec(&mut out, FFN, d, cfg.fusion_ffn_mult * d, d);
    nn::layer_norm_spec(&mut out, LN, d);
    nn::linear_spec(&mut out, ADAPTER, d, cfg.decoder_dim, true);
    if cfg.fusion_variant == FusionVariant::VisualQuery {
        for proj in ["q", "k", "v"] {
            nn::linear_spec(&mut out, &format!("{VQ_ATTN}.{proj}"), d, d, false);
        }
        nn::linear_spec(&mut out, &format!("{VQ_ATTN}.o"), d, d, true);
    }
    out
}

pub fn qgcam_param_count(cfg: &ModelConfig) -> usize {
    count_specs(&param_specs(cfg))
}

/// Every intermediate of one fusion pass.
pub struct FusionOutput {
    /// Cross-attention output `[B, N, d]`.
    pub attended: Var,
    /// Gate `[B, N, 1]`.
    pub gate: Var,
    /// `F_I + gate * attended`.
    pub modulated: Var,
    /// `LN(F_mod + FFN(F_mod))`, plus the extra attention for the visual-query variant.
    pub fused: Var,
    /// Decoder-space tokens `[B, N, d_dec]`.
    pub pseudo: Var,
    /// Cross-attention probabilities `[B, heads, N, T]`.
    pub probs: Var,
}

fn check_tokens<F: Scalar>(
    g: &Graph<'_, F>,
    x: Var,
    what: &str,
    d: usize,
) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != d || s[0] == 0 {
        return Err(Error::shape(format!(
            "{what} must be [batch, len, {d}], got {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

fn check_mask(mask: &[Vec<u8>], batch: usize, len: usize) -> Result<()> {
    if mask.len() != batch || mask.iter().any(|m| m.len() != len) {
        return Err(Error::shape(format!(
            "text mask does not match [batch {batch}, len {len}]"
        )));
    }
    if let Some(row) = mask.iter().position(|m| m.iter().all(|&v| v == 0)) {
        return Err(Error::Mask(format!("text row {row} has no unmasked token")));
    }
    Ok(())
}

/// Masked mean of text tokens over the token axis: `[B, T, d] -> [B, d]`.
pub fn pool_text<F: Scalar>(g: &mut Graph<'_, F>, text: Var, mask: &[Vec<u8>]) -> Result<Var> {
    let s = g.shape(text).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("text tokens must be 3-D, got {s:?}")));
    }
    check_mask(mask, s[0], s[1])?;
    Ok(masked_mean(g, text, mask))
}

/// Multi-head attention with visual queries and text keys/values; masked text
/// positions get `-inf` logits.
pub fn cross_attend<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    visual: Var,
    text: Var,
    mask: &[Vec<u8>],
) -> Result<Attention> {
    let d = cfg.embed_dim;
    let (b, _) = check_tokens(g, visual, "visual tokens", d)?;
    let (bt, t) = check_tokens(g, text, "text tokens", d)?;
    if b != bt {
        return Err(Error::shape(format!(
            "batch {b} of visual tokens vs {bt} of text tokens"
        )));
    }
    check_mask(mask, b, t)?;
    Ok(attention(
        g,
        visual,
        text,
        ATTN,
        cfg.attention_heads_fusion,
        Some(key_mask(mask)),
    ))
}

/// `sigmoid(MLP([F_I ; Proj(pooled)]))` per patch, `[B, N, 1]`.
pub fn compute_gate<F: Scalar>(g: &mut Graph<'_, F>, visual: Var, pooled_text: Var) -> Result<Var> {
    let vs = g.shape(visual).to_vec();
    let ps = g.shape(pooled_text).to_vec();
    if vs.len() != 3 || ps.len() != 2 || ps[0] != vs[0] || ps[1] != vs[2] {
        return Err(Error::shape(format!(
            "gate inputs {vs:?} and pooled text {ps:?} do not align"
        )));
    }
    let (b, n, d) = (vs[0], vs[1], vs[2]);
    let proj = linear(g, pooled_text, TEXT_PROJ);
    let proj = g.reshape(proj, &[b, 1, d]);
    let proj = g.expand(proj, &[b, n, d]);
    let joint = g.concat(&[visual, proj], 2);
    let h = linear(g, joint, GATE_FC1);
    let h = g.gelu(h);
    let h = linear(g, h, GATE_FC2);
    Ok(g.sigmoid(h))
}

/// `F_mod = F_I + gate * attended` and `F_fused = LN(F_mod + FFN(F_mod))`.
/// Returns `(modulated, fused)`.
pub fn fuse<F: Scalar>(
    g: &mut Graph<'_, F>,
    visual: Var,
    attended: Var,
    gate: Var,
) -> Result<(Var, Var)> {
    let vs = g.shape(visual).to_vec();
    if g.shape(attended) != vs.as_slice() || g.shape(gate) != [vs[0], vs[1], 1] {
        return Err(Error::shape(format!(
            "fuse: visual {vs:?}, attended {:?}, gate {:?}",
            g.shape(attended),
            g.shape(gate)
        )));
    }
    let scaled = g.mul(gate, attended);
    let modulated = g.add(visual, scaled);
    let h = nn::ffn(g, modulated, FFN);
    let h = g.add(modulated, h);
    Ok((modulated, layer_norm(g, h, LN)))
}

/// Affine map of every fused token into the decoder width.
pub fn adapt<F: Scalar>(g: &mut Graph<'_, F>, fused: Var) -> Result<Var> {
    let s = g.shape(fused).to_vec();
    let w = g.p(&format!("{ADAPTER}.weight"));
    if s.len() != 3 || g.shape(w)[0] != s[2] {
        return Err(Error::shape(format!("adapter input {s:?}")));
    }
    Ok(linear(g, fused, ADAPTER))
}

/// Per-item scale `mean_t |F_T[t]| / mean_n |F_I[n]|` over unmasked text tokens, `[B, 1, 1]`.
fn balance_scale<F: Scalar>(g: &mut Graph<'_, F>, visual: Var, text: Var, mask: &[Vec<u8>]) -> Var {
    let norms = |g: &mut Graph<'_, F>, x: Var| {
        let sq = g.mul(x, x);
        let s = g.sum_axis(sq, 2, true);
        g.sqrt(s)
    };
    let b = g.shape(visual)[0];
    let vn = norms(g, visual);
    let vn = g.mean_axis(vn, 1, false);
    let tn = norms(g, text);
    let tn = masked_mean(g, tn, mask);
    let scale = g.div(tn, vn);
    g.reshape(scale, &[b, 1, 1])
}

/// Full fusion path for the configured variant.
///
/// * `standard`: pool, cross-attend, gate, fuse, adapt.
/// * `token_balance`: visual tokens are first rescaled per item so their mean
///   norm matches that of the unmasked text tokens.
/// * `visual_query`: after the FFN refinement, fused tokens attend over
///   `[fused ; text]` (text padding masked) and the result is added back.
pub fn fuse_variant<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    kind: FusionVariant,
    visual: Var,
    text: Var,
    mask: &[Vec<u8>],
) -> Result<FusionOutput> {
    let (b, n) = check_tokens(g, visual, "visual tokens", cfg.embed_dim)?;
    let (_, t) = check_tokens(g, text, "text tokens", cfg.embed_dim)?;
    check_mask(mask, b, t)?;
    let visual = match kind {
        FusionVariant::TokenBalance => {
            let s = balance_scale(g, visual, text, mask);
            g.mul(visual, s)
        }
        _ => visual,
    };
    let pooled = pool_text(g, text, mask)?;
    let att = cross_attend(g, cfg, visual, text, mask)?;
    let gate = compute_gate(g, visual, pooled)?;
    let (modulated, mut fused) = fuse(g, visual, att.out, gate)?;
    if kind == FusionVariant::VisualQuery {
        if !g.has_param(&format!("{VQ_ATTN}.o.weight")) {
            return Err(Error::MissingParam(format!("{VQ_ATTN}.o.weight")));
        }
        let kv = g.concat(&[fused, text], 1);
        let mut m = ArrayD::<F>::zeros(IxDyn(&[b, 1, 1, n + t]));
        for (row, mrow) in mask.iter().enumerate() {
            for (k, &keep) in mrow.iter().enumerate() {
                if keep == 0 {
                    m[[row, 0, 0, n + k]] = F::neg_infinity();
                }
            }
        }
        let extra = attention(g, fused, kv, VQ_ATTN, cfg.attention_heads_fusion, Some(m));
        fused = g.add(fused, extra.out);
    }
    let pseudo = adapt(g, fused)?;
    Ok(FusionOutput {
        attended: att.out,
        gate,
        modulated,
        fused,
        pseudo,
        probs: att.probs,
    })
}
