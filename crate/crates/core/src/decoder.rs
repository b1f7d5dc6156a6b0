//! Miniature causal transformer decoder.
//!
//! The decoder sequence is `N` pseudo tokens from the fusion module followed
//! by the embedded dialog window `BOS question SEP answer EOS PAD..`. Only
//! positions whose next token belongs to the response are supervised.

use ndarray::{Array3, ArrayD, Axis};

use crate::autograd::{causal_mask, Graph, Scalar, Var};
use crate::config::ModelConfig;
use crate::data::{build_dialog, detokenize, tokenize, Dialog, Vocab, EOS};
use crate::error::{Error, Result};
use crate::image_encoder::encode_image;
use crate::nn::{self, layer_norm, linear, transformer_layer};
use crate::params::{count_specs, InitKind, ParamSpec, ParamStore};
use crate::qgcam::fuse_variant;
use crate::text_encoder::encode_sequences;

pub const PREFIX: &str = "decoder/";
pub const TOKEN_EMBED: &str = "decoder/tok_emb";
pub const POS_EMBED: &str = "decoder/pos_emb";
pub const FINAL_LN: &str = "decoder/ln_f";
pub const HEAD: &str = "decoder/head";

pub fn layer_name(l: usize) -> String {
    format!("{PREFIX}layer{l}")
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let dd = cfg.decoder_dim;
    let mut out = vec![
        ParamSpec::new(
            TOKEN_EMBED,
            &[cfg.vocab_size, dd],
            InitKind::Normal(nn::EMBED_STD),
        ),
        ParamSpec::new(
            POS_EMBED,
            &[cfg.decoder_max_len(), dd],
            InitKind::Normal(nn::EMBED_STD),
        ),
    ];
    for l in 0..cfg.decoder_layers {
        nn::transformer_layer_spec(&mut out, &layer_name(l), dd, cfg.decoder_ffn_dim);
    }
    nn::layer_norm_spec(&mut out, FINAL_LN, dd);
    nn::linear_spec(&mut out, HEAD, dd, cfg.vocab_size, true);
    out
}

pub fn decoder_param_count(cfg: &ModelConfig) -> usize {
    count_specs(&param_specs(cfg))
}

/// Decoder tensors in unfreezing order: output head, final norm, then layers
/// from the top down (within a layer from the FFN output back to the first
/// norm), embeddings last.
pub fn unfreeze_order(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let specs = param_specs(cfg);
    let find = |name: &str| -> ParamSpec {
        specs
            .iter()
            .find(|s| s.name == name)
            .cloned()
            .unwrap_or_else(|| panic!("decoder tensor `{name}` missing from specs"))
    };
    let mut names = vec![
        format!("{HEAD}.bias"),
        format!("{HEAD}.weight"),
        format!("{FINAL_LN}.beta"),
        format!("{FINAL_LN}.gamma"),
    ];
    for l in (0..cfg.decoder_layers).rev() {
        let p = layer_name(l);
        for part in [
            "ffn.fc2.bias",
            "ffn.fc2.weight",
            "ffn.fc1.bias",
            "ffn.fc1.weight",
            "ln2.beta",
            "ln2.gamma",
            "attn.o.bias",
            "attn.o.weight",
            "attn.v.bias",
            "attn.v.weight",
            "attn.k.bias",
            "attn.k.weight",
            "attn.q.bias",
            "attn.q.weight",
            "ln1.beta",
            "ln1.gamma",
        ] {
            names.push(format!("{p}.{part}"));
        }
    }
    names.push(POS_EMBED.to_string());
    names.push(TOKEN_EMBED.to_string());
    let order: Vec<ParamSpec> = names.iter().map(|n| find(n)).collect();
    debug_assert_eq!(order.len(), specs.len());
    order
}

/// Trainable decoder tensors for `ratio`, and the fraction of decoder scalars they hold.
///
/// Tensors are taken in [`unfreeze_order`] until their scalar count first
/// reaches `ratio * total`.
pub fn unfreeze_plan(cfg: &ModelConfig, ratio: f64) -> Result<(Vec<String>, f64)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Value(format!(
            "unfreeze ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let order = unfreeze_order(cfg);
    let total = count_specs(&order);
    let target = ratio * total as f64;
    let mut chosen = Vec::new();
    let mut count = 0usize;
    for s in &order {
        if count as f64 >= target {
            break;
        }
        count += s.numel();
        chosen.push(s.name.clone());
    }
    Ok((chosen, count as f64 / total as f64))
}

/// Marks decoder tensors trainable per [`unfreeze_plan`] and freezes the rest.
/// Returns the achieved trainable fraction.
pub fn set_unfreeze_ratio<F: Scalar>(
    params: &mut ParamStore<F>,
    cfg: &ModelConfig,
    ratio: f64,
) -> Result<f64> {
    let (chosen, fraction) = unfreeze_plan(cfg, ratio)?;
    params.set_prefix_trainable(PREFIX, false);
    for name in &chosen {
        if !params.contains(name) {
            return Err(Error::MissingParam(name.clone()));
        }
        params.set_trainable(name, true);
    }
    Ok(fraction)
}

/// Assembled decoder input.
pub struct DecoderInput {
    /// `[B, N + T, d_dec]`.
    pub sequence: Var,
    /// Next-token label of every position, flattened over `(batch, position)`.
    pub labels: Vec<Option<usize>>,
    /// Supervision mask per item over the assembled sequence.
    pub loss_mask: Vec<Vec<bool>>,
    pub num_visual: usize,
    pub len: usize,
}

impl DecoderInput {
    pub fn supervised_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Pseudo tokens followed by embedded ids, plus learned positions.
pub fn assemble_sequence<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    pseudo: Var,
    ids: &[Vec<usize>],
) -> Result<Var> {
    let ps = g.shape(pseudo).to_vec();
    if ps.len() != 3 || ps[2] != cfg.decoder_dim {
        return Err(Error::shape(format!(
            "pseudo tokens must be [batch, N, {}], got {ps:?}",
            cfg.decoder_dim
        )));
    }
    let (batch, n) = (ps[0], ps[1]);
    let t = ids.first().map_or(0, Vec::len);
    if ids.len() != batch || ids.iter().any(|r| r.len() != t) {
        return Err(Error::shape("dialog ids must be a [batch, T] rectangle"));
    }
    let len = n + t;
    if len > cfg.decoder_max_len() {
        return Err(Error::shape(format!(
            "decoder sequence of {len} exceeds the {} learned positions",
            cfg.decoder_max_len()
        )));
    }
    let flat: Vec<usize> = ids.iter().flatten().copied().collect();
    if let Some(&bad) = flat.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} outside the vocabulary"
        )));
    }
    let seq = if t > 0 {
        let table = g.p(TOKEN_EMBED);
        let e = g.gather_rows(table, &flat);
        let e = g.reshape(e, &[batch, t, cfg.decoder_dim]);
        g.concat(&[pseudo, e], 1)
    } else {
        pseudo
    };
    let pos = g.p(POS_EMBED);
    let pos = g.narrow(pos, 0, 0, len);
    Ok(g.add(seq, pos))
}

/// Concatenates pseudo tokens with the embedded dialogs and aligns labels:
/// `labels[p]` is the token at `p + 1` when that token is part of the response.
pub fn assemble_input<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    pseudo: Var,
    dialogs: &[Dialog],
) -> Result<DecoderInput> {
    if let Some(d) = dialogs.iter().find(|d| d.response.is_empty()) {
        return Err(Error::EmptyResponse(format!(
            "dialog of {} tokens has no response tokens",
            d.ids.len()
        )));
    }
    let ids: Vec<Vec<usize>> = dialogs.iter().map(|d| d.ids.clone()).collect();
    let sequence = assemble_sequence(g, cfg, pseudo, &ids)?;
    let n = g.shape(pseudo)[1];
    let t = ids.first().map_or(0, Vec::len);
    let len = n + t;
    let mut labels = Vec::with_capacity(dialogs.len() * len);
    let mut loss_mask = Vec::with_capacity(dialogs.len());
    for d in dialogs {
        let mut mask = vec![false; n];
        labels.extend(std::iter::repeat_n(None, n));
        for (p, sup) in d.supervised_positions().into_iter().enumerate() {
            mask.push(sup);
            labels.push(sup.then(|| d.ids[p + 1]));
        }
        loss_mask.push(mask);
    }
    Ok(DecoderInput {
        sequence,
        labels,
        loss_mask,
        num_visual: n,
        len,
    })
}

/// Pre-norm causal transformer over `[B, L, d_dec]`; returns logits `[B, L, V]`.
pub fn decode_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    sequence: Var,
) -> Result<Var> {
    let s = g.shape(sequence).to_vec();
    if s.len() != 3 || s[2] != cfg.decoder_dim || s[1] == 0 {
        return Err(Error::shape(format!("decoder input {s:?}")));
    }
    let mut x = sequence;
    for l in 0..cfg.decoder_layers {
        let (y, _) = transformer_layer(
            g,
            x,
            &layer_name(l),
            cfg.decoder_heads,
            Some(causal_mask(s[1])),
        );
        x = y;
    }
    let x = layer_norm(g, x, FINAL_LN);
    Ok(linear(g, x, HEAD))
}

/// Mean cross-entropy over supervised positions.
pub fn generation_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    logits: Var,
    input: &DecoderInput,
) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[0] * s[1] != input.labels.len() {
        return Err(Error::shape(format!(
            "logits {s:?} do not match {} labels",
            input.labels.len()
        )));
    }
    if input.supervised_count() == 0 {
        return Err(Error::EmptyResponse("no supervised positions".into()));
    }
    let flat = g.reshape(logits, &[s[0] * s[1], s[2]]);
    Ok(g.cross_entropy(flat, &input.labels))
}

fn argmax<F: Scalar>(row: ndarray::ArrayViewD<'_, F>) -> usize {
    let mut best = (0, F::neg_infinity());
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Greedy continuation of `prompt` after the pseudo tokens `[1, N, d_dec]`.
/// Stops at `EOS`, after `max_new_tokens`, or when the text window is full.
/// The returned ids exclude the prompt and the closing `EOS`.
pub fn greedy_decode<F: Scalar>(
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    pseudo: &ArrayD<F>,
    prompt: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new_tokens && ids.len() < cfg.text_max_len {
        let mut g = Graph::inference(params);
        let p = g.constant(pseudo.clone());
        let seq = assemble_sequence(&mut g, cfg, p, std::slice::from_ref(&ids))?;
        let logits = decode_forward(&mut g, cfg, seq)?;
        let last = g.shape(logits)[1] - 1;
        let next = argmax(
            g.value(logits)
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), last),
        );
        if next == EOS {
            break;
        }
        ids.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Answers `question` about one preprocessed image (`3 x R x R`) end to end:
/// image encoder, text encoder, fusion, then greedy decoding.
pub fn greedy_generate<F: Scalar>(
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    image: &Array3<f32>,
    question: &str,
    max_new_tokens: usize,
) -> Result<String> {
    if max_new_tokens == 0 {
        return Ok(String::new());
    }
    let images = image.clone().insert_axis(Axis(0)).into_dyn();
    let q = tokenize(question, vocab, cfg.text_max_len)?;
    let mut g = Graph::inference(params);
    let visual = encode_image(&mut g, cfg, &images)?;
    let text = encode_sequences(&mut g, cfg, std::slice::from_ref(&q))?;
    let fusion = fuse_variant(
        &mut g,
        cfg,
        cfg.fusion_variant,
        visual.tokens,
        text.tokens,
        &text.mask,
    )?;
    let pseudo = g.value(fusion.pseudo).clone();
    let prompt = build_dialog(question, None, vocab, cfg.text_max_len)?;
    let ids = greedy_decode(params, cfg, &pseudo, &prompt.ids, max_new_tokens)?;
    Ok(detokenize(&ids, vocab))
}
