use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out_len, Graph};
use crate::config::{FusionVariant, ModelConfig};
use crate::data::{BOS, EOS, PAD, SEP};
use crate::decoder::{assemble_sequence, decode_forward};
use crate::error::Result;
use crate::image_encoder::{encode_image, hybrid_grids};
use crate::params::ParamStore;
use crate::qgcam::fuse_variant;
use crate::text_encoder::encode_text;

use super::metrics::Efficiency;

/// `rows` tokens through an affine map `fan_in -> fan_out`.
pub fn linear_flops(rows: usize, fan_in: usize, fan_out: usize, bias: bool) -> u64 {
    (2 * rows * fan_in * fan_out + if bias { rows * fan_out } else { 0 }) as u64
}

/// Convolution over a `[1, cin, h, w]` map; `groups == cin` is depthwise.
#[allow(clippy::too_many_arguments)]
pub fn conv_flops(
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    groups: usize,
    bias: bool,
) -> u64 {
    let pad = k / 2;
    let out = conv_out_len(h, k, stride, pad) * conv_out_len(w, k, stride, pad);
    (2 * cout * out * (cin / groups) * k * k + if bias { cout * out } else { 0 }) as u64
}

/// Multi-head attention of `nq` queries over `nk` keys at width `dim`: four
/// projections plus the score and context products (`2·nq·nk·dim` each).
pub fn attention_flops(nq: usize, nk: usize, dim: usize, qkv_bias: bool) -> u64 {
    linear_flops(nq, dim, dim, qkv_bias)
        + 2 * linear_flops(nk, dim, dim, qkv_bias)
        + (4 * nq * nk * dim) as u64
        + linear_flops(nq, dim, dim, true)
}

fn transformer_layer_flops(n: usize, dim: usize, ffn: usize) -> u64 {
    attention_flops(n, n, dim, true)
        + linear_flops(n, dim, ffn, true)
        + linear_flops(n, ffn, dim, true)
}

/// Forward FLOPs of one sample (batch 1) on the VQA path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub image_encoder: u64,
    pub text_encoder: u64,
    pub qgcam: u64,
    pub decoder: u64,
    pub total: u64,
}

fn image_encoder_flops(cfg: &ModelConfig) -> u64 {
    let mut side = cfg.image_resolution;
    let mut f = conv_flops(3, cfg.image_stem_channels, side, side, 3, 2, 1, true);
    side = conv_out_len(side, 3, 2, 1);
    let mut cin = cfg.image_stem_channels;
    for &cout in &cfg.image_channels {
        let hidden = cin * cfg.image_expansion;
        f += conv_flops(cin, hidden, side, side, 1, 1, 1, true);
        f += conv_flops(hidden, hidden, side, side, 3, 2, hidden, true);
        side = conv_out_len(side, 3, 2, 1);
        f += conv_flops(hidden, cout, side, side, 1, 1, 1, true);
        cin = cout;
    }
    let grids = hybrid_grids(cfg);
    for j in 0..3 {
        let (cout, dim, stride) = (
            cfg.hybrid_channels[j],
            cfg.hybrid_dims[j],
            cfg.hybrid_strides[j],
        );
        let out = grids[j];
        f += conv_flops(cin, cout, side, side, 3, stride, 1, true);
        f += conv_flops(cout, dim, out, out, 1, 1, 1, true);
        for _ in 0..cfg.transformer_layers_per_block[j] {
            f += transformer_layer_flops(out * out, dim, dim * cfg.image_ffn_mult);
        }
        f += conv_flops(cin, cout, side, side, 1, stride, 1, false);
        f += conv_flops(dim, cout, out, out, 1, 1, 1, true);
        side = out;
        cin = cout;
    }
    f + conv_flops(cin, cfg.embed_dim, side, side, 1, 1, 1, true)
}

fn text_encoder_flops(cfg: &ModelConfig) -> u64 {
    let (t, h, b) = (cfg.text_max_len, cfg.text_hidden, cfg.text_bottleneck);
    let mut f = linear_flops(t, cfg.text_embed_factor, h, false);
    for _ in 0..cfg.text_layers {
        f += linear_flops(t, h, b, true);
        f += attention_flops(t, t, b, true);
        f +=
            linear_flops(t, b, cfg.text_ffn_dim, true) + linear_flops(t, cfg.text_ffn_dim, b, true);
        f += linear_flops(t, b, h, true);
    }
    f + linear_flops(t, h, cfg.embed_dim, true)
}

fn qgcam_flops(cfg: &ModelConfig) -> u64 {
    let (n, t, d) = (cfg.num_patches(), cfg.text_max_len, cfg.embed_dim);
    let hidden = cfg.fusion_ffn_mult * d;
    let mut f = attention_flops(n, t, d, false)
        + linear_flops(1, d, d, true)
        + linear_flops(n, 2 * d, cfg.gate_hidden, true)
        + linear_flops(n, cfg.gate_hidden, 1, true)
        + linear_flops(n, d, hidden, true)
        + linear_flops(n, hidden, d, true)
        + linear_flops(n, d, cfg.decoder_dim, true);
    if cfg.fusion_variant == FusionVariant::VisualQuery {
        f += attention_flops(n, n + t, d, false);
    }
    f
}

fn decoder_flops(cfg: &ModelConfig) -> u64 {
    let l = cfg.decoder_max_len();
    let dd = cfg.decoder_dim;
    (0..cfg.decoder_layers)
        .map(|_| transformer_layer_flops(l, dd, cfg.decoder_ffn_dim))
        .sum::<u64>()
        + linear_flops(l, dd, cfg.vocab_size, true)
}

/// Closed-form per-sample FLOPs of image encoder, text encoder (full
/// `text_max_len` window), fusion and decoder over `N + text_max_len` positions.
pub fn flops_report(cfg: &ModelConfig) -> FlopsReport {
    let image_encoder = image_encoder_flops(cfg);
    let text_encoder = text_encoder_flops(cfg);
    let qgcam = qgcam_flops(cfg);
    let decoder = decoder_flops(cfg);
    FlopsReport {
        image_encoder,
        text_encoder,
        qgcam,
        decoder,
        total: image_encoder + text_encoder + qgcam + decoder,
    }
}

/// The same breakdown read off the graph's operation counter during one real
/// forward pass at batch 1.
pub fn instrumented_flops(cfg: &ModelConfig, params: &ParamStore<f32>) -> Result<FlopsReport> {
    Ok(probe_forward(cfg, params)?.0)
}

/// Closed-form FLOPs, median wall-clock latency over `runs` batch-1 forward
/// passes (after one warm-up), and the activation memory of one pass.
pub fn measure_efficiency(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    runs: usize,
) -> Result<Efficiency> {
    let (_, peak) = probe_forward(cfg, params)?;
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        probe_forward(cfg, params)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let latency = if times.len() % 2 == 0 {
        0.5 * (times[mid - 1] + times[mid])
    } else {
        times[mid]
    };
    Ok(Efficiency {
        flops_per_sample: flops_report(cfg).total,
        latency_ms_per_sample: latency,
        peak_activation_bytes: peak,
    })
}

/// Full VQA forward on a blank image and a two-token question; returns the
/// per-module operation counts and the bytes held by the tape.
fn probe_forward(cfg: &ModelConfig, params: &ParamStore<f32>) -> Result<(FlopsReport, usize)> {
    let t = cfg.text_max_len;
    let r = cfg.image_resolution;
    let images = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[1, 3, r, r]));
    let mut question = vec![PAD; t];
    question[0] = BOS;
    question[1] = EOS;
    let mut mask = vec![0u8; t];
    mask[..2].fill(1);
    let mut dialog = vec![PAD; t];
    dialog[0] = BOS;
    dialog[1] = SEP;

    let mut g = Graph::inference(params);
    let visual = encode_image(&mut g, cfg, &images)?;
    let image_encoder = g.flops();
    let text = encode_text(&mut g, cfg, &[question], std::slice::from_ref(&mask))?;
    let text_encoder = g.flops() - image_encoder;
    let before = g.flops();
    let fusion = fuse_variant(
        &mut g,
        cfg,
        cfg.fusion_variant,
        visual.tokens,
        text.tokens,
        &[mask],
    )?;
    let qgcam = g.flops() - before;
    let before = g.flops();
    let seq = assemble_sequence(&mut g, cfg, fusion.pseudo, &[dialog])?;
    decode_forward(&mut g, cfg, seq)?;
    let decoder = g.flops() - before;
    let report = FlopsReport {
        image_encoder,
        text_encoder,
        qgcam,
        decoder,
        total: g.flops(),
    };
    Ok((report, g.activation_bytes()))
}
