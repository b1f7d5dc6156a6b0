//! Hybrid convolution/transformer image encoder.
//!
//! Conv stem (stride 2), inverted-bottleneck stages (stride 2 each), then three
//! hybrid blocks carrying 2, 4 and 3 transformer layers, and a final 1x1 conv
//! to the shared width `d`. Spatial sizes use ceiling division, so 224 input
//! ends on a 7x7 grid and 336 input on 11x11.

use ndarray::ArrayD;

use crate::autograd::{conv_out_len, Graph, Scalar, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, conv, linear, transformer_layer};
use crate::params::{count_specs, InitKind, ParamSpec, ParamStore};

pub const PREFIX: &str = "image_encoder/";

fn name(rest: &str) -> String {
    format!("{PREFIX}{rest}")
}

pub fn hybrid_name(j: usize) -> String {
    name(&format!("hybrid{j}"))
}

/// Channel widths entering each hybrid block and the side of each block's grid.
struct Layout {
    hybrid_in: [usize; 3],
    /// Grid side before each hybrid block, then after each.
    sides: [usize; 4],
}

fn layout(cfg: &ModelConfig) -> Layout {
    let mut side = conv_out_len(cfg.image_resolution, 3, 2, 1);
    for _ in &cfg.image_channels {
        side = conv_out_len(side, 3, 2, 1);
    }
    let mut sides = [side; 4];
    for j in 0..3 {
        side = conv_out_len(side, 3, cfg.hybrid_strides[j], 1);
        sides[j + 1] = side;
    }
    let last_stage = *cfg.image_channels.last().expect("validated non-empty");
    Layout {
        hybrid_in: [last_stage, cfg.hybrid_channels[0], cfg.hybrid_channels[1]],
        sides,
    }
}

/// Grid side at the output of each hybrid block.
pub fn hybrid_grids(cfg: &ModelConfig) -> [usize; 3] {
    let s = layout(cfg).sides;
    [s[1], s[2], s[3]]
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    nn::conv_spec(&mut out, &name("stem"), 3, cfg.image_stem_channels, 3, true);
    let mut cin = cfg.image_stem_channels;
    for (i, &cout) in cfg.image_channels.iter().enumerate() {
        let hidden = cin * cfg.image_expansion;
        let p = name(&format!("ib{i}"));
        nn::conv_spec(&mut out, &format!("{p}.expand"), cin, hidden, 1, true);
        nn::conv_spec(&mut out, &format!("{p}.dw"), 1, hidden, 3, true);
        nn::conv_spec(&mut out, &format!("{p}.project"), hidden, cout, 1, true);
        cin = cout;
    }
    let lay = layout(cfg);
    for j in 0..3 {
        let p = hybrid_name(j);
        let (cin, cout, dim) = (lay.hybrid_in[j], cfg.hybrid_channels[j], cfg.hybrid_dims[j]);
        let side = lay.sides[j + 1];
        nn::conv_spec(&mut out, &format!("{p}.local"), cin, cout, 3, true);
        nn::conv_spec(&mut out, &format!("{p}.reduce"), cout, dim, 1, true);
        out.push(ParamSpec::new(
            format!("{p}.pos"),
            &[side * side, dim],
            InitKind::Normal(nn::EMBED_STD),
        ));
        for l in 0..cfg.transformer_layers_per_block[j] {
            nn::transformer_layer_spec(
                &mut out,
                &format!("{p}.layer{l}"),
                dim,
                dim * cfg.image_ffn_mult,
            );
        }
        nn::conv_spec(&mut out, &format!("{p}.fuse_x"), cin, cout, 1, false);
        nn::conv_spec(&mut out, &format!("{p}.fuse_z"), dim, cout, 1, true);
    }
    nn::conv_spec(
        &mut out,
        &name("head"),
        cfg.hybrid_channels[2],
        cfg.embed_dim,
        1,
        true,
    );
    nn::linear_spec(
        &mut out,
        &name("pool_proj"),
        cfg.embed_dim,
        cfg.embed_dim,
        true,
    );
    out
}

pub fn image_param_count(cfg: &ModelConfig) -> usize {
    count_specs(&param_specs(cfg))
}

pub fn count_image_params<F: Scalar>(params: &ParamStore<F>) -> usize {
    params.num_scalars(PREFIX)
}

/// Output of [`encode_image`].
pub struct PatchFeatures {
    /// `[batch, N, d]` patch tokens.
    pub tokens: Var,
    /// `(h, w)` with `N = h * w`.
    pub grid: (usize, usize),
    /// Attention probabilities of every hybrid transformer layer.
    pub probs: Vec<Var>,
}

pub fn images_to_graph<F: Scalar>(g: &mut Graph<'_, F>, images: &ArrayD<f32>) -> Var {
    g.constant(images.mapv(|v| F::c(v as f64)))
}

/// Stem: 3x3 stride-2 conv and SiLU.
pub fn stem_forward<F: Scalar>(g: &mut Graph<'_, F>, x: Var) -> Var {
    let y = conv(g, x, &name("stem"), 2, 1);
    g.silu(y)
}

/// Inverted bottleneck: 1x1 expand + SiLU, depthwise 3x3 (stride 2) + SiLU,
/// linear 1x1 projection.
pub fn inverted_bottleneck_forward<F: Scalar>(g: &mut Graph<'_, F>, x: Var, block: &str) -> Var {
    let h = conv(g, x, &format!("{block}.expand"), 1, 1);
    let h = g.silu(h);
    let channels = g.shape(h)[1];
    let h = conv(g, h, &format!("{block}.dw"), 2, channels);
    let h = g.silu(h);
    conv(g, h, &format!("{block}.project"), 1, 1)
}

/// Stem and inverted-bottleneck stages: the input of the first hybrid block.
pub fn conv_stages_forward<F: Scalar>(g: &mut Graph<'_, F>, cfg: &ModelConfig, x: Var) -> Var {
    let mut h = stem_forward(g, x);
    for i in 0..cfg.image_channels.len() {
        h = inverted_bottleneck_forward(g, h, &name(&format!("ib{i}")));
    }
    h
}

/// One hybrid block on `[batch, c, h, w]`.
///
/// `L = SiLU(conv3x3_s(x))`, `Z = conv1x1(L)` flattened to tokens plus learned
/// positions, transformer layers, reshaped back, then
/// `SiLU(conv1x1_s(x) + conv1x1(Z'))` fuses the result with the block input.
/// Returns the output map and the attention probabilities.
pub fn hybrid_block_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    x: Var,
    block: usize,
) -> Result<(Var, Vec<Var>)> {
    let p = hybrid_name(block);
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::shape(format!("hybrid block input {shape:?}")));
    }
    let stride = cfg.hybrid_strides[block];
    let local = conv(g, x, &format!("{p}.local"), stride, 1);
    let local = g.silu(local);
    let z = conv(g, local, &format!("{p}.reduce"), 1, 1);
    let zs = g.shape(z).to_vec();
    let (batch, dim, h, w) = (zs[0], zs[1], zs[2], zs[3]);
    let pos = g.p(&format!("{p}.pos"));
    if g.shape(pos)[0] != h * w {
        return Err(Error::shape(format!(
            "hybrid block {block} has {} positions, got a {h}x{w} grid",
            g.shape(pos)[0]
        )));
    }
    let tokens = g.reshape(z, &[batch, dim, h * w]);
    let tokens = g.permute(tokens, &[0, 2, 1]);
    let mut tokens = g.add(tokens, pos);
    let mut probs = Vec::new();
    for l in 0..cfg.transformer_layers_per_block[block] {
        let (t, pr) = transformer_layer(g, tokens, &format!("{p}.layer{l}"), cfg.image_heads, None);
        tokens = t;
        probs.push(pr);
    }
    let z = g.permute(tokens, &[0, 2, 1]);
    let z = g.reshape(z, &[batch, dim, h, w]);
    let from_x = conv(g, x, &format!("{p}.fuse_x"), stride, 1);
    let from_z = conv(g, z, &format!("{p}.fuse_z"), 1, 1);
    let y = g.add(from_x, from_z);
    Ok((g.silu(y), probs))
}

/// Encodes `[batch, 3, R, R]` images into `[batch, N, d]` patch tokens.
pub fn encode_image<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    images: &ArrayD<f32>,
) -> Result<PatchFeatures> {
    let s = images.shape();
    let r = cfg.image_resolution;
    if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r || s[0] == 0 {
        return Err(Error::shape(format!(
            "images must be [batch, 3, {r}, {r}], got {s:?}"
        )));
    }
    let x = images_to_graph(g, images);
    let mut h = conv_stages_forward(g, cfg, x);
    let mut probs = Vec::new();
    for j in 0..3 {
        let (y, p) = hybrid_block_forward(g, cfg, h, j)?;
        h = y;
        probs.extend(p);
    }
    let h = conv(g, h, &name("head"), 1, 1);
    let hs = g.shape(h).to_vec();
    let (batch, d, gh, gw) = (hs[0], hs[1], hs[2], hs[3]);
    let t = g.reshape(h, &[batch, d, gh * gw]);
    let tokens = g.permute(t, &[0, 2, 1]);
    Ok(PatchFeatures {
        tokens,
        grid: (gh, gw),
        probs,
    })
}

/// Contrastive embedding `I_s` (before normalisation): mean over patches, then
/// a linear projection. `[batch, d]`.
pub fn pooled_image<F: Scalar>(g: &mut Graph<'_, F>, feats: &PatchFeatures) -> Var {
    let m = g.mean_axis(feats.tokens, 1, false);
    linear(g, m, &name("pool_proj"))
}
