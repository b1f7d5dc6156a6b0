mod common;

use bcqlm::archive::{read_archive, write_archive};
use bcqlm::autograd::Graph;
use bcqlm::config::ModelConfig;
use bcqlm::image_encoder::{
    conv_stages_forward, count_image_params, encode_image, hybrid_block_forward, hybrid_grids,
    hybrid_name, image_param_count, param_specs, pooled_image, PREFIX,
};
use bcqlm::params::ParamStore;
use bcqlm::pipeline::init_model;
use bcqlm::Error;
use common::{max_abs_diff, noisy_model, randn, randn32, rng};
use ndarray::{s, ArrayD, Axis, Ix4};

fn at_resolution(r: usize) -> ModelConfig {
    ModelConfig {
        image_resolution: r,
        ..ModelConfig::micro()
    }
}

#[test]
fn stride_two_blocks_use_ceiling_division() {
    // 224 -> 112 -> 56 -> 28, then hybrid blocks 28 -> 14 -> 7 -> 7
    assert_eq!(hybrid_grids(&at_resolution(224)), [14, 7, 7]);
    // 336 -> 168 -> 84 -> 42 -> 21 -> 11 -> 11
    assert_eq!(hybrid_grids(&at_resolution(336)), [21, 11, 11]);
}

fn block_output_side(cfg: &ModelConfig, side: usize) -> usize {
    let params = noisy_model(cfg, 1, 0.1);
    let cin = cfg.hybrid_channels[0];
    let x = randn(&mut rng(2), &[1, cin, side, side], 1.0);
    let mut g = Graph::inference(&params);
    let xv = g.constant(x);
    let (y, _) = hybrid_block_forward(&mut g, cfg, xv, 1).unwrap();
    let shape = g.shape(y);
    assert_eq!(shape[2], shape[3]);
    shape[2]
}

#[test]
fn hybrid_block_halves_grid() {
    assert_eq!(block_output_side(&at_resolution(224), 14), 7);
    assert_eq!(block_output_side(&at_resolution(336), 21), 11);
}

#[test]
fn patch_counts_at_paper_resolutions() {
    for (r, n) in [(224, 49), (336, 121)] {
        let cfg = at_resolution(r);
        let params = init_model::<f32>(&cfg);
        let images = randn32(&mut rng(3), &[2, 3, r, r], 1.0);
        let mut g = Graph::inference(&params);
        let feats = encode_image(&mut g, &cfg, &images).unwrap();
        assert_eq!(g.shape(feats.tokens), &[2, n, cfg.embed_dim]);
        assert_eq!(feats.grid.0 * feats.grid.1, n);
        assert!(g.value(feats.tokens).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_resolution_is_rejected() {
    let cfg = ModelConfig::micro();
    let params = init_model::<f32>(&cfg);
    let mut g = Graph::inference(&params);
    let images = ArrayD::<f32>::zeros(ndarray::IxDyn(&[1, 3, 32, 32]));
    assert!(matches!(
        encode_image(&mut g, &cfg, &images),
        Err(Error::Shape(_))
    ));
}

#[test]
fn zero_transformer_outputs_leave_convolutional_path() {
    let cfg = ModelConfig::micro();
    let mut params = noisy_model(&cfg, 4, 0.3);
    let block = 0;
    let p = hybrid_name(block);
    for l in 0..cfg.transformer_layers_per_block[block] {
        for t in [
            "attn.o.weight",
            "attn.o.bias",
            "ffn.fc2.weight",
            "ffn.fc2.bias",
        ] {
            params
                .get_mut(&format!("{p}.layer{l}.{t}"))
                .unwrap()
                .fill(0.0);
        }
    }
    let cin = cfg.image_channels[1];
    let side = 6;
    let stride = cfg.hybrid_strides[block];
    let x = randn(&mut rng(5), &[2, cin, side, side], 1.0);

    let mut g = Graph::inference(&params);
    let xv = g.constant(x.clone());
    let (y, _) = hybrid_block_forward(&mut g, &cfg, xv, block).unwrap();
    let y = g.value(y).clone();

    // SiLU(conv1x1_s(x) + conv1x1(reduce(SiLU(conv3x3_s(x))) + pos))
    let w = |n: &str| params.get(&format!("{p}.{n}")).unwrap().clone();
    let mut o = Graph::detached();
    let xc = o.constant(x);
    let (lw, lb) = (o.constant(w("local.weight")), o.constant(w("local.bias")));
    let local = o.conv2d(xc, lw, Some(lb), stride, 1, 1);
    let local = o.silu(local);
    let (rw, rb) = (o.constant(w("reduce.weight")), o.constant(w("reduce.bias")));
    let z = o.conv2d(local, rw, Some(rb), 1, 0, 1);
    let zs = o.shape(z).to_vec();
    let pos = w("pos").into_dimensionality::<ndarray::Ix2>().unwrap();
    let pos_map = pos
        .t()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((1, zs[1], zs[2], zs[3]))
        .unwrap()
        .into_dyn();
    let pos_map = o.constant(pos_map);
    let z = o.add(z, pos_map);
    let fx = o.constant(w("fuse_x.weight"));
    let from_x = o.conv2d(xc, fx, None, stride, 0, 1);
    let (fz, fzb) = (o.constant(w("fuse_z.weight")), o.constant(w("fuse_z.bias")));
    let from_z = o.conv2d(z, fz, Some(fzb), 1, 0, 1);
    let sum = o.add(from_x, from_z);
    let expected = o.silu(sum);
    assert!(max_abs_diff(&y, o.value(expected)) < 1e-12);
}

#[test]
fn hybrid_attention_rows_sum_to_one() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 6, 0.3);
    let images = randn(&mut rng(7), &[2, 3, 48, 48], 1.0).mapv(|v| v as f32);
    let mut g = Graph::inference(&params);
    let feats = encode_image(&mut g, &cfg, &images).unwrap();
    let layers: usize = cfg.transformer_layers_per_block.iter().sum();
    assert_eq!(feats.probs.len(), layers);
    for p in &feats.probs {
        let sums = g.value(*p).sum_axis(Axis(3));
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }
}

fn encode(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    images: &ArrayD<f32>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let mut g = Graph::inference(params);
    let feats = encode_image(&mut g, cfg, images).unwrap();
    let pooled = pooled_image(&mut g, &feats);
    (g.value(feats.tokens).clone(), g.value(pooled).clone())
}

#[test]
fn batch_permutation_equivariance_and_determinism() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 8, 0.2);
    let images = randn32(&mut rng(9), &[3, 3, 48, 48], 1.0);
    let perm = [1, 2, 0];
    let permuted = images.select(Axis(0), &perm);
    let (tokens, pooled) = encode(&params, &cfg, &images);
    let (ptokens, ppooled) = encode(&params, &cfg, &permuted);
    assert!(max_abs_diff(&tokens.select(Axis(0), &perm), &ptokens) < 1e-10);
    assert!(max_abs_diff(&pooled.select(Axis(0), &perm), &ppooled) < 1e-10);
    let (again, _) = encode(&params, &cfg, &images);
    assert_eq!(tokens, again);
}

/// Location of the strongest response (summed over channels) at the first
/// hybrid block input.
fn argmax_cell(params: &ParamStore<f64>, cfg: &ModelConfig, images: ArrayD<f64>) -> (usize, usize) {
    let mut g = Graph::inference(params);
    let x = g.constant(images);
    let h = conv_stages_forward(&mut g, cfg, x);
    let h = g.value(h).clone().into_dimensionality::<Ix4>().unwrap();
    let energy = h.slice(s![0, .., .., ..]).mapv(f64::abs).sum_axis(Axis(0));
    let mut best = (0, 0);
    for ((i, j), &v) in energy.indexed_iter() {
        if v > energy[best] {
            best = (i, j);
        }
    }
    best
}

#[test]
fn blob_shift_moves_argmax_cell() {
    let cfg = at_resolution(64);
    let mut params = noisy_model(&cfg, 10, 0.3);
    // without biases a blank image stays blank, so only the blob responds
    let names: Vec<String> = params
        .names()
        .filter(|n| n.ends_with(".bias"))
        .cloned()
        .collect();
    for n in names {
        params.get_mut(&n).unwrap().fill(0.0);
    }
    // stem and both inverted-bottleneck stages each halve the grid
    let cell = 8;
    let blob = |row: usize, col: usize| {
        let mut img = ArrayD::<f64>::zeros(ndarray::IxDyn(&[1, 3, 64, 64]));
        img.slice_mut(s![0, .., row..row + 2, col..col + 2])
            .fill(1.0);
        img
    };
    let (r0, c0) = argmax_cell(&params, &cfg, blob(24, 24));
    assert_eq!(
        argmax_cell(&params, &cfg, blob(24 + cell, 24)),
        (r0 + 1, c0)
    );
    assert_eq!(
        argmax_cell(&params, &cfg, blob(24, 24 + cell)),
        (r0, c0 + 1)
    );
}

#[test]
fn depthwise_conv_has_nine_weights_per_channel_plus_bias() {
    let cfg = ModelConfig::tiny();
    let hidden = cfg.image_stem_channels * cfg.image_expansion;
    let dw: usize = param_specs(&cfg)
        .iter()
        .filter(|s| s.name.starts_with(&format!("{PREFIX}ib0.dw")))
        .map(|s| s.numel())
        .sum();
    assert_eq!(dw, 9 * hidden + hidden);
}

#[test]
fn count_matches_saved_archive_and_tiny_budget() {
    let cfg = ModelConfig::tiny();
    let params = init_model::<f32>(&cfg);
    assert_eq!(count_image_params(&params), image_param_count(&cfg));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("image.bcqt");
    write_archive(&params.to_archive(PREFIX), &path).unwrap();
    let total: usize = read_archive(&path)
        .unwrap()
        .values()
        .map(|t| t.numel())
        .sum();
    assert_eq!(total, image_param_count(&cfg));
    assert!(image_param_count(&cfg) < 5_000_000);
}
