mod common;

use bcqlm::autograd::Graph;
use bcqlm::config::{FusionVariant, ModelConfig};
use bcqlm::params::ParamStore;
use bcqlm::qgcam::{
    adapt, compute_gate, cross_attend, fuse, fuse_variant, pool_text, ADAPTER, ATTN, FFN, GATE_FC1,
    GATE_FC2, VQ_ATTN,
};
use bcqlm::Error;
use common::{max_abs_diff, noisy_model, param_grad_error, plain_layer_norm, probe, randn, rng};
use ndarray::{array, s, Array2, ArrayD, Axis, Ix2, Ix3};

const VARIANTS: [FusionVariant; 3] = [
    FusionVariant::Standard,
    FusionVariant::TokenBalance,
    FusionVariant::VisualQuery,
];

fn cfg_for(kind: FusionVariant) -> ModelConfig {
    ModelConfig {
        fusion_variant: kind,
        ..ModelConfig::micro()
    }
}

fn weight(params: &ParamStore<f64>, name: &str) -> Array2<f64> {
    params
        .get(name)
        .unwrap()
        .clone()
        .into_dimensionality::<Ix2>()
        .unwrap()
}

fn zero(params: &mut ParamStore<f64>, names: &[&str]) {
    for n in names {
        params.get_mut(n).unwrap().fill(0.0);
    }
}

#[test]
fn pooling_is_a_masked_mean() {
    let params = ParamStore::<f64>::new();
    let mut g = Graph::inference(&params);
    let x = g.constant(array![[[1.0, 3.0], [3.0, 1.0]]].into_dyn());
    let p = pool_text(&mut g, x, &[vec![1, 1]]).unwrap();
    assert_eq!(g.value(p), &array![[2.0, 2.0]].into_dyn());

    let same = g.constant(array![[[0.5, -2.0], [0.5, -2.0], [0.5, -2.0]]].into_dyn());
    let p = pool_text(&mut g, same, &[vec![1, 1, 1]]).unwrap();
    assert_eq!(g.value(p), &array![[0.5, -2.0]].into_dyn());

    let padded = g.constant(array![[[1.0, 3.0], [3.0, 1.0], [100.0, -7.0]]].into_dyn());
    let p = pool_text(&mut g, padded, &[vec![1, 1, 0]]).unwrap();
    assert_eq!(g.value(p), &array![[2.0, 2.0]].into_dyn());

    assert!(matches!(
        pool_text(&mut g, padded, &[vec![0, 0, 0]]),
        Err(Error::Mask(_))
    ));
}

#[test]
fn single_unmasked_token_is_attended_by_every_patch() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 1, 0.3);
    let d = cfg.embed_dim;
    let visual = randn(&mut rng(2), &[1, 5, d], 1.0);
    let text = randn(&mut rng(3), &[1, 4, d], 1.0);
    let mut g = Graph::inference(&params);
    let (v, t) = (g.constant(visual), g.constant(text.clone()));
    let att = cross_attend(&mut g, &cfg, v, t, &[vec![0, 0, 1, 0]]).unwrap();

    let token = text
        .slice(s![0, 2, ..])
        .to_owned()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let vproj = token.dot(&weight(&params, &format!("{ATTN}.v.weight")));
    let bias = params
        .get(&format!("{ATTN}.o.bias"))
        .unwrap()
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let expected = vproj.dot(&weight(&params, &format!("{ATTN}.o.weight"))) + bias;
    let out = g
        .value(att.out)
        .clone()
        .into_dimensionality::<Ix3>()
        .unwrap();
    for n in 0..5 {
        let row = out.slice(s![0, n, ..]);
        assert!(row
            .iter()
            .zip(&expected)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn attention_rows_are_distributions_over_unmasked_text() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 4, 0.5);
    let d = cfg.embed_dim;
    let mask = vec![vec![1, 1, 0, 1], vec![1, 0, 0, 0]];
    let mut g = Graph::inference(&params);
    let v = g.constant(randn(&mut rng(5), &[2, 6, d], 2.0));
    let t = g.constant(randn(&mut rng(6), &[2, 4, d], 2.0));
    let att = cross_attend(&mut g, &cfg, v, t, &mask).unwrap();
    let probs = g.value(att.probs);
    assert_eq!(probs.shape(), &[2, cfg.attention_heads_fusion, 6, 4]);
    for s in probs.sum_axis(Axis(3)).iter() {
        assert!((s - 1.0).abs() < 1e-6);
    }
    for (b, m) in mask.iter().enumerate() {
        for (k, &keep) in m.iter().enumerate() {
            if keep == 0 {
                assert!(probs
                    .index_axis(Axis(0), b)
                    .index_axis(Axis(2), k)
                    .iter()
                    .all(|&p| p == 0.0));
            }
        }
    }
}

#[test]
fn uniform_keys_give_uniform_weights_whatever_the_query_scale() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 7, 0.5);
    let d = cfg.embed_dim;
    let token = randn(&mut rng(8), &[1, 1, d], 1.0);
    let text = token.broadcast((1, 4, d)).unwrap().to_owned().into_dyn();
    let visual = randn(&mut rng(9), &[1, 3, d], 1.0);
    for scale in [1.0, 10.0] {
        let mut g = Graph::inference(&params);
        let v = g.constant(visual.mapv(|x| x * scale));
        let t = g.constant(text.clone());
        let att = cross_attend(&mut g, &cfg, v, t, &[vec![1, 1, 1, 0]]).unwrap();
        for (k, &p) in g.value(att.probs).indexed_iter() {
            let expected = if k[3] == 3 { 0.0 } else { 1.0 / 3.0 };
            assert!((p - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_gate_network_gives_one_half() {
    let cfg = ModelConfig::micro();
    let mut params = noisy_model(&cfg, 10, 0.5);
    zero(
        &mut params,
        &[
            &format!("{GATE_FC1}.weight"),
            &format!("{GATE_FC1}.bias"),
            &format!("{GATE_FC2}.weight"),
            &format!("{GATE_FC2}.bias"),
        ],
    );
    let mut g = Graph::inference(&params);
    let v = g.constant(randn(&mut rng(11), &[3, 5, cfg.embed_dim], 3.0));
    let p = g.constant(randn(&mut rng(12), &[3, cfg.embed_dim], 3.0));
    let gate = compute_gate(&mut g, v, p).unwrap();
    assert_eq!(g.shape(gate), &[3, 5, 1]);
    assert!(g.value(gate).iter().all(|&x| x == 0.5));
}

#[test]
fn large_final_bias_saturates_gate() {
    let cfg = ModelConfig::micro();
    let mut params = noisy_model(&cfg, 13, 0.5);
    zero(&mut params, &[&format!("{GATE_FC2}.weight")]);
    params
        .get_mut(&format!("{GATE_FC2}.bias"))
        .unwrap()
        .fill(20.0);
    let mut g = Graph::inference(&params);
    let v = g.constant(randn(&mut rng(14), &[2, 5, cfg.embed_dim], 1.0));
    let p = g.constant(randn(&mut rng(15), &[2, cfg.embed_dim], 1.0));
    let gate = compute_gate(&mut g, v, p).unwrap();
    assert!(g.value(gate).iter().all(|&x| x > 0.999999 && x < 1.0));
}

#[test]
fn gate_depends_on_the_question() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 16, 0.5);
    let d = cfg.embed_dim;
    let one = randn(&mut rng(17), &[1, 5, d], 1.0);
    let visual = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
    let mut g = Graph::inference(&params);
    let v = g.constant(visual);
    let p = g.constant(randn(&mut rng(18), &[2, d], 1.0));
    let gate = compute_gate(&mut g, v, p).unwrap();
    let gate = g.value(gate);
    assert!(
        max_abs_diff(
            &gate.index_axis(Axis(0), 0).to_owned(),
            &gate.index_axis(Axis(0), 1).to_owned()
        ) > 1e-6
    );
}

fn fuse_with_gate(
    params: &ParamStore<f64>,
    d: usize,
    gate_value: f64,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let visual = randn(&mut rng(19), &[2, 3, d], 1.0);
    let attended = randn(&mut rng(20), &[2, 3, d], 1.0);
    let mut g = Graph::inference(params);
    let v = g.constant(visual.clone());
    let a = g.constant(attended.clone());
    let gate = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[2, 3, 1]), gate_value));
    let (m, f) = fuse(&mut g, v, a, gate).unwrap();
    (visual, attended, g.value(m).clone(), g.value(f).clone())
}

#[test]
fn closed_and_open_gates() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 21, 0.5);
    let (visual, _, modulated, _) = fuse_with_gate(&params, cfg.embed_dim, 0.0);
    assert_eq!(modulated, visual);
    let (visual, attended, modulated, _) = fuse_with_gate(&params, cfg.embed_dim, 1.0);
    assert_eq!(modulated, &visual + &attended);
}

#[test]
fn zero_ffn_output_reduces_refinement_to_layer_norm() {
    let cfg = ModelConfig::micro();
    let mut params = noisy_model(&cfg, 22, 0.5);
    zero(
        &mut params,
        &[&format!("{FFN}.fc2.weight"), &format!("{FFN}.fc2.bias")],
    );
    params.get_mut("qgcam/ln.gamma").unwrap().fill(1.0);
    params.get_mut("qgcam/ln.beta").unwrap().fill(0.0);
    let (_, _, modulated, fused) = fuse_with_gate(&params, cfg.embed_dim, 0.3);
    assert!(max_abs_diff(&fused, &plain_layer_norm(&modulated)) < 1e-12);
}

#[test]
fn adapter_identity_and_constant_maps() {
    let cfg = ModelConfig {
        decoder_dim: 8,
        ..ModelConfig::micro()
    };
    let d = cfg.embed_dim;
    let mut params = noisy_model(&cfg, 23, 0.5);
    params.insert(
        format!("{ADAPTER}.weight"),
        Array2::<f64>::eye(d).into_dyn(),
    );
    params
        .get_mut(&format!("{ADAPTER}.bias"))
        .unwrap()
        .fill(0.0);
    let fused = randn(&mut rng(24), &[2, 3, d], 1.0);
    let mut g = Graph::inference(&params);
    let f = g.constant(fused.clone());
    let p = adapt(&mut g, f).unwrap();
    assert_eq!(g.value(p), &fused);

    let b: Vec<f64> = (0..cfg.decoder_dim).map(|i| i as f64 - 2.5).collect();
    params
        .get_mut(&format!("{ADAPTER}.weight"))
        .unwrap()
        .fill(0.0);
    params.insert(
        format!("{ADAPTER}.bias"),
        ArrayD::from_shape_vec(ndarray::IxDyn(&[b.len()]), b.clone()).unwrap(),
    );
    let mut g = Graph::inference(&params);
    let f = g.constant(fused);
    let p = adapt(&mut g, f).unwrap();
    for row in g
        .value(p)
        .clone()
        .into_dimensionality::<Ix3>()
        .unwrap()
        .lanes(Axis(2))
    {
        assert_eq!(row.to_vec(), b);
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let cfg = ModelConfig::micro();
    let full = noisy_model(&cfg, 25, 0.5);
    let mut params = full.subset(ADAPTER);
    let fused = randn(&mut rng(26), &[2, 3, cfg.embed_dim], 1.0);
    let weights = randn(&mut rng(27), &[2, 3, cfg.decoder_dim], 1.0);
    let err = param_grad_error(&mut params, |g| {
        let f = g.constant(fused.clone());
        let p = adapt(g, f).unwrap();
        let y = g.sigmoid(p);
        probe(g, y, &weights)
    });
    assert!(err < 1e-4, "{err:e}");
}

fn run_variant(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    kind: FusionVariant,
    visual: &ArrayD<f64>,
    text: &ArrayD<f64>,
    mask: &[Vec<u8>],
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let mut g = Graph::inference(params);
    let v = g.constant(visual.clone());
    let t = g.constant(text.clone());
    let out = fuse_variant(&mut g, cfg, kind, v, t, mask).unwrap();
    (
        g.value(out.pseudo).clone(),
        g.value(out.attended).clone(),
        g.value(out.gate).clone(),
    )
}

#[test]
fn every_variant_emits_decoder_width_tokens() {
    let d = ModelConfig::micro().embed_dim;
    let visual = randn(&mut rng(28), &[2, 5, d], 1.0);
    let text = randn(&mut rng(29), &[2, 4, d], 1.0);
    let mask = vec![vec![1, 1, 1, 0], vec![1; 4]];
    for kind in VARIANTS {
        let cfg = cfg_for(kind);
        let params = noisy_model(&cfg, 30, 0.3);
        let (pseudo, _, _) = run_variant(&params, &cfg, kind, &visual, &text, &mask);
        assert_eq!(pseudo.shape(), &[2, 5, cfg.decoder_dim]);
        assert!(pseudo.iter().all(|v| v.is_finite()));
    }
    assert!(matches!(
        "mystery".parse::<FusionVariant>(),
        Err(Error::Variant(_))
    ));
}

#[test]
fn token_balance_with_matched_norms_equals_standard() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 31, 0.3);
    let d = cfg.embed_dim;
    // every visual and unmasked text token has norm 2
    let unit = |seed, n| {
        let mut a = randn(&mut rng(seed), &[1, n, d], 1.0);
        for mut row in a.lanes_mut(Axis(2)) {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| 2.0 * v / norm);
        }
        a
    };
    let visual = unit(32, 5);
    let mut text = unit(33, 4);
    text.slice_mut(s![0, 3, ..]).fill(9.0);
    let mask = vec![vec![1, 1, 1, 0]];
    let (standard, _, _) = run_variant(
        &params,
        &cfg,
        FusionVariant::Standard,
        &visual,
        &text,
        &mask,
    );
    let (balanced, _, _) = run_variant(
        &params,
        &cfg,
        FusionVariant::TokenBalance,
        &visual,
        &text,
        &mask,
    );
    assert!(max_abs_diff(&standard, &balanced) < 1e-6);
}

#[test]
fn visual_query_with_zero_output_projection_equals_standard() {
    let cfg = cfg_for(FusionVariant::VisualQuery);
    let mut params = noisy_model(&cfg, 34, 0.3);
    zero(
        &mut params,
        &[&format!("{VQ_ATTN}.o.weight"), &format!("{VQ_ATTN}.o.bias")],
    );
    let d = cfg.embed_dim;
    let visual = randn(&mut rng(35), &[2, 5, d], 1.0);
    let text = randn(&mut rng(36), &[2, 4, d], 1.0);
    let mask = vec![vec![1, 1, 0, 0], vec![1; 4]];
    let (standard, _, _) = run_variant(
        &params,
        &cfg,
        FusionVariant::Standard,
        &visual,
        &text,
        &mask,
    );
    let (vq, _, _) = run_variant(
        &params,
        &cfg,
        FusionVariant::VisualQuery,
        &visual,
        &text,
        &mask,
    );
    assert_eq!(standard, vq);
}

#[test]
fn visual_query_needs_its_attention_weights() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 37, 0.3);
    let d = cfg.embed_dim;
    let mut g = Graph::inference(&params);
    let v = g.constant(randn(&mut rng(38), &[1, 2, d], 1.0));
    let t = g.constant(randn(&mut rng(39), &[1, 2, d], 1.0));
    let out = fuse_variant(
        &mut g,
        &cfg,
        FusionVariant::VisualQuery,
        v,
        t,
        &[vec![1, 1]],
    );
    assert!(matches!(out, Err(Error::MissingParam(_))));
}

#[test]
fn extra_masked_text_changes_nothing() {
    let d = ModelConfig::micro().embed_dim;
    let visual = randn(&mut rng(40), &[2, 5, d], 1.0);
    let text = randn(&mut rng(41), &[2, 3, d], 1.0);
    let junk = randn(&mut rng(42), &[2, 2, d], 5.0);
    let longer = ndarray::concatenate(Axis(1), &[text.view(), junk.view()]).unwrap();
    for kind in VARIANTS {
        let cfg = cfg_for(kind);
        let params = noisy_model(&cfg, 43, 0.3);
        let (p0, a0, g0) = run_variant(
            &params,
            &cfg,
            kind,
            &visual,
            &text,
            &[vec![1, 1, 1], vec![1, 1, 0]],
        );
        let mask = [vec![1, 1, 1, 0, 0], vec![1, 1, 0, 0, 0]];
        let (p1, a1, g1) = run_variant(&params, &cfg, kind, &visual, &longer, &mask);
        assert!(max_abs_diff(&a0, &a1) < 1e-6);
        assert!(max_abs_diff(&g0, &g1) < 1e-6);
        assert!(max_abs_diff(&p0, &p1) < 1e-6, "{kind:?}");
    }
}

#[test]
fn patch_permutation_permutes_pseudo_tokens() {
    let d = ModelConfig::micro().embed_dim;
    let visual = randn(&mut rng(44), &[2, 5, d], 1.0);
    let text = randn(&mut rng(45), &[2, 4, d], 1.0);
    let mask = vec![vec![1, 1, 1, 0], vec![1, 0, 1, 1]];
    let perm = [4, 2, 0, 3, 1];
    let permuted = visual.select(Axis(1), &perm);
    for kind in VARIANTS {
        let cfg = cfg_for(kind);
        let params = noisy_model(&cfg, 46, 0.3);
        let (p, _, _) = run_variant(&params, &cfg, kind, &visual, &text, &mask);
        let (pp, _, _) = run_variant(&params, &cfg, kind, &permuted, &text, &mask);
        assert!(
            max_abs_diff(&p.select(Axis(1), &perm), &pp) < 1e-10,
            "{kind:?}"
        );
    }
}

#[test]
fn mismatched_widths_are_rejected() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 47, 0.3);
    let mut g = Graph::inference(&params);
    let v = g.constant(randn(&mut rng(48), &[1, 2, cfg.embed_dim + 1], 1.0));
    let t = g.constant(randn(&mut rng(49), &[1, 2, cfg.embed_dim], 1.0));
    assert!(matches!(
        cross_attend(&mut g, &cfg, v, t, &[vec![1, 1]]),
        Err(Error::Shape(_))
    ));
}
