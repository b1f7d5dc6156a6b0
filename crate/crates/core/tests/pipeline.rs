mod common;

use bcqlm::alignment::Teacher;
use bcqlm::config::ModelConfig;
use bcqlm::data::{SynthItem, Vocab};
use bcqlm::params::ParamStore;
use bcqlm::pipeline::{
    cache_features, cosine_metrics, evaluate_vqa, finite_diff_check, flops_report, init_model,
    instrumented_flops, pca3, pretrain_stage1, step_lr, train_stage2, vqa_accuracy, Component,
    GradCheckOptions, RunOptions,
};
use bcqlm::{decoder, image_encoder, text_encoder, Error};
use common::{randn, rng, synth};
use ndarray::{s, Array2, Axis, Ix2};

/// Micro model with a text window and vocabulary wide enough for the synthetic questions.
fn small() -> ModelConfig {
    let mut cfg = ModelConfig {
        text_max_len: 16,
        vocab_size: 48,
        ..ModelConfig::micro()
    };
    cfg.stage1.epochs = 2;
    cfg.stage1.batch_size = 8;
    cfg.stage1.lr = 5e-3;
    cfg.stage2.epochs = 2;
    cfg.stage2.batch_size = 4;
    cfg.stage2.lr = 5e-3;
    cfg
}

fn stage1(
    cfg: &ModelConfig,
    items: &[SynthItem],
    vocab: &Vocab,
) -> (ParamStore<f32>, Vec<f64>, Vec<f64>) {
    let mut params = init_model::<f32>(cfg);
    let teacher = Teacher::frozen(cfg, 5);
    let r = pretrain_stage1(
        cfg,
        &mut params,
        items,
        vocab,
        &teacher,
        &RunOptions::default(),
    )
    .unwrap();
    let losses = r.report.records.iter().map(|rec| rec.loss).collect();
    (params, r.history, losses)
}

#[test]
fn step_schedule_cases() {
    assert_eq!(step_lr(0, 1e-3, 10, 0.5), 1e-3);
    assert_eq!(step_lr(9, 1e-3, 10, 0.5), 1e-3);
    assert_eq!(step_lr(10, 1e-3, 10, 0.5), 5e-4);
    assert_eq!(step_lr(25, 1e-3, 10, 0.5), 2.5e-4);
    assert_eq!(step_lr(3, 0.1, 1, 0.1), 0.1 * 0.1f64.powi(3));
}

#[test]
fn stage1_reduces_loss_and_is_reproducible() {
    let cfg = small();
    let (items, vocab) = synth(&cfg, 1, 16);
    let (params, history, losses) = stage1(&cfg, &items, &vocab);
    assert_eq!(losses.len(), cfg.stage1.epochs + 1);
    assert_eq!(history.len(), cfg.stage1.epochs * 2);
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");

    let (again, history2, _) = stage1(&cfg, &items, &vocab);
    assert_eq!(history, history2);
    for (name, v) in params.iter() {
        assert_eq!(v, again.get(name).unwrap(), "{name}");
    }
}

#[test]
fn stage2_keeps_dual_encoder_frozen_and_reduces_loss() {
    let cfg = small();
    let (items, vocab) = synth(&cfg, 2, 12);
    let (mut params, _, _) = stage1(&cfg, &items, &vocab);
    let before = params.clone();
    let cache = cache_features(&cfg, &params, &items, &vocab).unwrap();
    let r = train_stage2(&cfg, &mut params, &cache, &RunOptions::default()).unwrap();
    let losses: Vec<f64> = r.report.records.iter().map(|rec| rec.loss).collect();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    assert_eq!(r.decoder_trainable_fraction, 1.0);

    let mut frozen = 0;
    for (name, v) in before.iter() {
        if name.starts_with(text_encoder::PREFIX) || name.starts_with(image_encoder::PREFIX) {
            assert_eq!(v, params.get(name).unwrap(), "{name} moved");
            frozen += 1;
        }
    }
    assert!(frozen > 0);

    let (summary, predictions) = evaluate_vqa(&cfg, &params, &cache, &items, &vocab).unwrap();
    assert_eq!(summary.items, items.len());
    assert_eq!(predictions.len(), items.len());
    assert!(summary.matched_loss.is_finite() && summary.shuffled_loss.is_finite());
}

#[test]
fn unfreeze_ratio_changes_what_stage2_trains() {
    let cfg = small();
    let (items, vocab) = synth(&cfg, 3, 8);
    let base = init_model::<f32>(&cfg);
    let cache = cache_features(&cfg, &base, &items, &vocab).unwrap();
    let run = |ratio: f64| {
        let cfg = ModelConfig {
            unfreeze_ratio: ratio,
            ..cfg.clone()
        };
        let mut params = base.clone();
        let r = train_stage2(&cfg, &mut params, &cache, &RunOptions::default()).unwrap();
        (params, r.decoder_trainable_fraction)
    };
    let (low, low_fraction) = run(0.05);
    let (full, full_fraction) = run(1.0);
    assert!(low_fraction < 0.5 && full_fraction == 1.0);
    let moved = |p: &ParamStore<f32>| {
        base.iter()
            .filter(|(n, v)| n.starts_with(decoder::PREFIX) && p.get(n).unwrap() != *v)
            .count()
    };
    assert!(
        moved(&low) < moved(&full),
        "{} vs {}",
        moved(&low),
        moved(&full)
    );
}

/// Cosine of every image/text pair by explicit loops.
fn cosine_oracle(i: &Array2<f64>, t: &Array2<f64>) -> (f64, f64) {
    let n = i.nrows();
    let (mut pos, mut neg) = (0.0, 0.0);
    for a in 0..n {
        for b in 0..n {
            let (x, y) = (i.row(a), t.row(b));
            let c = x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt());
            if a == b {
                pos += c;
            } else {
                neg += c;
            }
        }
    }
    (pos / n as f64, neg / (n * (n - 1)) as f64)
}

#[test]
fn cosine_metrics_match_pairwise_loops() {
    let i = randn(&mut rng(4), &[7, 5], 1.0)
        .into_dimensionality::<Ix2>()
        .unwrap();
    let t = randn(&mut rng(5), &[7, 5], 1.0)
        .into_dimensionality::<Ix2>()
        .unwrap();
    let s = cosine_metrics(&i, &t).unwrap();
    let (pos, neg) = cosine_oracle(&i, &t);
    assert!((s.pos_mean - pos).abs() < 1e-12);
    assert!((s.neg_mean - neg).abs() < 1e-12);
    assert!((s.gap - (pos - neg)).abs() < 1e-12);

    // scaling rows leaves cosines unchanged
    let scaled = &i * 3.5;
    assert!((cosine_metrics(&scaled, &t).unwrap().gap - s.gap).abs() < 1e-12);
    assert!(matches!(
        cosine_metrics(
            &i.slice(s![..1, ..]).to_owned(),
            &t.slice(s![..1, ..]).to_owned()
        ),
        Err(Error::Metrics(_))
    ));
}

#[test]
fn pca_matches_reference_eigendecomposition() {
    let x = randn(&mut rng(6), &[10, 5], 1.0)
        .into_dimensionality::<Ix2>()
        .unwrap();
    let pca = pca3(&x).unwrap();

    let mean = x.mean_axis(Axis(0)).unwrap();
    let centred = &x - &mean;
    let cov = centred.t().dot(&centred) / 9.0;
    let m = nalgebra::DMatrix::from_fn(5, 5, |r, c| cov[[r, c]]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().sum();

    for (k, &e) in order.iter().take(3).enumerate() {
        assert!((pca.explained_variance[k] - eig.eigenvalues[e]).abs() < 1e-9);
        assert!((pca.explained_ratio[k] - eig.eigenvalues[e] / total).abs() < 1e-9);
        let reference = eig.eigenvectors.column(e);
        let dot: f64 = (0..5).map(|r| reference[r] * pca.components[[r, k]]).sum();
        assert!(
            (dot.abs() - 1.0).abs() < 1e-8,
            "component {k}: |dot| = {}",
            dot.abs()
        );
    }
    // coordinates are projections of the centred data
    assert!((&pca.coords - &centred.dot(&pca.components))
        .iter()
        .all(|d| d.abs() < 1e-12));
    assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn pca_reconstructs_rank_three_data() {
    let basis = randn(&mut rng(7), &[3, 6], 1.0)
        .into_dimensionality::<Ix2>()
        .unwrap();
    let weights = randn(&mut rng(8), &[12, 3], 1.0)
        .into_dimensionality::<Ix2>()
        .unwrap();
    let x = weights.dot(&basis) + 2.0;
    let pca = pca3(&x).unwrap();
    let rebuilt = pca.coords.dot(&pca.components.t()) + &pca.mean;
    assert!((&rebuilt - &x).iter().all(|d| d.abs() < 1e-9));
    assert!((pca.explained_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(matches!(
        pca3(&Array2::<f64>::ones((5, 3))),
        Err(Error::DegenerateData(_))
    ));
}

#[test]
fn vqa_accuracy_cases() {
    let preds = ["The Red.", "blue", "", "yes"];
    let refs = ["red", "green", "", "Yes!"];
    assert_eq!(vqa_accuracy(&preds, &refs).unwrap(), 0.5);
    assert_eq!(vqa_accuracy(&["a ball"], &["ball"]).unwrap(), 1.0);
    assert!(matches!(
        vqa_accuracy(&["x"], &["x", "y"]),
        Err(Error::Metrics(_))
    ));
    assert!(matches!(
        vqa_accuracy::<&str, &str>(&[], &[]),
        Err(Error::Metrics(_))
    ));
}

#[test]
fn gradient_check_passes_every_component() {
    for c in Component::ALL {
        let report = finite_diff_check(c, &GradCheckOptions::default())
            .unwrap_or_else(|e| panic!("{c}: {e}"));
        assert!(report.max_rel_error <= 1e-4);
        assert!(report.elements_checked > 0);
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let opts = GradCheckOptions {
        corrupt: true,
        ..GradCheckOptions::default()
    };
    for c in [Component::TextEncoder, Component::Decoder] {
        assert!(matches!(
            finite_diff_check(c, &opts),
            Err(Error::GradientCheck { .. })
        ));
    }
}

#[test]
fn analytic_flops_equal_counted_flops() {
    for cfg in [ModelConfig::micro(), small()] {
        let params = init_model::<f32>(&cfg);
        assert_eq!(
            instrumented_flops(&cfg, &params).unwrap(),
            flops_report(&cfg)
        );
    }
}
