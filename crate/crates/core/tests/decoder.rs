mod common;

use bcqlm::autograd::Graph;
use bcqlm::config::{ModelConfig, OptimizerKind};
use bcqlm::data::{build_dialog, Dialog, BOS, EOS, PAD, SEP};
use bcqlm::decoder::{
    assemble_input, decode_forward, generation_loss, greedy_decode, greedy_generate,
    set_unfreeze_ratio, unfreeze_order, unfreeze_plan, DecoderInput, HEAD, PREFIX,
};
use bcqlm::params::ParamStore;
use bcqlm::pipeline::{init_model, Optimizer};
use bcqlm::Error;
use common::{noisy_model, noisy_model32, randn, rng, synth};
use ndarray::{s, ArrayD, Axis, Ix3};

/// A dialog of `len` ids: `BOS q.. SEP a.. EOS PAD..` with `q` question and `a` answer tokens.
fn dialog(len: usize, q: usize, a: usize, vocab: usize) -> Dialog {
    let mut ids = vec![BOS];
    ids.extend((0..q).map(|i| 5 + i % (vocab - 5)));
    ids.push(SEP);
    let start = ids.len();
    ids.extend((0..a).map(|i| 5 + (i * 3 + 1) % (vocab - 5)));
    ids.push(EOS);
    let end = ids.len();
    assert!(end <= len, "dialog does not fit");
    ids.resize(len, PAD);
    Dialog {
        ids,
        response: start..end,
        active: end,
    }
}

/// Micro sizes with room for a short dialog.
fn micro() -> ModelConfig {
    ModelConfig {
        text_max_len: 8,
        ..ModelConfig::micro()
    }
}

fn logits_of(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    pseudo: &ArrayD<f64>,
    dialogs: &[Dialog],
) -> ArrayD<f64> {
    let mut g = Graph::inference(params);
    let p = g.constant(pseudo.clone());
    let input = assemble_input(&mut g, cfg, p, dialogs).unwrap();
    let logits = decode_forward(&mut g, cfg, input.sequence).unwrap();
    g.value(logits).clone()
}

fn loss_of(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    pseudo: &ArrayD<f64>,
    dialogs: &[Dialog],
) -> f64 {
    let mut g = Graph::inference(params);
    let p = g.constant(pseudo.clone());
    let input = assemble_input(&mut g, cfg, p, dialogs).unwrap();
    let logits = decode_forward(&mut g, cfg, input.sequence).unwrap();
    let l = generation_loss(&mut g, logits, &input).unwrap();
    g.scalar(l)
}

#[test]
fn paper_sized_window_has_126_positions() {
    let cfg = ModelConfig {
        image_resolution: 224,
        text_max_len: 77,
        ..ModelConfig::micro()
    };
    assert_eq!(cfg.num_patches(), 49);
    assert_eq!(cfg.decoder_max_len(), 126);
    let params = init_model::<f64>(&cfg);
    let pseudo = randn(&mut rng(1), &[1, 49, cfg.decoder_dim], 1.0);
    let mut g = Graph::inference(&params);
    let p = g.constant(pseudo);
    let input = assemble_input(&mut g, &cfg, p, &[dialog(77, 3, 2, cfg.vocab_size)]).unwrap();
    assert_eq!(g.shape(input.sequence), &[1, 126, cfg.decoder_dim]);
    assert_eq!(input.len, 126);
    assert_eq!(input.num_visual, 49);
    let logits = decode_forward(&mut g, &cfg, input.sequence).unwrap();
    assert_eq!(g.shape(logits), &[1, 126, cfg.vocab_size]);
}

#[test]
fn empty_response_is_an_error() {
    let cfg = micro();
    let params = init_model::<f64>(&cfg);
    let mut d = dialog(8, 1, 1, cfg.vocab_size);
    d.response = 3..3;
    let mut g = Graph::inference(&params);
    let p = g.constant(ArrayD::zeros(ndarray::IxDyn(&[1, 2, cfg.decoder_dim])));
    assert!(matches!(
        assemble_input(&mut g, &cfg, p, &[d]),
        Err(Error::EmptyResponse(_))
    ));
}

#[test]
fn supervision_covers_exactly_the_response() {
    let cfg = micro();
    let params = init_model::<f64>(&cfg);
    let dialogs = [
        dialog(8, 1, 1, cfg.vocab_size),
        dialog(8, 0, 2, cfg.vocab_size),
    ];
    let n = 3;
    let mut g = Graph::inference(&params);
    let p = g.constant(ArrayD::zeros(ndarray::IxDyn(&[2, n, cfg.decoder_dim])));
    let input = assemble_input(&mut g, &cfg, p, &dialogs).unwrap();
    for (mask, d) in input.loss_mask.iter().zip(&dialogs) {
        assert_eq!(mask.iter().filter(|&&m| m).count(), d.response_len());
        assert!(mask[..n].iter().all(|&m| !m));
        // the label of a supervised position is the next token
        for (pos, &m) in mask.iter().enumerate().skip(n) {
            assert_eq!(m, d.response.contains(&(pos - n + 1)));
        }
    }
    assert_eq!(
        input.supervised_count(),
        dialogs.iter().map(Dialog::response_len).sum::<usize>()
    );
    let len = input.len;
    assert_eq!(input.labels[n], None);
    assert_eq!(input.labels[len + n + 1], Some(dialogs[1].ids[2]));
}

#[test]
fn logits_ignore_later_positions() {
    let cfg = ModelConfig::micro();
    let params = noisy_model(&cfg, 2, 0.3);
    let seq = randn(&mut rng(3), &[1, 6, cfg.decoder_dim], 1.0);
    let run = |x: &ArrayD<f64>| {
        let mut g = Graph::inference(&params);
        let v = g.constant(x.clone());
        let l = decode_forward(&mut g, &cfg, v).unwrap();
        g.value(l).clone().into_dimensionality::<Ix3>().unwrap()
    };
    let base = run(&seq);
    for t in 1..6 {
        let mut perturbed = seq.clone();
        perturbed.slice_mut(s![0, t, ..]).mapv_inplace(|v| v + 1.5);
        let out = run(&perturbed);
        assert_eq!(out.slice(s![.., ..t, ..]), base.slice(s![.., ..t, ..]));
        assert_ne!(out.slice(s![.., t, ..]), base.slice(s![.., t, ..]));
    }
}

#[test]
fn zero_head_gives_zero_logits_and_log_vocab_loss() {
    let cfg = ModelConfig {
        vocab_size: 16,
        ..micro()
    };
    assert_eq!(cfg.decoder_layers, 1);
    let mut params = noisy_model(&cfg, 4, 0.3);
    params.get_mut(&format!("{HEAD}.weight")).unwrap().fill(0.0);
    params.get_mut(&format!("{HEAD}.bias")).unwrap().fill(0.0);
    let pseudo = randn(&mut rng(5), &[2, 3, cfg.decoder_dim], 1.0);
    let dialogs = [dialog(8, 1, 1, 16), dialog(8, 0, 2, 16)];
    assert!(logits_of(&params, &cfg, &pseudo, &dialogs)
        .iter()
        .all(|&v| v == 0.0));
    let loss = loss_of(&params, &cfg, &pseudo, &dialogs);
    assert!((loss - 16f64.ln()).abs() < 1e-6);
    assert!((loss - 2.772589).abs() < 1e-6);
}

#[test]
fn confident_correct_logits_have_near_zero_loss() {
    let cfg = micro();
    let params = init_model::<f64>(&cfg);
    let d = dialog(8, 1, 1, cfg.vocab_size);
    let mut g = Graph::inference(&params);
    let p = g.constant(ArrayD::zeros(ndarray::IxDyn(&[1, 2, cfg.decoder_dim])));
    let input = assemble_input(&mut g, &cfg, p, std::slice::from_ref(&d)).unwrap();
    let mut logits = ArrayD::<f64>::zeros(ndarray::IxDyn(&[1, input.len, cfg.vocab_size]));
    for (pos, label) in input.labels.iter().enumerate() {
        if let Some(id) = label {
            logits[[0, pos, *id]] = 50.0;
        }
    }
    let l = g.constant(logits);
    let loss = generation_loss(&mut g, l, &input).unwrap();
    assert!(g.scalar(loss) < 1e-6);
}

#[test]
fn no_supervised_positions_is_an_error() {
    let cfg = ModelConfig::micro();
    let params = init_model::<f64>(&cfg);
    let mut g = Graph::inference(&params);
    let input = DecoderInput {
        sequence: g.constant(ArrayD::zeros(ndarray::IxDyn(&[1, 3, cfg.decoder_dim]))),
        labels: vec![None; 3],
        loss_mask: vec![vec![false; 3]],
        num_visual: 1,
        len: 3,
    };
    let logits = g.constant(ArrayD::zeros(ndarray::IxDyn(&[1, 3, cfg.vocab_size])));
    assert!(matches!(
        generation_loss(&mut g, logits, &input),
        Err(Error::EmptyResponse(_))
    ));
}

#[test]
fn noise_after_the_response_leaves_loss_bitwise_unchanged() {
    let cfg = micro();
    let params = noisy_model(&cfg, 6, 0.3);
    let pseudo = randn(&mut rng(7), &[1, 3, cfg.decoder_dim], 1.0);
    let clean = dialog(8, 0, 1, cfg.vocab_size);
    assert_eq!(clean.active, 4);
    let mut noisy = clean.clone();
    for id in &mut noisy.ids[4..] {
        *id = 9;
    }
    assert_eq!(
        loss_of(&params, &cfg, &pseudo, &[clean]),
        loss_of(&params, &cfg, &pseudo, &[noisy])
    );
}

#[test]
fn unfreeze_ratio_limits() {
    let cfg = ModelConfig::tiny();
    let (all, fraction) = unfreeze_plan(&cfg, 1.0).unwrap();
    assert_eq!(fraction, 1.0);
    assert_eq!(all.len(), unfreeze_order(&cfg).len());

    let (small, fraction) = unfreeze_plan(&cfg, 0.05).unwrap();
    assert!((0.05..=0.07).contains(&fraction), "{fraction}");
    assert!(small.contains(&format!("{HEAD}.weight")));

    let (_, half) = unfreeze_plan(&cfg, 0.5).unwrap();
    assert!((half - 0.5).abs() <= 0.02, "{half}");

    for bad in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(unfreeze_plan(&cfg, bad), Err(Error::Value(_))));
    }
}

#[test]
fn larger_ratios_unfreeze_supersets() {
    let cfg = ModelConfig::tiny();
    let ratios = [0.01, 0.05, 0.2, 0.5, 0.8, 1.0];
    let plans: Vec<Vec<String>> = ratios
        .iter()
        .map(|&r| unfreeze_plan(&cfg, r).unwrap().0)
        .collect();
    for w in plans.windows(2) {
        assert!(w[0].iter().all(|n| w[1].contains(n)));
    }
}

#[test]
fn one_step_moves_only_trainable_decoder_tensors() {
    let cfg = ModelConfig::tiny();
    let (items, vocab) = synth(&cfg, 8, 4);
    for ratio in [0.05, 0.5, 1.0] {
        let mut params = init_model::<f32>(&cfg);
        params.set_prefix_trainable("", false);
        let fraction = set_unfreeze_ratio(&mut params, &cfg, ratio).unwrap();
        assert!((fraction - ratio).abs() <= 0.02);
        let before = params.clone();
        let dialogs: Vec<Dialog> = items
            .iter()
            .map(|it| {
                build_dialog(&it.question, Some(&it.answer), &vocab, cfg.text_max_len).unwrap()
            })
            .collect();
        let pseudo = common::randn32(&mut rng(9), &[4, cfg.num_patches(), cfg.decoder_dim], 1.0);
        let grads = {
            let mut g = Graph::new(&params);
            let p = g.constant(pseudo);
            let input = assemble_input(&mut g, &cfg, p, &dialogs).unwrap();
            let logits = decode_forward(&mut g, &cfg, input.sequence).unwrap();
            let l = generation_loss(&mut g, logits, &input).unwrap();
            g.backward(l).into_params()
        };
        Optimizer::new(OptimizerKind::Adamw, 0.01).step(&mut params, &grads, 1e-3);
        let mut changed = 0;
        for (name, old) in before.iter() {
            let new = params.get(name).unwrap();
            if params.is_trainable(name) {
                assert!(name.starts_with(PREFIX));
                changed += usize::from(new != old);
            } else {
                assert_eq!(new, old, "{name} moved while frozen");
            }
        }
        assert!(changed > 0);
    }
}

#[test]
fn greedy_generation_contracts() {
    let cfg = ModelConfig::tiny();
    let (items, vocab) = synth(&cfg, 10, 2);
    let params = noisy_model32(&cfg, 11, 0.05);
    let item = &items[0];
    assert_eq!(
        greedy_generate(&params, &cfg, &vocab, &item.image, &item.question, 0).unwrap(),
        ""
    );
    let a = greedy_generate(&params, &cfg, &vocab, &item.image, &item.question, 5).unwrap();
    let b = greedy_generate(&params, &cfg, &vocab, &item.image, &item.question, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.split_whitespace().count() <= 5);

    let pseudo = common::randn32(&mut rng(12), &[1, cfg.num_patches(), cfg.decoder_dim], 1.0);
    let prompt = build_dialog(&item.question, None, &vocab, cfg.text_max_len).unwrap();
    let ids = greedy_decode(&params, &cfg, &pseudo, &prompt.ids, 3).unwrap();
    assert!(ids.len() <= 3);
    assert!(!ids.contains(&EOS));
    let logits = {
        let mut g = Graph::inference(&params);
        let p = g.constant(pseudo.clone());
        let seq =
            bcqlm::decoder::assemble_sequence(&mut g, &cfg, p, std::slice::from_ref(&prompt.ids))
                .unwrap();
        let l = decode_forward(&mut g, &cfg, seq).unwrap();
        g.value(l)
            .index_axis(Axis(1), cfg.num_patches() + prompt.ids.len() - 1)
            .to_owned()
    };
    // the first generated id is the argmax after the prompt
    if let Some(&first) = ids.first() {
        let row = logits.index_axis(Axis(0), 0);
        assert!(row.iter().all(|&v| v <= row[first]));
    }
}
