#![allow(dead_code)]

use bcqlm::autograd::{Graph, Var};
use bcqlm::config::ModelConfig;
use bcqlm::data::{build_vocab, synth_dataset, ImagePrep, SynthItem, SynthSpec, Vocab};
use bcqlm::params::ParamStore;
use bcqlm::pipeline::init_model;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

pub fn randn32(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f32> {
    randn(rng, shape, std).mapv(|v| v as f32)
}

/// Model parameters with every tensor perturbed, so zero-initialised branches
/// carry signal.
pub fn noisy_model(cfg: &ModelConfig, seed: u64, std: f64) -> ParamStore<f64> {
    let mut params = init_model::<f64>(cfg);
    let mut r = rng(seed);
    let names: Vec<String> = params.names().cloned().collect();
    for n in names {
        let t = params.get_mut(&n).unwrap();
        let noise = randn(&mut r, t.shape(), std);
        *t += &noise;
    }
    params
}

pub fn noisy_model32(cfg: &ModelConfig, seed: u64, std: f64) -> ParamStore<f32> {
    let p = noisy_model(cfg, seed, std);
    let mut out = ParamStore::new();
    for (n, v) in p.iter() {
        out.insert(n.clone(), v.mapv(|x| x as f32));
    }
    out
}

/// Worst relative error between the tape gradients of `f` with respect to
/// its leaf inputs and central differences.
pub fn leaf_grad_error<Fun>(inputs: &[ArrayD<f64>], f: Fun) -> f64
where
    Fun: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let analytic: Vec<ArrayD<f64>> = {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
            })
            .collect()
    };
    let eval = |xs: &[ArrayD<f64>]| {
        let mut g = Graph::detached();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].as_slice().unwrap()[i];
            let h = 1e-6 * orig.abs().max(1.0);
            xs[k].as_slice_mut().unwrap()[i] = orig + h;
            let up = eval(&xs);
            xs[k].as_slice_mut().unwrap()[i] = orig - h;
            let down = eval(&xs);
            xs[k].as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_slice().unwrap()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// `sum(weights * x)`: a scalar probe whose gradient with respect to `x` is `weights`.
pub fn probe(g: &mut Graph<'_, f64>, x: Var, weights: &ArrayD<f64>) -> Var {
    let w = g.constant(weights.clone());
    let y = g.mul(x, w);
    g.sum_all(y)
}

pub fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `n` synthetic items rendered at the config's resolution and a vocabulary
/// built from their text.
pub fn synth(cfg: &ModelConfig, seed: u64, n: usize) -> (Vec<SynthItem>, Vocab) {
    let items =
        synth_dataset(seed, n, &SynthSpec::default(), &ImagePrep::from_config(cfg)).unwrap();
    let corpus: Vec<&str> = items
        .iter()
        .flat_map(|it| {
            [
                it.caption.as_str(),
                it.question.as_str(),
                it.answer.as_str(),
            ]
        })
        .collect();
    let vocab = build_vocab(&corpus, cfg.vocab_size).unwrap();
    (items, vocab)
}

/// Worst relative error between the tape gradients of every parameter that
/// receives one and central differences of `f`.
pub fn param_grad_error<Fun>(params: &mut ParamStore<f64>, f: Fun) -> f64
where
    Fun: Fn(&mut Graph<'_, f64>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g);
        g.backward(out).into_params()
    };
    let eval = |p: &ParamStore<f64>| {
        let mut g = Graph::inference(p);
        let out = f(&mut g);
        g.scalar(out)
    };
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = params.get(name).unwrap().as_slice().unwrap()[i];
            let h = 1e-6 * orig.abs().max(1.0);
            params.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig + h;
            let up = eval(params);
            params.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig - h;
            let down = eval(params);
            params.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_slice().unwrap()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

/// Layer norm of the last axis with unit gain and zero shift.
pub fn plain_layer_norm(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.clone();
    for mut row in out.lanes_mut(ndarray::Axis(x.ndim() - 1)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.mapv_inplace(|v| (v - mean) / (var + 1e-5).sqrt());
    }
    out
}
