use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::autograd::Scalar;
use crate::config::{OptimConfig, OptimizerKind};
use crate::params::ParamStore;

/// `base_lr * gamma^floor(epoch / step_size)` with 0-based epochs.
pub fn step_lr(epoch: usize, base_lr: f64, step_size: usize, gamma: f64) -> f64 {
    let steps = epoch / step_size.max(1);
    base_lr * gamma.powi(steps as i32)
}

pub fn global_norm<F: Scalar>(grads: &BTreeMap<String, ArrayD<F>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = v.f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut BTreeMap<String, ArrayD<F>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::c(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Adam, or AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer<F: Scalar> {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    first: BTreeMap<String, ArrayD<F>>,
    second: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &OptimConfig) -> Self {
        Self::new(cfg.kind, cfg.weight_decay)
    }

    /// One update of every trainable tensor that has a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &BTreeMap<String, ArrayD<F>>,
        lr: f64,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let bc1 = F::c(1.0 - self.beta1.powi(t));
        let bc2 = F::c(1.0 - self.beta2.powi(t));
        let (lr_f, eps) = (F::c(lr), F::c(self.eps));
        let wd = F::c(self.weight_decay);
        let one = F::one();
        for (name, grad) in grads {
            if !params.is_trainable(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let kind = self.kind;
            Zip::from(p)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = match kind {
                        OptimizerKind::Adam if wd > F::zero() => g + wd * *p,
                        _ => g,
                    };
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    if kind == OptimizerKind::Adamw {
                        *p -= lr_f * wd * *p;
                    }
                    *p -= lr_f * update;
                });
        }
    }
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState<F: Scalar> {
    pub epoch: usize,
    pub lr: f64,
    pub optimizer: Optimizer<F>,
    /// Seed of the shuffling stream; epoch `e` shuffles with a stream derived from `(seed, e)`.
    pub shuffle_seed: u64,
    /// Loss of every optimisation step taken.
    pub history: Vec<f64>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: &OptimConfig, shuffle_seed: u64) -> Self {
        Self {
            epoch: 0,
            lr: step_lr(0, cfg.lr, cfg.step_size, cfg.gamma),
            optimizer: Optimizer::from_config(cfg),
            shuffle_seed,
            history: Vec::new(),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize, cfg: &OptimConfig) {
        self.epoch = epoch;
        self.lr = step_lr(epoch, cfg.lr, cfg.step_size, cfg.gamma);
    }
}
