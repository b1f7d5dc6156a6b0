use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::alignment::{self, distill_loss, project_teacher, TeacherEmbeddings, TeacherSource};
use crate::autograd::{Graph, Var};
use crate::config::{FusionVariant, ModelConfig};
use crate::data::{Dialog, BOS, EOS, NUM_SPECIALS, PAD, SEP};
use crate::decoder::{self, assemble_input, decode_forward, generation_loss};
use crate::error::{Error, Result};
use crate::image_encoder::{self, encode_image, pooled_image};
use crate::params::{derive_seed, ParamStore};
use crate::qgcam::{self, fuse_variant};
use crate::text_encoder::{self, encode_text, pooled_text};

use super::init_model;

/// Model part whose parameter gradients are verified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    TextEncoder,
    ImageEncoder,
    /// Teacher projection heads under the distillation loss.
    Alignment,
    Qgcam(FusionVariant),
    Decoder,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::TextEncoder,
        Component::ImageEncoder,
        Component::Alignment,
        Component::Qgcam(FusionVariant::Standard),
        Component::Qgcam(FusionVariant::TokenBalance),
        Component::Qgcam(FusionVariant::VisualQuery),
        Component::Decoder,
    ];

    fn prefix(self) -> &'static str {
        match self {
            Component::TextEncoder => text_encoder::PREFIX,
            Component::ImageEncoder => image_encoder::PREFIX,
            Component::Alignment => alignment::PREFIX,
            Component::Qgcam(_) => qgcam::PREFIX,
            Component::Decoder => decoder::PREFIX,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::TextEncoder => f.write_str("text_encoder"),
            Component::ImageEncoder => f.write_str("image_encoder"),
            Component::Alignment => f.write_str("alignment"),
            Component::Qgcam(FusionVariant::Standard) => f.write_str("qgcam"),
            Component::Qgcam(v) => write!(f, "qgcam:{}", v.name()),
            Component::Decoder => f.write_str("decoder"),
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    /// `text_encoder`, `image_encoder`, `alignment`, `decoder`, `qgcam` or
    /// `qgcam:<variant>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_encoder" => Ok(Component::TextEncoder),
            "image_encoder" => Ok(Component::ImageEncoder),
            "alignment" => Ok(Component::Alignment),
            "decoder" => Ok(Component::Decoder),
            "qgcam" => Ok(Component::Qgcam(FusionVariant::Standard)),
            other => match other.strip_prefix("qgcam:") {
                Some(v) => Ok(Component::Qgcam(v.parse()?)),
                None => Err(Error::Value(format!("unknown component `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Elements compared per tensor (all of them for smaller tensors).
    pub samples_per_tensor: usize,
    /// Relative step: `h = step * max(1, |theta|)`.
    pub step: f64,
    /// Lower bound of the relative-error denominator. Central differences of
    /// an O(10-100) probe loss carry roundoff near 1e-9, so gradients below
    /// this are effectively compared in absolute terms (`floor * tolerance`).
    pub floor: f64,
    pub seed: u64,
    /// Negative control: add 1 to one analytic gradient element before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            samples_per_tensor: 24,
            step: 1e-5,
            floor: 1e-3,
            seed: 11,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub component: String,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub tensors_checked: usize,
    pub elements_checked: usize,
}

/// Fixed inputs of the probe forward passes.
struct Probe {
    images: ArrayD<f32>,
    ids: Vec<Vec<usize>>,
    mask: Vec<Vec<u8>>,
    visual: ArrayD<f64>,
    text: ArrayD<f64>,
    teacher: TeacherEmbeddings,
    student: (ArrayD<f64>, ArrayD<f64>),
    pseudo: ArrayD<f64>,
    dialogs: Vec<Dialog>,
}

const BATCH: usize = 2;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl Probe {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let t = cfg.text_max_len;
        let (n, d) = (cfg.num_patches(), cfg.embed_dim);
        let r = cfg.image_resolution;
        let images = normal(rng, &[BATCH, 3, r, r], 1.0).mapv(|v| v as f32);
        // second row padded so masking is exercised
        let active = [t, (t / 2).max(2)];
        let words = cfg.vocab_size - NUM_SPECIALS;
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for (row, &a) in active.iter().enumerate() {
            let mut r: Vec<usize> = (0..t)
                .map(|i| NUM_SPECIALS + (row * 5 + i * 3) % words)
                .collect();
            r[0] = BOS;
            r[a - 1] = EOS;
            r[a..].fill(PAD);
            ids.push(r);
            mask.push((0..t).map(|i| u8::from(i < a)).collect());
        }
        let dt = cfg.teacher_dim;
        let teacher = TeacherEmbeddings {
            image: normal(rng, &[BATCH, dt], 1.0)
                .mapv(|v| v as f32)
                .into_dimensionality()
                .expect("2-D"),
            text: normal(rng, &[BATCH, dt], 1.0)
                .mapv(|v| v as f32)
                .into_dimensionality()
                .expect("2-D"),
            source: TeacherSource::FrozenRandom,
        };
        let student = (normal(rng, &[BATCH, d], 1.0), normal(rng, &[BATCH, d], 1.0));
        // BOS SEP answer EOS: fits the 4-token window of the micro sizes
        let dialogs = (0..BATCH)
            .map(|row| {
                let mut ids = vec![BOS, SEP, NUM_SPECIALS + row, EOS];
                ids.resize(t.max(4), PAD);
                Dialog {
                    ids,
                    response: 2..4,
                    active: 4,
                }
            })
            .collect();
        Self {
            images,
            ids,
            mask,
            visual: normal(rng, &[BATCH, n, d], 1.0),
            text: normal(rng, &[BATCH, t, d], 1.0),
            teacher,
            student,
            pseudo: normal(rng, &[BATCH, n, cfg.decoder_dim], 1.0),
            dialogs,
        }
    }

    /// Outputs of the component whose weighted sum forms the probe loss.
    fn outputs(&self, g: &mut Graph<'_, f64>, cfg: &ModelConfig, c: Component) -> Result<Vec<Var>> {
        Ok(match c {
            Component::TextEncoder => {
                let f = encode_text(g, cfg, &self.ids, &self.mask)?;
                let pooled = pooled_text(g, &f);
                vec![f.tokens, pooled]
            }
            Component::ImageEncoder => {
                let f = encode_image(g, cfg, &self.images)?;
                let pooled = pooled_image(g, &f);
                vec![f.tokens, pooled]
            }
            Component::Alignment => {
                let (ti, tt) = project_teacher(g, &self.teacher)?;
                let si = g.constant(self.student.0.clone());
                let st = g.constant(self.student.1.clone());
                let loss = distill_loss(g, si, st, ti, tt, cfg.beta)?;
                vec![ti, tt, loss]
            }
            Component::Qgcam(kind) => {
                let v = g.constant(self.visual.clone());
                let t = g.constant(self.text.clone());
                let out = fuse_variant(g, cfg, kind, v, t, &self.mask)?;
                vec![out.pseudo, out.gate]
            }
            Component::Decoder => {
                let p = g.constant(self.pseudo.clone());
                let input = assemble_input(g, cfg, p, &self.dialogs)?;
                let logits = decode_forward(g, cfg, input.sequence)?;
                let loss = generation_loss(g, logits, &input)?;
                vec![logits, loss]
            }
        })
    }
}

/// `sum_i <weights_i, outputs_i>`.
fn probe_loss(g: &mut Graph<'_, f64>, outputs: &[Var], weights: &[ArrayD<f64>]) -> Var {
    let mut total: Option<Var> = None;
    for (&o, w) in outputs.iter().zip(weights) {
        let w = g.constant(w.clone());
        let p = g.mul(o, w);
        let s = g.sum_all(p);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    total.expect("at least one output")
}

/// Compares analytic parameter gradients of a fixed scalar probe against
/// central finite differences for every tensor of `component`, in `f64` on
/// the `micro` sizes. Parameters get Gaussian noise first so that zero or
/// unit initialisations do not hide errors.
pub fn finite_diff_check(component: Component, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::micro();
    if let Component::Qgcam(kind) = component {
        cfg.fusion_variant = kind;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "gradcheck"));
    let mut params: ParamStore<f64> = init_model(&cfg);
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let t = params.get_mut(name).expect("listed");
        t.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    let probe = Probe::new(&cfg, &mut rng);

    let weights: Vec<ArrayD<f64>> = {
        let mut g = Graph::inference(&params);
        let outs = probe.outputs(&mut g, &cfg, component)?;
        outs.iter()
            .map(|&o| normal(&mut rng, g.shape(o), 1.0))
            .collect()
    };
    let evaluate = |params: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(params);
        let outs = probe.outputs(&mut g, &cfg, component)?;
        let l = probe_loss(&mut g, &outs, &weights);
        Ok(g.scalar(l))
    };

    let analytic = {
        let mut g = Graph::new(&params);
        let outs = probe.outputs(&mut g, &cfg, component)?;
        let l = probe_loss(&mut g, &outs, &weights);
        g.backward(l).into_params()
    };

    let checked: Vec<String> = names
        .iter()
        .filter(|n| n.starts_with(component.prefix()))
        .cloned()
        .collect();
    let mut report = GradCheckReport {
        component: component.to_string(),
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        tensors_checked: 0,
        elements_checked: 0,
    };
    for (ti, name) in checked.iter().enumerate() {
        let numel = params.get(name).expect("listed").len();
        let zeros = ArrayD::zeros(params.get(name).expect("listed").raw_dim());
        let grad = analytic.get(name).unwrap_or(&zeros);
        let mut grad: Vec<f64> = grad.iter().copied().collect();
        if opts.corrupt && ti == 0 {
            grad[0] += 1.0;
        }
        let k = opts.samples_per_tensor.min(numel);
        let mut idx = sample(&mut rng, numel, k).into_vec();
        if !idx.contains(&0) {
            idx[0] = 0;
        }
        let mut worst = 0.0f64;
        for i in idx {
            let orig = params
                .get(name)
                .expect("listed")
                .as_slice()
                .expect("contiguous")[i];
            let h = opts.step * orig.abs().max(1.0);
            let set = |params: &mut ParamStore<f64>, v: f64| {
                params
                    .get_mut(name)
                    .expect("listed")
                    .as_slice_mut()
                    .expect("contiguous")[i] = v;
            };
            set(&mut params, orig + h);
            let up = evaluate(&params)?;
            set(&mut params, orig - h);
            let down = evaluate(&params)?;
            set(&mut params, orig);
            let numeric = (up - down) / (2.0 * h);
            let a = grad[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(err);
            report.elements_checked += 1;
        }
        report.tensors_checked += 1;
        if worst > report.max_rel_error || report.worst_tensor.is_empty() {
            report.max_rel_error = worst;
            report.worst_tensor = name.clone();
        }
    }
    if report.max_rel_error > opts.tolerance {
        return Err(Error::GradientCheck {
            tensor: report.worst_tensor,
            error: report.max_rel_error,
            tolerance: opts.tolerance,
        });
    }
    Ok(report)
}
