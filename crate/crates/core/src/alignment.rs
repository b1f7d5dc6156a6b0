//! Stage-1 objectives and the teacher interface.
//!
//! The contrastive term is a bidirectional InfoNCE over in-batch pairs, the
//! distillation term an MSE between normalised student embeddings and teacher
//! embeddings mapped into the student space by learnable projection heads.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis, Ix2};

use crate::archive::{read_archive, NamedTensors, TensorData};
use crate::autograd::{Graph, Scalar, Var};
use crate::config::ModelConfig;
use crate::data::{Batch, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::nn::{self, linear};
use crate::params::{derive_seed, init_params, InitKind, ParamSpec, ParamStore};

pub const PREFIX: &str = "alignment/";
pub const IMAGE_HEAD: &str = "alignment/image_head";
pub const TEXT_HEAD: &str = "alignment/text_head";

/// Projection heads `d_t -> d` (weight and bias each).
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    nn::linear_spec(&mut out, IMAGE_HEAD, cfg.teacher_dim, cfg.embed_dim, true);
    nn::linear_spec(&mut out, TEXT_HEAD, cfg.teacher_dim, cfg.embed_dim, true);
    out
}

fn check_pair<F: Scalar>(g: &Graph<'_, F>, a: Var, b: Var) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::shape(format!(
            "embedding batches must be equal [batch, dim] matrices, got {sa:?} and {sb:?}"
        )));
    }
    Ok((sa[0], sa[1]))
}

/// `(1/alpha) * (CE(I T^T / tau, y) + CE(T I^T / tau, y))` with `y = 0..B`.
/// Both inputs are L2-normalised first.
pub fn contrastive_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    image: Var,
    text: Var,
    tau: f64,
    alpha: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Value(format!("temperature must be > 0, got {tau}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::Value(format!("alpha must be > 0, got {alpha}")));
    }
    let (batch, _) = check_pair(g, image, text)?;
    let i = g.l2_normalize(image);
    let t = g.l2_normalize(text);
    let targets: Vec<Option<usize>> = (0..batch).map(Some).collect();
    let inv_tau = F::c(1.0 / tau);
    let it = g.matmul(i, t, true);
    let it = g.scale(it, inv_tau);
    let ti = g.matmul(t, i, true);
    let ti = g.scale(ti, inv_tau);
    let a = g.cross_entropy(it, &targets);
    let b = g.cross_entropy(ti, &targets);
    let sum = g.add(a, b);
    Ok(g.scale(sum, F::c(1.0 / alpha)))
}

/// `(1/beta) * (MSE(I_s, I_t') + MSE(T_s, T_t'))`, MSE averaged over all
/// `B * d` elements. All four inputs are L2-normalised first.
pub fn distill_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    image: Var,
    text: Var,
    teacher_image: Var,
    teacher_text: Var,
    beta: f64,
) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(Error::Value(format!("beta must be > 0, got {beta}")));
    }
    check_pair(g, image, text)?;
    check_pair(g, image, teacher_image)?;
    check_pair(g, text, teacher_text)?;
    let mse = |g: &mut Graph<'_, F>, s: Var, t: Var| {
        let s = g.l2_normalize(s);
        let t = g.l2_normalize(t);
        let d = g.sub(s, t);
        let sq = g.mul(d, d);
        g.mean_all(sq)
    };
    let a = mse(g, image, teacher_image);
    let b = mse(g, text, teacher_text);
    let sum = g.add(a, b);
    Ok(g.scale(sum, F::c(1.0 / beta)))
}

/// `lambda1 * contrastive + lambda2 * distill`.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    contrastive: Var,
    distill: Var,
    lambda1: f64,
    lambda2: f64,
) -> Var {
    let a = g.scale(contrastive, F::c(lambda1));
    let b = g.scale(distill, F::c(lambda2));
    g.add(a, b)
}

pub fn total_loss_value(contrastive: f64, distill: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * contrastive + lambda2 * distill
}

/// Contrastive loss of plain matrices, evaluated in `f64`.
pub fn contrastive_loss_value(
    image: &Array2<f64>,
    text: &Array2<f64>,
    tau: f64,
    alpha: f64,
) -> Result<f64> {
    let mut g = Graph::<f64>::detached();
    let i = g.constant(image.clone().into_dyn());
    let t = g.constant(text.clone().into_dyn());
    let l = contrastive_loss(&mut g, i, t, tau, alpha)?;
    Ok(g.scalar(l))
}

/// Distillation loss of plain matrices, evaluated in `f64`.
pub fn distill_loss_value(
    image: &Array2<f64>,
    text: &Array2<f64>,
    teacher_image: &Array2<f64>,
    teacher_text: &Array2<f64>,
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::<f64>::detached();
    let vars: Vec<Var> = [image, text, teacher_image, teacher_text]
        .iter()
        .map(|a| g.constant((*a).clone().into_dyn()))
        .collect();
    let l = distill_loss(&mut g, vars[0], vars[1], vars[2], vars[3], beta)?;
    Ok(g.scalar(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherSource {
    Archive,
    FrozenRandom,
}

/// Teacher image and text embeddings `[batch, d_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEmbeddings {
    pub image: Array2<f32>,
    pub text: Array2<f32>,
    pub source: TeacherSource,
}

/// Small fixed network: a 4x4 stride-4 conv with SiLU and global mean pool
/// for images, a bag-of-words embedding mean for captions, each followed by a
/// linear map to `d_t`. Its parameters never enter a training store.
#[derive(Debug, Clone)]
pub struct FrozenTeacher {
    params: ParamStore<f32>,
    dim: usize,
    vocab_size: usize,
}

const TEACHER_CHANNELS: usize = 16;
const TEACHER_WORD_DIM: usize = 32;

impl FrozenTeacher {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let specs = vec![
            ParamSpec::new(
                "teacher/conv.weight",
                &[TEACHER_CHANNELS, 3, 4, 4],
                InitKind::Fan(48),
            ),
            ParamSpec::new(
                "teacher/conv.bias",
                &[TEACHER_CHANNELS],
                InitKind::Normal(0.1),
            ),
            ParamSpec::new(
                "teacher/image_fc.weight",
                &[TEACHER_CHANNELS, cfg.teacher_dim],
                InitKind::Fan(TEACHER_CHANNELS),
            ),
            ParamSpec::new(
                "teacher/image_fc.bias",
                &[cfg.teacher_dim],
                InitKind::Normal(0.1),
            ),
            ParamSpec::new(
                "teacher/words",
                &[cfg.vocab_size, TEACHER_WORD_DIM],
                InitKind::Normal(1.0),
            ),
            ParamSpec::new(
                "teacher/text_fc.weight",
                &[TEACHER_WORD_DIM, cfg.teacher_dim],
                InitKind::Fan(TEACHER_WORD_DIM),
            ),
            ParamSpec::new(
                "teacher/text_fc.bias",
                &[cfg.teacher_dim],
                InitKind::Normal(0.1),
            ),
        ];
        Self {
            params: init_params(&specs, derive_seed(seed, "frozen-teacher")),
            dim: cfg.teacher_dim,
            vocab_size: cfg.vocab_size,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn embed(&self, batch: &Batch) -> Result<TeacherEmbeddings> {
        let mut g = Graph::inference(&self.params);
        let x = g.constant(batch.images.clone());
        let w = g.p("teacher/conv.weight");
        let b = g.p("teacher/conv.bias");
        let h = g.conv2d(x, w, Some(b), 4, 0, 1);
        let h = g.silu(h);
        let hs = g.shape(h).to_vec();
        let h = g.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]]);
        let h = g.mean_axis(h, 2, false);
        let image = linear(&mut g, h, "teacher/image_fc");

        let mut words = Vec::new();
        let mut mask = Vec::new();
        for seq in &batch.captions {
            let ids: Vec<usize> = seq
                .ids
                .iter()
                .map(|&i| i.min(self.vocab_size - 1))
                .collect();
            // specials carry no content
            mask.push(
                ids.iter()
                    .map(|&i| u8::from(i >= NUM_SPECIALS))
                    .collect::<Vec<u8>>(),
            );
            words.extend(ids);
        }
        let len = batch.captions.first().map_or(0, |s| s.ids.len());
        let table = g.p("teacher/words");
        let e = g.gather_rows(table, &words);
        let e = g.reshape(e, &[batch.len(), len, TEACHER_WORD_DIM]);
        let e = nn::masked_mean(&mut g, e, &mask);
        let text = linear(&mut g, e, "teacher/text_fc");
        Ok(TeacherEmbeddings {
            image: to_matrix(g.value(image))?,
            text: to_matrix(g.value(text))?,
            source: TeacherSource::FrozenRandom,
        })
    }
}

fn to_matrix(a: &ArrayD<f32>) -> Result<Array2<f32>> {
    a.clone()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape(format!("expected a matrix, got {:?}", a.shape())))
}

/// Source of teacher embeddings.
#[derive(Debug, Clone)]
pub enum Teacher {
    /// Precomputed vectors keyed by item id: `(image, text)`.
    Archive {
        dim: usize,
        vectors: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    },
    Frozen(FrozenTeacher),
}

impl Teacher {
    pub fn frozen(cfg: &ModelConfig, seed: u64) -> Self {
        Teacher::Frozen(FrozenTeacher::new(cfg, seed))
    }

    /// Reads `teacher/image/{id}` and `teacher/text/{id}` entries.
    pub fn from_archive(entries: &NamedTensors) -> Result<Self> {
        let mut images = BTreeMap::new();
        let mut texts = BTreeMap::new();
        for (name, t) in entries {
            let v: Vec<f32> = match t {
                TensorData::F32(a) => a.iter().copied().collect(),
                TensorData::F64(a) => a.iter().map(|&x| x as f32).collect(),
                TensorData::I64(_) => {
                    return Err(Error::ArchiveFormat(format!(
                        "teacher entry `{name}` is integer"
                    )))
                }
            };
            if let Some(id) = name.strip_prefix("teacher/image/") {
                images.insert(id.to_string(), v);
            } else if let Some(id) = name.strip_prefix("teacher/text/") {
                texts.insert(id.to_string(), v);
            }
        }
        let mut dim = None;
        let mut vectors = BTreeMap::new();
        for (id, img) in images {
            let txt = texts
                .remove(&id)
                .ok_or_else(|| Error::TeacherLookup(format!("no text embedding for `{id}`")))?;
            let d = *dim.get_or_insert(img.len());
            if img.len() != d || txt.len() != d {
                return Err(Error::shape(format!(
                    "teacher vectors for `{id}` differ in width"
                )));
            }
            vectors.insert(id, (img, txt));
        }
        if let Some(id) = texts.keys().next() {
            return Err(Error::TeacherLookup(format!(
                "no image embedding for `{id}`"
            )));
        }
        Ok(Teacher::Archive {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&read_archive(path)?)
    }

    pub fn dim(&self) -> usize {
        match self {
            Teacher::Archive { dim, .. } => *dim,
            Teacher::Frozen(t) => t.dim,
        }
    }
}

/// Teacher embeddings for every item of `batch`.
pub fn teacher_embed(batch: &Batch, teacher: &Teacher) -> Result<TeacherEmbeddings> {
    match teacher {
        Teacher::Frozen(t) => t.embed(batch),
        Teacher::Archive { dim, vectors } => {
            let mut image = Array2::zeros((batch.len(), *dim));
            let mut text = Array2::zeros((batch.len(), *dim));
            for (row, id) in batch.ids.iter().enumerate() {
                let (i, t) = vectors
                    .get(id)
                    .ok_or_else(|| Error::TeacherLookup(format!("no teacher entry for `{id}`")))?;
                image.row_mut(row).assign(&ndarray::aview1(i));
                text.row_mut(row).assign(&ndarray::aview1(t));
            }
            Ok(TeacherEmbeddings {
                image,
                text,
                source: TeacherSource::Archive,
            })
        }
    }
}

/// Archive entries for precomputed teacher embeddings.
pub fn teacher_archive(ids: &[String], emb: &TeacherEmbeddings) -> NamedTensors {
    let mut out = NamedTensors::new();
    for (row, id) in ids.iter().enumerate() {
        out.insert(
            format!("teacher/image/{id}"),
            TensorData::F32(emb.image.index_axis(Axis(0), row).to_owned().into_dyn()),
        );
        out.insert(
            format!("teacher/text/{id}"),
            TensorData::F32(emb.text.index_axis(Axis(0), row).to_owned().into_dyn()),
        );
    }
    out
}

/// Maps teacher embeddings through the projection heads and L2-normalises
/// each row. Returns `(image, text)`, each `[batch, d]`.
pub fn project_teacher<F: Scalar>(
    g: &mut Graph<'_, F>,
    teacher: &TeacherEmbeddings,
) -> Result<(Var, Var)> {
    let w = g.p(&format!("{IMAGE_HEAD}.weight"));
    let head_in = g.shape(w)[0];
    if teacher.image.ncols() != head_in || teacher.text.ncols() != head_in {
        return Err(Error::shape(format!(
            "teacher width {} does not match projection heads ({head_in})",
            teacher.image.ncols()
        )));
    }
    let ti = g.constant(teacher.image.mapv(|v| F::c(v as f64)).into_dyn());
    let tt = g.constant(teacher.text.mapv(|v| F::c(v as f64)).into_dyn());
    let pi = linear(g, ti, IMAGE_HEAD);
    let pt = linear(g, tt, TEXT_HEAD);
    Ok((g.l2_normalize(pi), g.l2_normalize(pt)))
}
