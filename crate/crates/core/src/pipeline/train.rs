use std::path::PathBuf;

use ndarray::{stack, Array2, ArrayD, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    self, contrastive_loss, distill_loss, project_teacher, teacher_embed, total_loss, Teacher,
};
use crate::archive::write_archive;
use crate::autograd::{Graph, Scalar, Var};
use crate::config::{ModelConfig, OptimConfig};
use crate::data::{build_dialog, detokenize, Batch, Dialog, SynthItem, Vocab};
use crate::decoder::{
    self, assemble_input, decode_forward, generation_loss, greedy_decode, set_unfreeze_ratio,
};
use crate::error::{Error, Result};
use crate::image_encoder::{self, encode_image, pooled_image};
use crate::params::{derive_seed, ParamStore};
use crate::qgcam::{self, fuse_variant};
use crate::text_encoder::{self, encode_sequences, pooled_text};

use super::metrics::{
    cosine_metrics, vqa_accuracy, CosineStats, EpochRecord, EvalSummary, MetricsReport,
};
use super::optim::{clip_gradients, step_lr, TrainState};

/// Where (and whether) a run writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for per-epoch and final checkpoints; nothing is written when `None`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl RunOptions {
    fn checkpoint(&self, params: &ParamStore<f32>, prefixes: &[&str], file: &str) -> Result<()> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = crate::archive::NamedTensors::new();
        for p in prefixes {
            entries.extend(params.to_archive(p));
        }
        write_archive(&entries, dir.join(file))?;
        Ok(())
    }
}

const BREEZECLIP: [&str; 2] = [text_encoder::PREFIX, image_encoder::PREFIX];

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged { step, loss })
    }
}

fn epoch_order(n: usize, seed: u64, stage: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{stage}-shuffle-{epoch}")));
    order.shuffle(&mut rng);
    order
}

fn to_f64_matrix<F: Scalar>(a: &ArrayD<F>) -> Result<Array2<f64>> {
    a.mapv(|v| v.f64())
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape(format!("expected a matrix, got {:?}", a.shape())))
}

/// Freezes everything, then marks tensors under `prefixes` trainable.
fn train_only(params: &mut ParamStore<f32>, prefixes: &[&str]) {
    params.set_prefix_trainable("", false);
    for p in prefixes {
        params.set_prefix_trainable(p, true);
    }
}

/// Eq. (3) loss of one batch on `g`.
fn stage1_loss(
    g: &mut Graph<'_, f32>,
    cfg: &ModelConfig,
    batch: &Batch,
    teacher: &Teacher,
) -> Result<Var> {
    let visual = encode_image(g, cfg, &batch.images)?;
    let img = pooled_image(g, &visual);
    let text = encode_sequences(g, cfg, &batch.captions)?;
    let txt = pooled_text(g, &text);
    let lc = contrastive_loss(g, img, txt, cfg.tau, cfg.alpha)?;
    let t = teacher_embed(batch, teacher)?;
    let (ti, tt) = project_teacher(g, &t)?;
    let ld = distill_loss(g, img, txt, ti, tt, cfg.beta)?;
    Ok(total_loss(g, lc, ld, cfg.lambda1, cfg.lambda2))
}

fn batches<'a>(items: &'a [SynthItem], order: &[usize], size: usize) -> Vec<Vec<&'a SynthItem>> {
    order
        .chunks(size.max(1))
        .map(|c| c.iter().map(|&i| &items[i]).collect())
        .collect()
}

/// Pooled contrastive embeddings `(I_s, T_s)` of every item, `[M, d]` each.
pub fn breezeclip_embeddings(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    items: &[SynthItem],
    vocab: &Vocab,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut images = Vec::new();
    let mut texts = Vec::new();
    let order: Vec<usize> = (0..items.len()).collect();
    for chunk in batches(items, &order, 32) {
        let batch = Batch::from_items(&chunk, vocab, cfg.text_max_len)?;
        let mut g = Graph::inference(params);
        let visual = encode_image(&mut g, cfg, &batch.images)?;
        let img = pooled_image(&mut g, &visual);
        let text = encode_sequences(&mut g, cfg, &batch.captions)?;
        let txt = pooled_text(&mut g, &text);
        images.push(to_f64_matrix(g.value(img))?);
        texts.push(to_f64_matrix(g.value(txt))?);
    }
    let cat = |parts: &[Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
    };
    Ok((cat(&images)?, cat(&texts)?))
}

/// Eq. (3) loss over the whole set, batched in item order.
fn stage1_full_loss(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    items: &[SynthItem],
    vocab: &Vocab,
    teacher: &Teacher,
) -> Result<f64> {
    let order: Vec<usize> = (0..items.len()).collect();
    let chunks = batches(items, &order, cfg.stage1.batch_size);
    let mut total = 0.0;
    for chunk in &chunks {
        let batch = Batch::from_items(chunk, vocab, cfg.text_max_len)?;
        let mut g = Graph::inference(params);
        let l = stage1_loss(&mut g, cfg, &batch, teacher)?;
        total += g.scalar(l) as f64;
    }
    Ok(total / chunks.len() as f64)
}

fn cosine_of(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    items: &[SynthItem],
    vocab: &Vocab,
) -> Result<CosineStats> {
    let (i, t) = breezeclip_embeddings(cfg, params, items, vocab)?;
    cosine_metrics(&i, &t)
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub report: MetricsReport,
    /// Loss of every optimisation step.
    pub history: Vec<f64>,
}

/// Trains the dual encoder and projection heads on `(image, caption)` pairs
/// with the weighted contrastive plus distillation objective. Only tensors
/// under the encoder and alignment prefixes are updated.
pub fn pretrain_stage1(
    cfg: &ModelConfig,
    params: &mut ParamStore<f32>,
    items: &[SynthItem],
    vocab: &Vocab,
    teacher: &Teacher,
    opts: &RunOptions,
) -> Result<Stage1Result> {
    if items.len() < 2 {
        return Err(Error::Value("stage 1 needs at least two pairs".into()));
    }
    let prefixes = [
        text_encoder::PREFIX,
        image_encoder::PREFIX,
        alignment::PREFIX,
    ];
    train_only(params, &prefixes);
    let oc = &cfg.stage1;
    let mut state = TrainState::<f32>::new(oc, derive_seed(cfg.seed, "stage1"));
    let mut report = MetricsReport::default();

    let initial = cosine_of(cfg, params, items, vocab)?;
    report.records.push(EpochRecord {
        stage: 1,
        epoch: None,
        loss: stage1_full_loss(cfg, params, items, vocab, teacher)?,
        step_loss: None,
        pos_mean: Some(initial.pos_mean),
        neg_mean: Some(initial.neg_mean),
        gap: Some(initial.gap),
        lr: step_lr(0, oc.lr, oc.step_size, oc.gamma),
    });

    for epoch in 0..oc.epochs {
        state.set_epoch(epoch, oc);
        let order = epoch_order(items.len(), cfg.seed, "stage1", epoch);
        let mut sum = 0.0;
        let chunks = batches(items, &order, oc.batch_size);
        for chunk in &chunks {
            let batch = Batch::from_items(chunk, vocab, cfg.text_max_len)?;
            let step_loss;
            let mut grads = {
                let mut g = Graph::new(params);
                let l = stage1_loss(&mut g, cfg, &batch, teacher)?;
                step_loss = g.scalar(l) as f64;
                check_finite(step_loss, state.history.len())?;
                g.backward(l).into_params()
            };
            clip_gradients(&mut grads, oc.clip_norm);
            state.optimizer.step(params, &grads, state.lr);
            state.history.push(step_loss);
            sum += step_loss;
        }
        let stats = cosine_of(cfg, params, items, vocab)?;
        let record = EpochRecord {
            stage: 1,
            epoch: Some(epoch),
            loss: stage1_full_loss(cfg, params, items, vocab, teacher)?,
            step_loss: Some(sum / chunks.len() as f64),
            pos_mean: Some(stats.pos_mean),
            neg_mean: Some(stats.neg_mean),
            gap: Some(stats.gap),
            lr: state.lr,
        };
        if opts.verbose {
            eprintln!(
                "stage1 epoch {epoch}: loss {:.5} step {:.5} pos {:.4} neg {:.4} gap {:.4}",
                record.loss,
                sum / chunks.len() as f64,
                stats.pos_mean,
                stats.neg_mean,
                stats.gap
            );
        }
        report.records.push(record);
        report.cosine = Some(stats);
        let mut ckpt_prefixes = BREEZECLIP.to_vec();
        ckpt_prefixes.push(alignment::PREFIX);
        opts.checkpoint(
            params,
            &ckpt_prefixes,
            &format!("stage1_epoch{epoch:03}.bcqt"),
        )?;
    }
    let mut ckpt_prefixes = BREEZECLIP.to_vec();
    ckpt_prefixes.push(alignment::PREFIX);
    opts.checkpoint(params, &ckpt_prefixes, "stage1.bcqt")?;
    Ok(Stage1Result {
        report,
        history: state.history,
    })
}

/// Frozen-encoder features of every item: patch tokens `[N, d]` and question
/// tokens `[T, d]` with their mask.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub visual: Vec<ArrayD<f32>>,
    pub text: Vec<ArrayD<f32>>,
    pub mask: Vec<Vec<u8>>,
    pub dialogs: Vec<Dialog>,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }

    fn stacked(parts: &[ArrayD<f32>], idx: &[usize]) -> Result<ArrayD<f32>> {
        let views: Vec<_> = idx.iter().map(|&i| parts[i].view()).collect();
        stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
    }
}

/// Runs the (frozen) encoders once over all items.
pub fn cache_features(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    items: &[SynthItem],
    vocab: &Vocab,
) -> Result<FeatureCache> {
    let mut cache = FeatureCache {
        visual: Vec::new(),
        text: Vec::new(),
        mask: Vec::new(),
        dialogs: Vec::new(),
    };
    let order: Vec<usize> = (0..items.len()).collect();
    for chunk in batches(items, &order, 32) {
        let batch = Batch::from_items(&chunk, vocab, cfg.text_max_len)?;
        let mut g = Graph::inference(params);
        let visual = encode_image(&mut g, cfg, &batch.images)?;
        let text = encode_sequences(&mut g, cfg, &batch.questions)?;
        for row in 0..batch.len() {
            cache
                .visual
                .push(g.value(visual.tokens).index_axis(Axis(0), row).to_owned());
            cache
                .text
                .push(g.value(text.tokens).index_axis(Axis(0), row).to_owned());
        }
        cache.mask.extend(text.mask.iter().cloned());
        cache.dialogs.extend(batch.dialogs.iter().cloned());
    }
    Ok(cache)
}

/// Generation loss of the items `idx`, pairing item `i` with the visual
/// features of `visual_idx[i]`.
fn stage2_loss(
    g: &mut Graph<'_, f32>,
    cfg: &ModelConfig,
    cache: &FeatureCache,
    idx: &[usize],
    visual_idx: &[usize],
) -> Result<Var> {
    let v = g.constant(FeatureCache::stacked(&cache.visual, visual_idx)?);
    let t = g.constant(FeatureCache::stacked(&cache.text, idx)?);
    let mask: Vec<Vec<u8>> = idx.iter().map(|&i| cache.mask[i].clone()).collect();
    let dialogs: Vec<Dialog> = idx.iter().map(|&i| cache.dialogs[i].clone()).collect();
    let fusion = fuse_variant(g, cfg, cfg.fusion_variant, v, t, &mask)?;
    let input = assemble_input(g, cfg, fusion.pseudo, &dialogs)?;
    let logits = decode_forward(g, cfg, input.sequence)?;
    generation_loss(g, logits, &input)
}

/// Mean generation loss over all items, in item order, with the visual
/// features rolled by `shift` items.
fn stage2_full_loss(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    cache: &FeatureCache,
    shift: usize,
) -> Result<f64> {
    let n = cache.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let chunks: Vec<&[usize]> = idx.chunks(cfg.stage2.batch_size.max(1)).collect();
    for chunk in &chunks {
        let vis: Vec<usize> = chunk.iter().map(|&i| (i + shift) % n).collect();
        let mut g = Graph::inference(params);
        let l = stage2_loss(&mut g, cfg, cache, chunk, &vis)?;
        total += g.scalar(l) as f64;
    }
    Ok(total / chunks.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub report: MetricsReport,
    pub history: Vec<f64>,
    /// Trainable share of decoder scalars (0 when the decoder stays frozen).
    pub decoder_trainable_fraction: f64,
}

/// Trains the fusion module and the unfrozen share of the decoder on cached
/// features of the frozen dual encoder.
pub fn train_stage2(
    cfg: &ModelConfig,
    params: &mut ParamStore<f32>,
    cache: &FeatureCache,
    opts: &RunOptions,
) -> Result<Stage2Result> {
    if cache.is_empty() {
        return Err(Error::Value("stage 2 needs at least one item".into()));
    }
    train_only(params, &[qgcam::PREFIX]);
    let decoder_trainable_fraction = if cfg.unfreeze_ratio > 0.0 {
        set_unfreeze_ratio(params, cfg, cfg.unfreeze_ratio)?
    } else {
        0.0
    };
    let oc: &OptimConfig = &cfg.stage2;
    let mut state = TrainState::<f32>::new(oc, derive_seed(cfg.seed, "stage2"));
    let mut report = MetricsReport::default();
    report.records.push(EpochRecord {
        stage: 2,
        epoch: None,
        loss: stage2_full_loss(cfg, params, cache, 0)?,
        step_loss: None,
        pos_mean: None,
        neg_mean: None,
        gap: None,
        lr: step_lr(0, oc.lr, oc.step_size, oc.gamma),
    });
    for epoch in 0..oc.epochs {
        state.set_epoch(epoch, oc);
        let order = epoch_order(cache.len(), cfg.seed, "stage2", epoch);
        let mut sum = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(oc.batch_size.max(1)).collect();
        for chunk in &chunks {
            let step_loss;
            let mut grads = {
                let mut g = Graph::new(params);
                let l = stage2_loss(&mut g, cfg, cache, chunk, chunk)?;
                step_loss = g.scalar(l) as f64;
                check_finite(step_loss, state.history.len())?;
                g.backward(l).into_params()
            };
            clip_gradients(&mut grads, oc.clip_norm);
            state.optimizer.step(params, &grads, state.lr);
            state.history.push(step_loss);
            sum += step_loss;
        }
        let record = EpochRecord {
            stage: 2,
            epoch: Some(epoch),
            loss: stage2_full_loss(cfg, params, cache, 0)?,
            step_loss: Some(sum / chunks.len() as f64),
            pos_mean: None,
            neg_mean: None,
            gap: None,
            lr: state.lr,
        };
        if opts.verbose {
            eprintln!(
                "stage2 epoch {epoch}: loss {:.5} step {:.5}",
                record.loss,
                sum / chunks.len() as f64
            );
        }
        report.records.push(record);
        opts.checkpoint(
            params,
            &[qgcam::PREFIX, decoder::PREFIX],
            &format!("stage2_epoch{epoch:03}.bcqt"),
        )?;
    }
    opts.checkpoint(params, &[qgcam::PREFIX, decoder::PREFIX], "stage2.bcqt")?;
    Ok(Stage2Result {
        report,
        history: state.history,
        decoder_trainable_fraction,
    })
}

/// One generated answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub reference: String,
}

/// Greedy answers from cached features, exact-match accuracy, and the
/// generation loss with matched versus rolled images.
pub fn evaluate_vqa(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    cache: &FeatureCache,
    items: &[SynthItem],
    vocab: &Vocab,
) -> Result<(EvalSummary, Vec<Prediction>)> {
    if cache.len() != items.len() {
        return Err(Error::shape(format!(
            "{} cached items for {} items",
            cache.len(),
            items.len()
        )));
    }
    let mut predictions = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let pseudo = {
            let mut g = Graph::inference(params);
            let v = g.constant(FeatureCache::stacked(&cache.visual, &[i])?);
            let t = g.constant(FeatureCache::stacked(&cache.text, &[i])?);
            let fusion = fuse_variant(&mut g, cfg, cfg.fusion_variant, v, t, &cache.mask[i..=i])?;
            g.value(fusion.pseudo).clone()
        };
        let prompt = build_dialog(&item.question, None, vocab, cfg.text_max_len)?;
        let ids = greedy_decode(params, cfg, &pseudo, &prompt.ids, cfg.text_max_len)?;
        predictions.push(Prediction {
            id: item.id.clone(),
            question: item.question.clone(),
            answer: detokenize(&ids, vocab),
            reference: item.answer.clone(),
        });
    }
    let answers: Vec<&str> = predictions.iter().map(|p| p.answer.as_str()).collect();
    let refs: Vec<&str> = items.iter().map(|it| it.answer.as_str()).collect();
    let accuracy = vqa_accuracy(&answers, &refs)?;
    let correct = (accuracy * items.len() as f64).round() as usize;
    let matched_loss = stage2_full_loss(cfg, params, cache, 0)?;
    let shuffled_loss = if items.len() > 1 {
        stage2_full_loss(cfg, params, cache, 1)?
    } else {
        matched_loss
    };
    Ok((
        EvalSummary {
            items: items.len(),
            correct,
            vqa_accuracy: accuracy,
            matched_loss,
            shuffled_loss,
        },
        predictions,
    ))
}
