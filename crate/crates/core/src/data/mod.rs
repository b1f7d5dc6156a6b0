//! Deterministic synthetic data: scene graphs and captions, toy VQA items,
//! a corpus-built word vocabulary and image preprocessing.

mod image;
mod scene;
mod synth;
mod vocab;

pub use image::{load_image_file, preprocess_image, ImagePrep};
pub use scene::{converse_predicate, render_caption, Relation, SceneGraph, SceneObject};
pub use synth::{
    draw_scene, export_dataset, load_dataset, oracle_answer, synth_dataset, Placement, SynthItem,
    SynthSpec, COLORS, PREDICATES,
};
pub use vocab::{
    build_dialog, build_vocab, detokenize, split_words, tokenize, Dialog, TokenSequence, Vocab,
    BOS, EOS, NUM_SPECIALS, PAD, SEP, UNK,
};

use ndarray::{Array4, ArrayD, Axis};

use crate::error::{Error, Result};

/// One training batch: images plus caption and dialog tokens.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[batch, 3, resolution, resolution]`, normalised.
    pub images: ArrayD<f32>,
    pub captions: Vec<TokenSequence>,
    pub questions: Vec<TokenSequence>,
    pub dialogs: Vec<Dialog>,
    pub answers: Vec<String>,
}

impl Batch {
    pub fn from_items(items: &[&SynthItem], vocab: &Vocab, max_len: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let views: Vec<_> = items.iter().map(|it| it.image.view()).collect();
        let images = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::shape(format!("image stack: {e}")))?;
        let images: Array4<f32> = images;
        Ok(Self {
            ids: items.iter().map(|it| it.id.clone()).collect(),
            images: images.into_dyn(),
            captions: items
                .iter()
                .map(|it| tokenize(&it.caption, vocab, max_len))
                .collect::<Result<_>>()?,
            questions: items
                .iter()
                .map(|it| tokenize(&it.question, vocab, max_len))
                .collect::<Result<_>>()?,
            dialogs: items
                .iter()
                .map(|it| build_dialog(&it.question, Some(&it.answer), vocab, max_len))
                .collect::<Result<_>>()?,
            answers: items.iter().map(|it| it.answer.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Supervision mask over the assembled decoder sequence (`num_patches` visual
    /// positions followed by the dialog window).
    pub fn loss_mask(&self, num_patches: usize) -> Vec<Vec<bool>> {
        self.dialogs
            .iter()
            .map(|d| {
                let mut m = vec![false; num_patches];
                m.extend(d.supervised_positions());
                m
            })
            .collect()
    }
}
