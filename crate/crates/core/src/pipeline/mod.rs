//! Training loops, optimisers, metrics, FLOP accounting and the
//! finite-difference verification harness.

mod flops;
mod gradcheck;
mod metrics;
mod optim;
mod train;

pub use flops::{
    attention_flops, conv_flops, flops_report, instrumented_flops, linear_flops,
    measure_efficiency, FlopsReport,
};
pub use gradcheck::{finite_diff_check, Component, GradCheckOptions, GradCheckReport};
pub use metrics::{
    cosine_metrics, normalize_answer, pca3, vqa_accuracy, write_pca_csv, CosineStats, Efficiency,
    EpochRecord, EvalSummary, MetricsReport, Pca, PcaRow,
};
pub use optim::{clip_gradients, global_norm, step_lr, Optimizer, TrainState};
pub use train::{
    breezeclip_embeddings, cache_features, evaluate_vqa, pretrain_stage1, train_stage2,
    FeatureCache, Prediction, RunOptions, Stage1Result, Stage2Result,
};

use crate::autograd::Scalar;
use crate::config::ModelConfig;
use crate::params::{count_specs, init_params, ParamSpec, ParamStore};
use crate::{alignment, decoder, image_encoder, qgcam, text_encoder};

/// Dual-encoder tensors: text and image encoders.
pub fn breezeclip_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = text_encoder::param_specs(cfg);
    specs.extend(image_encoder::param_specs(cfg));
    specs
}

/// Tensors trained in stage 1: the dual encoder plus teacher projection heads.
pub fn stage1_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = breezeclip_specs(cfg);
    specs.extend(alignment::param_specs(cfg));
    specs
}

/// Tensors introduced in stage 2: fusion module and decoder.
pub fn stage2_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = qgcam::param_specs(cfg);
    specs.extend(decoder::param_specs(cfg));
    specs
}

/// Every tensor of the model.
pub fn model_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = stage1_specs(cfg);
    specs.extend(stage2_specs(cfg));
    specs
}

/// Analytic parameter counts per module.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub text_encoder: usize,
    pub image_encoder: usize,
    pub breezeclip: usize,
    pub alignment_heads: usize,
    pub qgcam: usize,
    pub decoder: usize,
    pub total: usize,
}

pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let text = text_encoder::text_param_count(cfg);
    let image = image_encoder::image_param_count(cfg);
    let heads = count_specs(&alignment::param_specs(cfg));
    let fusion = qgcam::qgcam_param_count(cfg);
    let dec = decoder::decoder_param_count(cfg);
    ParamCounts {
        text_encoder: text,
        image_encoder: image,
        breezeclip: text + image,
        alignment_heads: heads,
        qgcam: fusion,
        decoder: dec,
        total: text + image + heads + fusion + dec,
    }
}

pub fn init_model<F: Scalar>(cfg: &ModelConfig) -> ParamStore<F> {
    init_params(&model_specs(cfg), cfg.seed)
}
