//! Command-line front end.
//!
//! Every subcommand takes `--config` (JSON file or preset name), `--seed` and
//! `--out`; reports are written as pretty JSON (plus CSV for PCA exports).
//! Exit status: 0 on success, 1 for invalid input, 2 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::alignment::Teacher;
use crate::archive::{read_archive, NamedTensors};
use crate::config::{load_config, ModelConfig};
use crate::data::{
    build_vocab, draw_scene, export_dataset, load_dataset, load_image_file, synth_dataset,
    ImagePrep, SynthItem, SynthSpec, Vocab,
};
use crate::decoder::greedy_generate;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::{
    breezeclip_embeddings, cache_features, evaluate_vqa, finite_diff_check, flops_report,
    init_model, instrumented_flops, model_specs, param_counts, pca3, pretrain_stage1, train_stage2,
    write_pca_csv, Component, Efficiency, FlopsReport, GradCheckOptions, GradCheckReport,
    MetricsReport, ParamCounts, PcaRow, RunOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "bcqlm",
    version,
    about = "Lightweight multimodal question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// JSON config file or preset name (`tiny`, `reference-large`, `micro`).
    #[arg(long, default_value = "tiny")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args, Clone)]
struct DataArgs {
    /// Dataset directory written by `synth-data`; generated from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of items to use.
    #[arg(long)]
    items: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene/caption/VQA dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        items: usize,
    },
    /// Stage 1: contrastive plus distillation pretraining of the dual encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Archive of precomputed teacher embeddings; the built-in frozen network otherwise.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
    /// Stage 2: fusion and decoder training on the frozen dual encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Directory holding `stage1.bcqt` and `vocab.json`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        verbose: bool,
    },
    /// Exact-match evaluation of a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Directory holding `stage1.bcqt`, `stage2.bcqt` and `vocab.json`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Answer one question about one image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Per-sample FLOPs and parameter counts.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Also count FLOPs during a real forward pass.
        #[arg(long)]
        instrumented: bool,
        /// Also measure latency (not deterministic).
        #[arg(long)]
        timing: bool,
    },
    /// Three-component PCA of image and caption embeddings.
    PcaExport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Directory holding `stage1.bcqt` and `vocab.json`; untrained weights otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference verification of parameter gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// `text_encoder`, `image_encoder`, `alignment`, `qgcam[:variant]`, `decoder` or `all`.
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Negative control: corrupt one analytic gradient element.
        #[arg(long)]
        corrupt: bool,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn config_of(common: &Common) -> Result<ModelConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serialises") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text += &serde_json::to_string(r).expect("row serialises");
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn corpus_vocab(items: &[SynthItem], cfg: &ModelConfig) -> Result<Vocab> {
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
    build_vocab(&corpus, cfg.vocab_size)
}

fn read_vocab(dir: &Path) -> Result<Vocab> {
    let path = dir.join("vocab.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Vocab(format!("{}: {e}", path.display())))
}

fn load_items(cfg: &ModelConfig, data: &DataArgs, default_items: usize) -> Result<Vec<SynthItem>> {
    let mut items = match &data.data {
        Some(dir) => load_dataset(dir)?,
        None => synth_dataset(
            cfg.seed,
            data.items.unwrap_or(default_items),
            &SynthSpec::default(),
            &ImagePrep::from_config(cfg),
        )?,
    };
    if let Some(n) = data.items {
        items.truncate(n);
    }
    Ok(items)
}

/// Fresh parameters with the tensors of every archive in `files` loaded over them.
fn load_model(cfg: &ModelConfig, dir: &Path, files: &[&str]) -> Result<ParamStore<f32>> {
    let mut params = init_model::<f32>(cfg);
    let shapes: std::collections::BTreeMap<String, Vec<usize>> = model_specs(cfg)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();
    for file in files {
        let entries: NamedTensors = read_archive(dir.join(file))?;
        let loaded = ParamStore::<f32>::from_archive(&entries, "")?;
        for (name, value) in loaded.iter() {
            match shapes.get(name) {
                None => {
                    return Err(Error::MissingParam(format!(
                        "`{name}` is not part of this model"
                    )))
                }
                Some(s) if s.as_slice() != value.shape() => {
                    return Err(Error::shape(format!(
                        "checkpoint tensor `{name}` has shape {:?}, config expects {s:?}",
                        value.shape()
                    )))
                }
                _ => params.insert(name.clone(), value.clone()),
            }
        }
    }
    Ok(params)
}

fn save_prefixes(params: &ParamStore<f32>, prefixes: &[&str], path: &Path) -> Result<()> {
    let mut entries = NamedTensors::new();
    for p in prefixes {
        entries.extend(params.to_archive(p));
    }
    crate::archive::write_archive(&entries, path)?;
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    items: usize,
    vocab_size: usize,
    yes: usize,
    no: usize,
    color: usize,
}

#[derive(Serialize)]
struct FlopsOutput {
    preset: String,
    analytic: FlopsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    instrumented: Option<FlopsReport>,
    params: ParamCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    efficiency: Option<Efficiency>,
}

#[derive(Serialize)]
struct PcaSummary {
    rows: usize,
    explained_variance: [f64; 3],
    explained_ratio: [f64; 3],
}

const BREEZECLIP_AND_HEADS: [&str; 3] = [
    crate::text_encoder::PREFIX,
    crate::image_encoder::PREFIX,
    crate::alignment::PREFIX,
];

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData { common, items } => {
            let cfg = config_of(&common)?;
            let out = out_dir(&common)?;
            let spec = SynthSpec::default();
            let data = synth_dataset(cfg.seed, items, &spec, &ImagePrep::from_config(&cfg))?;
            export_dataset(&data, out)?;
            let png_dir = out.join("png");
            fs::create_dir_all(&png_dir).map_err(|e| Error::io(&png_dir, e))?;
            for it in &data {
                let raw = draw_scene(&it.graph, &it.placements, spec.raw_size);
                let (h, w, _) = raw.dim();
                let buf: Vec<u8> = raw
                    .iter()
                    .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                    .collect();
                let img = ::image::RgbImage::from_raw(w as u32, h as u32, buf).expect("rgb buffer");
                let path = png_dir.join(format!("{}.png", it.id));
                img.save(&path)
                    .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?;
            }
            let vocab = corpus_vocab(&data, &cfg)?;
            write_json(&out.join("vocab.json"), &vocab)?;
            let count = |a: &str| data.iter().filter(|it| it.answer == a).count();
            let (yes, no) = (count("yes"), count("no"));
            write_json(
                &out.join("synth_report.json"),
                &SynthSummary {
                    items: data.len(),
                    vocab_size: vocab.len(),
                    yes,
                    no,
                    color: data.len() - yes - no,
                },
            )
        }
        Command::Pretrain {
            common,
            data,
            teacher,
            verbose,
        } => {
            let cfg = config_of(&common)?;
            let out = out_dir(&common)?;
            let items = load_items(&cfg, &data, 64)?;
            let vocab = corpus_vocab(&items, &cfg)?;
            let teacher = match teacher {
                Some(path) => Teacher::load(path)?,
                None => Teacher::frozen(&cfg, cfg.seed),
            };
            let mut params = init_model::<f32>(&cfg);
            let opts = RunOptions {
                checkpoint_dir: Some(out.to_path_buf()),
                verbose,
            };
            let result = pretrain_stage1(&cfg, &mut params, &items, &vocab, &teacher, &opts)?;
            write_json(&out.join("vocab.json"), &vocab)?;
            cfg.save(out.join("config.json"))?;
            result.report.save(out.join("metrics.json"))
        }
        Command::Finetune {
            common,
            data,
            checkpoint,
            verbose,
        } => {
            let cfg = config_of(&common)?;
            let out = out_dir(&common)?;
            let vocab = read_vocab(&checkpoint)?;
            let items = load_items(&cfg, &data, 32)?;
            let mut params = load_model(&cfg, &checkpoint, &["stage1.bcqt"])?;
            let cache = cache_features(&cfg, &params, &items, &vocab)?;
            let opts = RunOptions {
                checkpoint_dir: Some(out.to_path_buf()),
                verbose,
            };
            let mut result = train_stage2(&cfg, &mut params, &cache, &opts)?;
            let (summary, predictions) = evaluate_vqa(&cfg, &params, &cache, &items, &vocab)?;
            result.report.eval = Some(summary);
            save_prefixes(&params, &BREEZECLIP_AND_HEADS, &out.join("stage1.bcqt"))?;
            write_json(&out.join("vocab.json"), &vocab)?;
            cfg.save(out.join("config.json"))?;
            write_jsonl(&out.join("predictions.jsonl"), &predictions)?;
            result.report.save(out.join("metrics.json"))
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let cfg = config_of(&common)?;
            let out = out_dir(&common)?;
            let vocab = read_vocab(&checkpoint)?;
            let items = load_items(&cfg, &data, 32)?;
            let params = load_model(&cfg, &checkpoint, &["stage1.bcqt", "stage2.bcqt"])?;
            let cache = cache_features(&cfg, &params, &items, &vocab)?;
            let (summary, predictions) = evaluate_vqa(&cfg, &params, &cache, &items, &vocab)?;
            write_jsonl(&out.join("predictions.jsonl"), &predictions)?;
            let report = MetricsReport {
                eval: Some(summary),
                ..Default::default()
            };
            report.save(out.join("eval.json"))
        }
        Command::Infer {
            common,
            checkpoint,
            image,
            question,
            max_new_tokens,
        } => {
            let cfg = config_of(&common)?;
            let vocab = read_vocab(&checkpoint)?;
            let params = load_model(&cfg, &checkpoint, &["stage1.bcqt", "stage2.bcqt"])?;
            let pixels = load_image_file(&image, &ImagePrep::from_config(&cfg))?;
            let max_new = max_new_tokens.unwrap_or(cfg.text_max_len);
            let answer = greedy_generate(&params, &cfg, &vocab, &pixels, &question, max_new)?;
            println!("{answer}");
            let out = out_dir(&common)?;
            write_json(
                &out.join("answer.json"),
                &serde_json::json!({ "question": question, "answer": answer }),
            )
        }
        Command::Flops {
            common,
            instrumented,
            timing,
        } => {
            let cfg = config_of(&common)?;
            let out = out_dir(&common)?;
            let needs_params = instrumented || timing;
            let params = needs_params.then(|| init_model::<f32>(&cfg));
            let report = FlopsOutput {
                preset: cfg.preset.clone(),
                analytic: flops_report(&cfg),
                instrumented: match (&params, instrumented) {
                    (Some(p), true) => Some(instrumented_flops(&cfg, p)?),
                    _ => None,
                },
                params: param_counts(&cfg),
                efficiency: match (&params, timing) {
                    (Some(p), true) => Some(crate::pipeline::measure_efficiency(&cfg, p, 5)?),
                    _ => None,
                },
            };
            let text = serde_json::to_string_pretty(&report).expect("report serialises");
            println!("{text}");
            write_json(&out.join("flops.json"), &report)
        }
        Command::PcaExport {
            common,
            data,
            checkpoint,
        } => {
            let cfg = config_of(&common)?;
            let out = out_dir(&common)?;
            let items = load_items(&cfg, &data, 64)?;
            let (params, vocab) = match &checkpoint {
                Some(dir) => (load_model(&cfg, dir, &["stage1.bcqt"])?, read_vocab(dir)?),
                None => (init_model::<f32>(&cfg), corpus_vocab(&items, &cfg)?),
            };
            let (img, txt) = breezeclip_embeddings(&cfg, &params, &items, &vocab)?;
            let rows = pca_rows(&items, &img, &txt)?;
            write_pca_csv(&rows.0, out.join("pca.csv"))?;
            write_json(&out.join("pca.json"), &rows.1)
        }
        Command::Gradcheck {
            common,
            component,
            tolerance,
            corrupt,
        } => {
            let cfg = config_of(&common)?;
            let out = out_dir(&common)?;
            let components: Vec<Component> = if component == "all" {
                Component::ALL.to_vec()
            } else {
                vec![component.parse()?]
            };
            let opts = GradCheckOptions {
                tolerance,
                corrupt,
                seed: cfg.seed,
                ..Default::default()
            };
            let started = Instant::now();
            let mut reports: Vec<GradCheckReport> = Vec::new();
            for c in components {
                let r = finite_diff_check(c, &opts)?;
                println!(
                    "{}: max relative error {:.3e} ({})",
                    r.component, r.max_rel_error, r.worst_tensor
                );
                reports.push(r);
            }
            eprintln!(
                "gradcheck finished in {:.1}s",
                started.elapsed().as_secs_f64()
            );
            write_json(&out.join("gradcheck.json"), &reports)
        }
    }
}

/// PCA rows for images followed by captions. A row is flagged as a positive
/// pair when its most similar embedding of the other modality is its own partner.
fn pca_rows(
    items: &[SynthItem],
    img: &ndarray::Array2<f64>,
    txt: &ndarray::Array2<f64>,
) -> Result<(Vec<PcaRow>, PcaSummary)> {
    let all = ndarray::concatenate(ndarray::Axis(0), &[img.view(), txt.view()])
        .map_err(|e| Error::shape(e.to_string()))?;
    let pca = pca3(&all)?;
    let unit = |m: &ndarray::Array2<f64>| {
        let mut m = m.clone();
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt().max(f64::MIN_POSITIVE);
            r /= n;
        }
        m
    };
    let sim = unit(img).dot(&unit(txt).t());
    let argmax = |v: ndarray::ArrayView1<f64>| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            })
            .0
    };
    let m = items.len();
    let mut rows = Vec::with_capacity(2 * m);
    for (modality, offset) in [("image", 0), ("text", m)] {
        for (i, it) in items.iter().enumerate() {
            let best = if offset == 0 {
                argmax(sim.row(i))
            } else {
                argmax(sim.column(i))
            };
            let c = pca.coords.row(offset + i);
            rows.push(PcaRow {
                id: it.id.clone(),
                modality: modality.to_string(),
                x: c[0],
                y: c[1],
                z: c[2],
                is_positive_pair: best == i,
            });
        }
    }
    Ok((
        rows,
        PcaSummary {
            rows: 2 * m,
            explained_variance: pca.explained_variance,
            explained_ratio: pca.explained_ratio,
        },
    ))
}
