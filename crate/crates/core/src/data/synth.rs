use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{preprocess_image, ImagePrep};
use super::scene::{converse_predicate, render_caption, Relation, SceneGraph, SceneObject};
use crate::archive::{read_archive, write_archive, NamedTensors, TensorData};
use crate::error::{Error, Result};
use crate::params::{derive_seed, mix64};

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 80, 225]),
    ("yellow", [230, 210, 40]),
    ("white", [235, 235, 235]),
    ("purple", [150, 60, 190]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Wide,
    Tall,
    Triangle,
    Diamond,
}

const CATEGORIES: [(&str, Shape); 6] = [
    ("ball", Shape::Circle),
    ("box", Shape::Square),
    ("book", Shape::Wide),
    ("bottle", Shape::Tall),
    ("cone", Shape::Triangle),
    ("kite", Shape::Diamond),
];

pub const PREDICATES: [&str; 4] = ["to the left of", "to the right of", "above", "below"];

/// Minimum vertical offset (in canvas units) for an above/below relation.
const VERTICAL_MARGIN: f64 = 0.15;
const BACKGROUND: [f32; 3] = [45.0, 45.0, 50.0];

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side of the drawn canvas before resizing.
    pub raw_size: usize,
    pub color_question_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 2,
            raw_size: 96,
            color_question_prob: 0.5,
        }
    }
}

/// Object centre and half-size in unit canvas coordinates (y grows downwards).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub id: u32,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub graph: SceneGraph,
    pub placements: Vec<Placement>,
    pub caption: String,
    pub question: String,
    pub answer: String,
    /// `3 x R x R`, normalised.
    pub image: Array3<f32>,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    id: String,
    graph: SceneGraph,
    placements: Vec<Placement>,
    caption: String,
    question: String,
    answer: String,
}

fn shape_of(category: &str) -> Shape {
    CATEGORIES
        .iter()
        .find(|(c, _)| *c == category)
        .map(|(_, s)| *s)
        .unwrap_or(Shape::Square)
}

fn color_of(name: &str) -> [u8; 3] {
    COLORS
        .iter()
        .find(|(c, _)| *c == name)
        .map(|(_, rgb)| *rgb)
        .unwrap_or([128, 128, 128])
}

fn inside(shape: Shape, dx: f64, dy: f64, s: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= s * s,
        Shape::Square => dx.abs() <= s && dy.abs() <= s,
        Shape::Wide => dx.abs() <= 1.3 * s && dy.abs() <= 0.7 * s,
        Shape::Tall => dx.abs() <= 0.5 * s && dy.abs() <= 1.3 * s,
        Shape::Triangle => dy.abs() <= s && dx.abs() <= 0.5 * (dy + s),
        Shape::Diamond => dx.abs() + dy.abs() <= 1.2 * s,
    }
}

/// Draws the scene on a `raw_size x raw_size x 3` canvas with values in `[0, 255]`.
pub fn draw_scene(graph: &SceneGraph, placements: &[Placement], raw_size: usize) -> Array3<f32> {
    let mut canvas = Array3::<f32>::zeros((raw_size, raw_size, 3));
    for ((y, _, c), v) in canvas.indexed_iter_mut() {
        // faint vertical gradient so the background is not perfectly flat
        *v = BACKGROUND[c] + 10.0 * y as f32 / raw_size as f32;
    }
    for p in placements {
        let Some(obj) = graph.object(p.id) else {
            continue;
        };
        let shape = shape_of(&obj.category);
        let rgb = obj
            .attributes
            .first()
            .map_or([128, 128, 128], |c| color_of(c));
        for py in 0..raw_size {
            let uy = (py as f64 + 0.5) / raw_size as f64;
            for px in 0..raw_size {
                let ux = (px as f64 + 0.5) / raw_size as f64;
                if inside(shape, ux - p.cx, uy - p.cy, p.size) {
                    for c in 0..3 {
                        canvas[[py, px, c]] = rgb[c] as f32;
                    }
                }
            }
        }
    }
    canvas
}

fn horizontal(a: &Placement, b: &Placement) -> &'static str {
    if a.cx < b.cx {
        "to the left of"
    } else {
        "to the right of"
    }
}

fn vertical(a: &Placement, b: &Placement) -> Option<&'static str> {
    if a.cy + VERTICAL_MARGIN < b.cy {
        Some("above")
    } else if b.cy + VERTICAL_MARGIN < a.cy {
        Some("below")
    } else {
        None
    }
}

/// Answer to a spatial question read directly off the object geometry.
fn geometric_truth(a: &Placement, predicate: &str, b: &Placement) -> bool {
    match predicate {
        "to the left of" => a.cx < b.cx,
        "to the right of" => a.cx > b.cx,
        "above" => a.cy + VERTICAL_MARGIN < b.cy,
        "below" => b.cy + VERTICAL_MARGIN < a.cy,
        _ => false,
    }
}

fn generate_item(seed: u64, index: usize, spec: &SynthSpec, prep: &ImagePrep) -> Result<SynthItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ derive_seed(index as u64, "synth-item")));
    let n = rng.random_range(spec.min_objects..=spec.max_objects.max(spec.min_objects));
    let n = n.clamp(1, 3);

    let mut categories: Vec<usize> = (0..CATEGORIES.len()).collect();
    categories.shuffle(&mut rng);
    let mut columns = [0usize, 1, 2];
    columns.shuffle(&mut rng);

    let mut objects = Vec::with_capacity(n);
    let mut placements = Vec::with_capacity(n);
    for id in 0..n as u32 {
        let (category, _) = CATEGORIES[categories[id as usize]];
        let (color, _) = COLORS[rng.random_range(0..COLORS.len())];
        objects.push(SceneObject {
            id,
            category: category.to_string(),
            attributes: vec![color.to_string()],
        });
        placements.push(Placement {
            id,
            cx: (columns[id as usize] as f64 + 0.5) / 3.0 + rng.random_range(-0.04..0.04),
            cy: rng.random_range(0.3..0.7),
            size: rng.random_range(0.11..0.15),
        });
    }

    let mut relations = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&placements[i], &placements[j]);
            relations.push(Relation {
                subject: a.id,
                predicate: horizontal(a, b).to_string(),
                object: b.id,
            });
            if let Some(v) = vertical(a, b) {
                relations.push(Relation {
                    subject: a.id,
                    predicate: v.to_string(),
                    object: b.id,
                });
            }
        }
    }
    let graph = SceneGraph { objects, relations };
    let caption = render_caption(&graph)?;

    let (question, answer) = if n < 2 || rng.random_bool(spec.color_question_prob) {
        let o = &graph.objects[rng.random_range(0..n)];
        (
            format!("what color is the {}?", o.category),
            o.attributes[0].clone(),
        )
    } else {
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        let predicate = PREDICATES[rng.random_range(0..PREDICATES.len())];
        let truth = geometric_truth(&placements[i], predicate, &placements[j]);
        (
            format!(
                "is the {} {predicate} the {}?",
                graph.objects[i].category, graph.objects[j].category
            ),
            if truth { "yes" } else { "no" }.to_string(),
        )
    };

    let raw = draw_scene(&graph, &placements, spec.raw_size);
    let image = preprocess_image(raw.view(), prep)?;
    Ok(SynthItem {
        id: format!("item-{index:05}"),
        graph,
        placements,
        caption,
        question,
        answer,
        image,
    })
}

/// Generates `n_items` scenes. Item `i` depends only on `(seed, i)`.
pub fn synth_dataset(
    seed: u64,
    n_items: usize,
    spec: &SynthSpec,
    prep: &ImagePrep,
) -> Result<Vec<SynthItem>> {
    if n_items == 0 {
        return Err(Error::Value("n_items must be >= 1".into()));
    }
    (0..n_items)
        .map(|i| generate_item(seed, i, spec, prep))
        .collect()
}

/// Rule-based answer computed from the scene graph alone.
pub fn oracle_answer(graph: &SceneGraph, question: &str) -> Option<String> {
    let q = question.trim().trim_end_matches('?');
    if let Some(category) = q.strip_prefix("what color is the ") {
        return graph
            .find_category(category)
            .and_then(|o| o.attributes.first().cloned());
    }
    let body = q.strip_prefix("is the ")?;
    for predicate in PREDICATES {
        let Some((a, b)) = body.split_once(&format!(" {predicate} the ")) else {
            continue;
        };
        let (a, b) = (graph.find_category(a)?, graph.find_category(b)?);
        let converse = converse_predicate(predicate)?;
        let holds = graph.relations.iter().any(|r| {
            (r.subject == a.id && r.object == b.id && r.predicate == predicate)
                || (r.subject == b.id && r.object == a.id && r.predicate == converse)
        });
        return Some(if holds { "yes" } else { "no" }.to_string());
    }
    None
}

/// Writes `dataset.jsonl` (graphs, questions, answers) and `images.bcqt`.
pub fn export_dataset(items: &[SynthItem], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jsonl = dir.join("dataset.jsonl");
    let mut out = Vec::new();
    let mut images = NamedTensors::new();
    for it in items {
        let rec = ItemRecord {
            id: it.id.clone(),
            graph: it.graph.clone(),
            placements: it.placements.clone(),
            caption: it.caption.clone(),
            question: it.question.clone(),
            answer: it.answer.clone(),
        };
        serde_json::to_writer(&mut out, &rec).expect("record serialises");
        out.push(b'\n');
        images.insert(
            format!("image/{}", it.id),
            TensorData::F32(it.image.clone().into_dyn()),
        );
    }
    fs::File::create(&jsonl)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(&jsonl, e))?;
    write_archive(&images, dir.join("images.bcqt"))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SynthItem>> {
    let dir = dir.as_ref();
    let jsonl = dir.join("dataset.jsonl");
    let file = fs::File::open(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut images: BTreeMap<String, TensorData> = read_archive(dir.join("images.bcqt"))?;
    let mut items = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&jsonl, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Value(format!("{}: {e}", jsonl.display())))?;
        let key = format!("image/{}", rec.id);
        let image = match images.remove(&key) {
            Some(TensorData::F32(a)) => to_image(a, &key)?,
            Some(_) => return Err(Error::ArchiveFormat(format!("`{key}` is not f32"))),
            None => return Err(Error::Value(format!("no image stored for `{}`", rec.id))),
        };
        items.push(SynthItem {
            id: rec.id,
            graph: rec.graph,
            placements: rec.placements,
            caption: rec.caption,
            question: rec.question,
            answer: rec.answer,
            image,
        });
    }
    Ok(items)
}

fn to_image(a: ArrayD<f32>, key: &str) -> Result<Array3<f32>> {
    a.into_dimensionality()
        .map_err(|_| Error::shape(format!("`{key}` is not a 3-D image")))
}
