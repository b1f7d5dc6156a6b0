use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine statistics of matched and mismatched image/text pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub pos_mean: f64,
    pub neg_mean: f64,
    /// `pos_mean - neg_mean`.
    pub gap: f64,
}

fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Mean diagonal and mean off-diagonal cosine similarity of `image · textᵀ`.
pub fn cosine_metrics(image: &Array2<f64>, text: &Array2<f64>) -> Result<CosineStats> {
    if image.dim() != text.dim() {
        return Err(Error::Metrics(format!(
            "embedding shapes differ: {:?} vs {:?}",
            image.dim(),
            text.dim()
        )));
    }
    let b = image.nrows();
    if b < 2 {
        return Err(Error::Metrics(
            "negative pairs need a batch of at least 2".into(),
        ));
    }
    let sim = normalize_rows(image).dot(&normalize_rows(text).t());
    let trace: f64 = sim.diag().sum();
    let total = sim.sum();
    let pos_mean = trace / b as f64;
    let neg_mean = (total - trace) / (b * (b - 1)) as f64;
    Ok(CosineStats {
        pos_mean,
        neg_mean,
        gap: pos_mean - neg_mean,
    })
}

/// Lowercases, drops punctuation and the articles `a`, `an`, `the`, and
/// collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fraction of predictions whose normalised form equals the normalised reference.
pub fn vqa_accuracy<S: AsRef<str>, R: AsRef<str>>(
    predictions: &[S],
    references: &[R],
) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Metrics(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Metrics("no predictions to score".into()));
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| {
            let p = normalize_answer(p.as_ref());
            !p.is_empty() && p == normalize_answer(r.as_ref())
        })
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as columns.
fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        vectors.column_mut(col).assign(&v.column(i));
    }
    (values, vectors)
}

/// Three-component principal projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `[M, 3]` coordinates of the centred data.
    pub coords: Array2<f64>,
    /// `[d, 3]` unit principal directions.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
    /// Sample variance along each direction, non-increasing.
    pub explained_variance: [f64; 3],
    /// `explained_variance / total variance`.
    pub explained_ratio: [f64; 3],
}

/// Centres `x` (`[M, d]`, `M >= 4`) and projects it onto its top three
/// principal directions. Each direction's first non-negligible loading is positive.
pub fn pca3(x: &Array2<f64>) -> Result<Pca> {
    let (m, d) = x.dim();
    if m < 4 {
        return Err(Error::DegenerateData(format!(
            "PCA needs at least 4 rows, got {m}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("non-finite embedding value".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centred = x - &mean;
    let cov = centred.t().dot(&centred) / (m - 1) as f64;
    let total: f64 = cov.diag().sum();
    if total <= 1e-300 {
        return Err(Error::DegenerateData("all rows are identical".into()));
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let k = d.min(3);
    let mut components = Array2::zeros((d, 3));
    let mut explained_variance = [0.0; 3];
    let tol = 1e-12;
    for c in 0..k {
        let mut col = vectors.column(c).to_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > tol) {
            if *first < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
        components.column_mut(c).assign(&col);
        explained_variance[c] = values[c].max(0.0);
    }
    let coords = centred.dot(&components);
    let explained_ratio = explained_variance.map(|v| v / total);
    Ok(Pca {
        coords,
        components,
        mean,
        explained_variance,
        explained_ratio,
    })
}

/// One CSV row of a PCA export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub id: String,
    pub modality: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub is_positive_pair: bool,
}

pub fn write_pca_csv(rows: &[PcaRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    /// 0-based epoch; `None` for the evaluation before any update.
    pub epoch: Option<usize>,
    /// Loss over the whole training set after the epoch's updates.
    pub loss: f64,
    /// Mean loss of the epoch's optimisation steps; `None` before training.
    pub step_loss: Option<f64>,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
    pub gap: Option<f64>,
    pub lr: f64,
}

/// Exact-match evaluation of generated answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub items: usize,
    pub correct: usize,
    pub vqa_accuracy: f64,
    /// Mean generation loss with every item's own image.
    pub matched_loss: f64,
    /// Mean generation loss with images rolled by one position.
    pub shuffled_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub flops_per_sample: u64,
    pub latency_ms_per_sample: f64,
    pub peak_activation_bytes: usize,
}

/// Everything a training or evaluation command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub records: Vec<EpochRecord>,
    pub cosine: Option<CosineStats>,
    pub eval: Option<EvalSummary>,
    pub efficiency: Option<Efficiency>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
