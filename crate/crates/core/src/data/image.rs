use std::path::Path;

use ndarray::{Array3, ArrayView3};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Resize target and per-channel normalisation constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePrep {
    pub resolution: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ImagePrep {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            resolution: cfg.image_resolution,
            mean: cfg.norm_mean,
            std: cfg.norm_std,
        }
    }
}

/// Bilinear resize (half-pixel centres) of an `H x W x 3` image with values in
/// `[0, 255]`, then `(x / 255 - mean_c) / std_c`. Output is `3 x R x R`.
pub fn preprocess_image(raw: ArrayView3<'_, f32>, prep: &ImagePrep) -> Result<Array3<f32>> {
    let (h, w, c) = raw.dim();
    if c != 3 {
        return Err(Error::ImageFormat(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::ImageFormat("empty image".into()));
    }
    let r = prep.resolution;
    let sample = |out: usize, len_in: usize| -> (usize, usize, f64) {
        let scale = len_in as f64 / r as f64;
        let src = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len_in - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Array3::<f32>::zeros((3, r, r));
    for oy in 0..r {
        let (y0, y1, fy) = sample(oy, h);
        for ox in 0..r {
            let (x0, x1, fx) = sample(ox, w);
            for ch in 0..3 {
                let p = |y: usize, x: usize| raw[[y, x, ch]] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[[ch, oy, ox]] = ((v / 255.0 - prep.mean[ch]) / prep.std[ch]) as f32;
            }
        }
    }
    Ok(out)
}

/// Reads a PNG/PNM file and preprocesses it.
pub fn load_image_file(path: impl AsRef<Path>, prep: &ImagePrep) -> Result<Array3<f32>> {
    let path = path.as_ref();
    let img = ::image::open(path)
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = Array3::from_shape_vec(
        (h as usize, w as usize, 3),
        img.into_raw().into_iter().map(f32::from).collect(),
    )
    .expect("rgb buffer matches dimensions");
    preprocess_image(raw.view(), prep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prep(resolution: usize, mean: f64, std: f64) -> ImagePrep {
        ImagePrep {
            resolution,
            mean: [mean; 3],
            std: [std; 3],
        }
    }

    #[test]
    fn constant_gray_maps_to_constant() {
        let raw = Array3::<f32>::from_elem((10, 13, 3), 127.5);
        let p = ImagePrep {
            resolution: 7,
            mean: [0.481, 0.458, 0.408],
            std: [0.269, 0.261, 0.276],
        };
        let out = preprocess_image(raw.view(), &p).unwrap();
        for ch in 0..3 {
            let expected = ((0.5 - p.mean[ch]) / p.std[ch]) as f32;
            assert!(out
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .all(|&v| (v - expected).abs() < 1e-6));
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let raw = Array3::from_shape_fn((5, 5, 3), |(y, x, c)| (y * 31 + x * 7 + c * 50) as f32);
        let out = preprocess_image(raw.view(), &prep(5, 0.0, 1.0)).unwrap();
        for ((y, x, c), &v) in raw.indexed_iter() {
            assert_eq!(out[[c, y, x]], (v as f64 / 255.0) as f32);
        }
    }

    #[test]
    fn wrong_channel_count() {
        let raw = Array3::<f32>::zeros((4, 4, 1));
        assert!(matches!(
            preprocess_image(raw.view(), &prep(4, 0.0, 1.0)),
            Err(Error::ImageFormat(_))
        ));
    }
}
