//! Foreground extraction and canvas resizing for raw mammograms.

use image::{ImageBuffer, Luma};
use imageproc::region_labelling::{connected_components, Connectivity};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{resize_image, Image2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Canvas width and height.
    pub target: (usize, usize),
    /// Foreground threshold as a fraction of the intensity range.
    pub threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target: (1664, 2048), threshold: 0.05 }
    }
}

/// Mask of the largest 8-connected component above the threshold.
pub fn largest_component_mask(raw: &Image2D, threshold: f64) -> Result<Vec<bool>> {
    let (h, w) = raw.shape();
    let (lo, hi) = raw.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return Err(Error::Preprocess("image has no foreground".into()));
    }
    let cut = lo + threshold * (hi - lo);
    let binary: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([u8::from(raw.get(x as usize, y as usize) > cut)]));
    let labels = connected_components(&binary, Connectivity::Eight, Luma([0u8]));
    let mut sizes = vec![0usize; 1];
    for p in labels.pixels() {
        let l = p[0] as usize;
        if l >= sizes.len() {
            sizes.resize(l + 1, 0);
        }
        sizes[l] += 1;
    }
    let best = (1..sizes.len()).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))).filter(|&l| sizes[l] > 0);
    let best = best.ok_or_else(|| Error::Preprocess("image has no foreground".into()))? as u32;
    Ok(labels.pixels().map(|p| p[0] == best).collect())
}

/// Keeps the largest foreground component, fits it into the canvas without
/// changing the aspect ratio (top-left anchored, zero padding) and rescales
/// to [0, 1].
pub fn preprocess_image(raw: &Image2D, cfg: &PreprocessConfig) -> Result<Image2D> {
    let (tw, th) = cfg.target;
    if tw == 0 || th == 0 {
        return Err(Error::config("preprocess target must be non-empty"));
    }
    let mask = largest_component_mask(raw, cfg.threshold)?;
    let (h, w) = raw.shape();
    let masked = Image2D::new(h, w, raw.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect())?;
    let scale = (tw as f64 / w as f64).min(th as f64 / h as f64);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, th);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, tw);
    let resized = resize_image(&masked, nh, nw)?;
    let mut canvas = vec![0.0; th * tw];
    for y in 0..nh {
        canvas[y * tw..y * tw + nw].copy_from_slice(&resized.data()[y * nw..(y + 1) * nw]);
    }
    Ok(Image2D::new(th, tw, canvas)?.normalized())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_image_fails() {
        let img = Image2D::constant(8, 8, 0.3).unwrap();
        assert!(matches!(preprocess_image(&img, &PreprocessConfig::default()), Err(Error::Preprocess(_))));
    }

    #[test]
    fn output_on_canvas() {
        let img = Image2D::from_fn(20, 10, |x, y| if (2..8).contains(&x) && (3..17).contains(&y) { 1.0 } else { 0.0 }).unwrap();
        let out = preprocess_image(&img, &PreprocessConfig { target: (30, 40), threshold: 0.05 }).unwrap();
        assert_eq!(out.shape(), (40, 30));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
