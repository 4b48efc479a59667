use serde::{Deserialize, Serialize};

use super::{load_gray, DatasetManifest, Image, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub window: usize,
    /// (threshold, accuracy) in sweep order.
    pub rows: Vec<(f64, f64)>,
    pub best_threshold: f64,
    pub best_accuracy: f64,
}

/// Largest absolute difference between any `window`x`window` mean and the
/// image's global mean, via a summed-area table.
pub fn window_deviation(img: &Image, window: usize) -> Result<f64> {
    let (h, w) = (img.height, img.width);
    if window == 0 || window > h || window > w {
        return Err(Error::Config(format!("window {window} does not fit a {h}x{w} image")));
    }
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img.pixels[y * w + x] as f64;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let global = sat[h * (w + 1) + w] / (h * w) as f64;
    let area = (window * window) as f64;
    let mut worst: f64 = 0.0;
    for y in 0..=h - window {
        for x in 0..=w - window {
            let (y1, x1) = (y + window, x + window);
            let s = sat[y1 * (w + 1) + x1] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + x] + sat[y * (w + 1) + x];
            worst = worst.max((s / area - global).abs());
        }
    }
    Ok(worst)
}

/// Accuracy per threshold for precomputed per-image deviations: an image
/// is called defective when its deviation exceeds the threshold.
pub fn threshold_sweep(deviations: &[f64], labels: &[Label], window: usize, thresholds: &[f64]) -> Result<BaselineReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold sweep needs at least one threshold".into()));
    }
    if deviations.is_empty() || deviations.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} deviations for {} labels",
            deviations.len(),
            labels.len()
        )));
    }
    let rows: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let correct = deviations
                .iter()
                .zip(labels)
                .filter(|(&d, &l)| (d > t) == (l == Label::Defective))
                .count();
            (t, correct as f64 / labels.len() as f64)
        })
        .collect();
    let &(best_threshold, best_accuracy) = rows
        .iter()
        .fold(&rows[0], |best, r| if r.1 > best.1 { r } else { best });
    Ok(BaselineReport {
        window,
        rows,
        best_threshold,
        best_accuracy,
    })
}

/// Intensity-threshold classifier over a manifest's images (0..=255 scale),
/// swept over `thresholds`.
pub fn threshold_baseline(manifest: &DatasetManifest, window: usize, thresholds: &[f64]) -> Result<BaselineReport> {
    let labels: Vec<Label> = manifest.records.iter().map(|r| r.label).collect();
    let mut devs = Vec::with_capacity(labels.len());
    for r in &manifest.records {
        devs.push(window_deviation(&load_gray(&manifest.image_path(r))?, window)?);
    }
    threshold_sweep(&devs, &labels, window, thresholds)
}
