use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, DatasetManifest, DefectKind, Label, ManifestRecord, CONFIG_FILE, MANIFEST_FILE};
use crate::error::{Error, Result};

/// Compact high-attenuation ellipse (D1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub radius: [f32; 2],
    pub contrast: [f32; 2],
}

/// Diffuse soft-edged blob (D2); `sigma` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub sigma: [f32; 2],
    pub contrast: [f32; 2],
}

/// Scattered cluster of small discs (D3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub count: [usize; 2],
    pub disc_radius: [f32; 2],
    pub spread: [f32; 2],
    pub contrast: [f32; 2],
}

/// Irregular polygonal speck (D6).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeckSpec {
    pub radius: [f32; 2],
    pub vertices: [usize; 2],
    pub contrast: [f32; 2],
}

/// Generator settings. Intensities are on a 0..1 scale, lengths in pixels
/// of the output image; `[lo, hi]` pairs are uniform ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub defective: usize,
    pub non_defective: usize,
    pub image_size: usize,
    pub base_level: [f32; 2],
    /// Peak amplitude of the low-frequency layering bands.
    pub band_amplitude: [f32; 2],
    /// Band wavelength as a fraction of the image size.
    pub band_wavelength: [f32; 2],
    /// Maximum tilt of the bands away from horizontal, degrees.
    pub band_tilt: f32,
    /// Peak amplitude of a linear intensity ramp across the image.
    pub ramp_amplitude: [f32; 2],
    /// Standard deviation of the oriented fiber texture.
    pub fiber_amplitude: [f32; 2],
    /// Length of the streaks making up the fiber texture.
    pub fiber_length: usize,
    /// Standard deviation of per-pixel sensor noise.
    pub sensor_noise: f32,
    pub defects_per_image: [usize; 2],
    pub kinds: Vec<DefectKind>,
    pub d1: EllipseSpec,
    pub d2: BlobSpec,
    pub d3: ClusterSpec,
    pub d6: SpeckSpec,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            defective: 242,
            non_defective: 236,
            image_size: 224,
            base_level: [0.35, 0.6],
            band_amplitude: [0.06, 0.32],
            band_wavelength: [0.2, 0.8],
            band_tilt: 15.0,
            ramp_amplitude: [0.0, 0.12],
            fiber_amplitude: [0.02, 0.04],
            fiber_length: 15,
            sensor_noise: 0.01,
            defects_per_image: [1, 3],
            kinds: DefectKind::VISIBLE.to_vec(),
            d1: EllipseSpec {
                radius: [8.0, 14.0],
                contrast: [0.14, 0.24],
            },
            d2: BlobSpec {
                sigma: [7.0, 11.0],
                contrast: [0.2, 0.3],
            },
            d3: ClusterSpec {
                count: [6, 20],
                disc_radius: [2.5, 4.5],
                spread: [12.0, 24.0],
                contrast: [0.14, 0.24],
            },
            d6: SpeckSpec {
                radius: [10.0, 16.0],
                vertices: [5, 9],
                contrast: [-0.28, -0.16],
            },
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<()> {
    if r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("range `{name}` has lo > hi: {r:?}")))
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::Config(format!("image size {} below 64", self.image_size)));
        }
        for (name, r) in [
            ("base_level", &self.base_level),
            ("band_amplitude", &self.band_amplitude),
            ("band_wavelength", &self.band_wavelength),
            ("ramp_amplitude", &self.ramp_amplitude),
            ("fiber_amplitude", &self.fiber_amplitude),
            ("d1.radius", &self.d1.radius),
            ("d1.contrast", &self.d1.contrast),
            ("d2.sigma", &self.d2.sigma),
            ("d2.contrast", &self.d2.contrast),
            ("d3.disc_radius", &self.d3.disc_radius),
            ("d3.spread", &self.d3.spread),
            ("d3.contrast", &self.d3.contrast),
            ("d6.radius", &self.d6.radius),
            ("d6.contrast", &self.d6.contrast),
        ] {
            check_range(name, r)?;
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("range `{name}` is not finite")));
            }
        }
        for (name, r) in [
            ("defects_per_image", &self.defects_per_image),
            ("d3.count", &self.d3.count),
            ("d6.vertices", &self.d6.vertices),
        ] {
            check_range(name, r)?;
        }
        if self.defects_per_image[0] == 0 {
            return Err(Error::Config("defective images need at least one defect".into()));
        }
        if self.d6.vertices[0] < 3 {
            return Err(Error::Config("specks need at least 3 vertices".into()));
        }
        if self.band_wavelength[0] <= 0.0 || self.d1.radius[0] <= 0.0 || self.d2.sigma[0] <= 0.0 {
            return Err(Error::Config("wavelengths, radii and sigmas must be positive".into()));
        }
        if self.sensor_noise < 0.0 || self.fiber_length == 0 {
            return Err(Error::Config("sensor noise must be >= 0 and fiber length >= 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("no defect kinds enabled".into()));
        }
        if let Some(k) = self.kinds.iter().find(|k| !k.is_visible()) {
            return Err(Error::Config(format!("{k:?} is not rendered by the generator")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f32; 2]) -> f32 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn uniform_count(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// Background render plus the defect layer drawn on top of it.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub background: Vec<f32>,
    pub defects: Vec<f32>,
    pub kinds: Vec<DefectKind>,
}

impl RenderedImage {
    pub fn quantized(&self) -> Vec<u8> {
        quantize(self.background.iter().zip(&self.defects).map(|(b, d)| b + d))
    }

    pub fn quantized_background(&self) -> Vec<u8> {
        quantize(self.background.iter().copied())
    }
}

fn quantize(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn render_background(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = cfg.image_size;
    let sf = s as f32;
    let base = uniform(rng, cfg.base_level);

    // layering bands: a few sinusoids along a near-vertical direction
    let tilt = uniform(rng, [-cfg.band_tilt, cfg.band_tilt]).to_radians();
    let (ny, nx) = (tilt.cos(), tilt.sin());
    let n_waves = rng.gen_range(2..=4);
    let waves: Vec<(f32, f32, f32)> = (0..n_waves)
        .map(|_| {
            let lambda = uniform(rng, cfg.band_wavelength) * sf;
            (rng.gen_range(0.3..1.0f32), 2.0 * PI / lambda, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let weight: f32 = waves.iter().map(|w| w.0).sum();
    let amp = uniform(rng, cfg.band_amplitude) / weight;

    let ramp = uniform(rng, cfg.ramp_amplitude);
    let ramp_dir = rng.gen_range(0.0..2.0 * PI);
    let (ry, rx) = (ramp_dir.sin(), ramp_dir.cos());

    // fiber texture: white noise smeared along the fiber direction
    let fiber_dir = tilt + rng.gen_range(-0.2..0.2f32);
    let (fy, fx) = (fiber_dir.sin(), fiber_dir.cos());
    let noise: Vec<f32> = (0..s * s).map(|_| normal(rng)).collect();
    let len = cfg.fiber_length as isize;
    let offsets: Vec<(isize, isize)> = (-len / 2..=len / 2)
        .map(|t| ((t as f32 * fy).round() as isize, (t as f32 * fx).round() as isize))
        .collect();
    let fiber_amp = uniform(rng, cfg.fiber_amplitude) / (offsets.len() as f32).sqrt();

    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (yf, xf) = (y as f32, x as f32);
            let u = yf * ny + xf * nx;
            let bands: f32 = waves.iter().map(|&(a, k, p)| a * (k * u + p).sin()).sum();
            let r = ((yf / sf - 0.5) * ry + (xf / sf - 0.5) * rx) * 2.0 * ramp;
            let mut fiber = 0.0;
            for &(dy, dx) in &offsets {
                let yy = (y as isize + dy).rem_euclid(s as isize) as usize;
                let xx = (x as isize + dx).rem_euclid(s as isize) as usize;
                fiber += noise[yy * s + xx];
            }
            out[y * s + x] = base + amp * bands + r + fiber_amp * fiber;
        }
    }
    for v in out.iter_mut() {
        *v += cfg.sensor_noise * normal(rng);
    }
    out
}

/// Soft coverage of a shape edge: 1 inside, 0 outside, linear over about
/// one pixel around `edge == 0` (positive inside, in pixels).
fn coverage(edge: f32) -> f32 {
    (edge + 0.5).clamp(0.0, 1.0)
}

fn draw_ellipse(layer: &mut [f32], s: usize, cy: f32, cx: f32, ry: f32, rx: f32, angle: f32, c: f32) {
    let (sa, ca) = angle.sin_cos();
    let r = ry.max(rx);
    let (y0, y1) = ((cy - r - 2.0).max(0.0) as usize, ((cy + r + 2.0) as usize).min(s - 1));
    let (x0, x1) = ((cx - r - 2.0).max(0.0) as usize, ((cx + r + 2.0) as usize).min(s - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let (u, v) = (dx * ca + dy * sa, -dx * sa + dy * ca);
            let d = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
            let w = coverage((1.0 - d) * ry.min(rx));
            layer[y * s + x] += c * w;
        }
    }
}

fn draw_blob(layer: &mut [f32], s: usize, cy: f32, cx: f32, sy: f32, sx: f32, c: f32) {
    let reach = 3.5 * sy.max(sx);
    let (y0, y1) = ((cy - reach).max(0.0) as usize, ((cy + reach) as usize).min(s - 1));
    let (x0, x1) = ((cx - reach).max(0.0) as usize, ((cx + reach) as usize).min(s - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = ((y as f32 - cy) / sy, (x as f32 - cx) / sx);
            layer[y * s + x] += c * (-0.5 * (dy * dy + dx * dx)).exp();
        }
    }
}

fn inside(poly: &[(f32, f32)], y: f32, x: f32) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn draw_polygon(layer: &mut [f32], s: usize, poly: &[(f32, f32)], c: f32) {
    let (mut y0, mut y1, mut x0, mut x1) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
    for &(y, x) in poly {
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let (y0, y1) = (y0.max(0.0) as usize, (y1.ceil() as usize).min(s - 1));
    let (x0, x1) = (x0.max(0.0) as usize, (x1.ceil() as usize).min(s - 1));
    // 4x4 supersampling for the edges
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let py = y as f32 + (sy as f32 + 0.5) / 4.0 - 0.5;
                    let px = x as f32 + (sx as f32 + 0.5) / 4.0 - 0.5;
                    hits += usize::from(inside(poly, py, px));
                }
            }
            layer[y * s + x] += c * hits as f32 / 16.0;
        }
    }
}

fn draw_defect(cfg: &GeneratorConfig, kind: DefectKind, layer: &mut [f32], rng: &mut ChaCha8Rng) {
    let s = cfg.image_size;
    let margin = (s as f32 * 0.1).max(12.0);
    let cy = rng.gen_range(margin..s as f32 - margin);
    let cx = rng.gen_range(margin..s as f32 - margin);
    match kind {
        DefectKind::D1 => {
            let r = uniform(rng, cfg.d1.radius);
            let aspect = rng.gen_range(0.6..1.0f32);
            let angle = rng.gen_range(0.0..PI);
            let c = uniform(rng, cfg.d1.contrast);
            draw_ellipse(layer, s, cy, cx, r * aspect, r, angle, c);
        }
        DefectKind::D2 => {
            let sigma = uniform(rng, cfg.d2.sigma);
            let aspect = rng.gen_range(0.7..1.0f32);
            let c = uniform(rng, cfg.d2.contrast);
            draw_blob(layer, s, cy, cx, sigma * aspect, sigma, c);
        }
        DefectKind::D3 => {
            let n = uniform_count(rng, cfg.d3.count);
            let spread = uniform(rng, cfg.d3.spread);
            let c = uniform(rng, cfg.d3.contrast);
            for _ in 0..n {
                let dy = (normal(rng) * spread / 2.0).clamp(-spread, spread);
                let dx = (normal(rng) * spread / 2.0).clamp(-spread, spread);
                let r = uniform(rng, cfg.d3.disc_radius);
                let ci = c * rng.gen_range(0.8..1.2f32);
                draw_ellipse(layer, s, cy + dy, cx + dx, r, r, 0.0, ci);
            }
        }
        DefectKind::D6 => {
            let n = uniform_count(rng, cfg.d6.vertices);
            let r = uniform(rng, cfg.d6.radius);
            let c = uniform(rng, cfg.d6.contrast);
            let mut angles: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            angles.sort_by(f32::total_cmp);
            let poly: Vec<(f32, f32)> = angles
                .iter()
                .map(|&a| {
                    let rr = r * rng.gen_range(0.45..1.0f32);
                    (cy + rr * a.sin(), cx + rr * a.cos())
                })
                .collect();
            draw_polygon(layer, s, &poly, c);
        }
        DefectKind::D4 | DefectKind::D5 => unreachable!("validated away"),
    }
}

/// Largest 4x4-window mean absolute difference between the quantized
/// defective image and its quantized background.
fn visible_signal(img: &RenderedImage, s: usize) -> f32 {
    let a = img.quantized();
    let b = img.quantized_background();
    let diff: Vec<f32> = a.iter().zip(&b).map(|(&p, &q)| (p as f32 - q as f32).abs()).collect();
    let mut best: f32 = 0.0;
    for y in 0..s - 3 {
        for x in 0..s - 3 {
            let mut sum = 0.0;
            for dy in 0..4 {
                sum += diff[(y + dy) * s + x..(y + dy) * s + x + 4].iter().sum::<f32>();
            }
            best = best.max(sum / 16.0);
        }
    }
    best
}

/// Noise floor on the 0..255 scale that a defect must clear somewhere.
fn noise_floor(cfg: &GeneratorConfig) -> f32 {
    (3.0 * cfg.sensor_noise * 255.0).max(2.0)
}

/// Renders one image from its own seed. Defective renders are redrawn
/// until the defect layer clears the noise floor against the background.
pub fn render_image(cfg: &GeneratorConfig, label: Label, seed: u64) -> Result<RenderedImage> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let background = render_background(cfg, &mut rng);
    if label == Label::NonDefective {
        return Ok(RenderedImage {
            background,
            defects: vec![0.0; s * s],
            kinds: vec![],
        });
    }
    for _ in 0..32 {
        let n = uniform_count(&mut rng, cfg.defects_per_image);
        let mut layer = vec![0.0; s * s];
        let mut kinds = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = *cfg.kinds.choose(&mut rng).expect("validated non-empty");
            draw_defect(cfg, kind, &mut layer, &mut rng);
            kinds.push(kind);
        }
        kinds.sort();
        kinds.dedup();
        let img = RenderedImage {
            background: background.clone(),
            defects: layer,
            kinds,
        };
        if visible_signal(&img, s) > noise_floor(cfg) {
            return Ok(img);
        }
    }
    Err(Error::Invariant(format!(
        "seed {seed}: no defect render cleared the noise floor; contrast ranges are too low"
    )))
}

/// Writes `images/NNNN.png`, `manifest.jsonl` and `config.json` under
/// `out_dir`. Labels are shuffled over the indices; image `i` is rendered
/// from `derive_seed(seed, i)` alone, so output does not depend on order.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let n = cfg.defective + cfg.non_defective;
    let mut labels: Vec<Label> = std::iter::repeat(Label::Defective)
        .take(cfg.defective)
        .chain(std::iter::repeat(Label::NonDefective).take(cfg.non_defective))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let width = n.to_string().len().max(4);
    let mut records = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let img_seed = derive_seed(seed, i as u64);
        let img = render_image(cfg, label, img_seed)?;
        let rel = format!("images/{i:0width$}.png");
        let path = out_dir.join(&rel);
        let s = cfg.image_size as u32;
        image::GrayImage::from_raw(s, s, img.quantized())
            .expect("buffer matches size")
            .save_with_format(&path, image::ImageFormat::Png)?;
        records.push(ManifestRecord {
            path: rel,
            label,
            defects: img.kinds,
            seed: img_seed,
            fold: None,
        });
    }
    let manifest = DatasetManifest {
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}
