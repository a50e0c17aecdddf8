//! Seeded synthetic lesion corpus for desk-scale experiments.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::io::{save_image_png, save_mask_png};
use crate::data::{preprocess, Dataset, Image, Mask, PreprocessConfig, PreprocessMode, RawSample};
use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: usize,
    /// Lesions drawn per image.
    pub lesions: usize,
    /// Target mean foreground pixel fraction.
    pub fg_fraction: f64,
    /// Relative spread of lesion area around the target, uniform in `1 ± area_jitter`.
    pub area_jitter: f64,
    /// Smallest minor/major axis ratio of the ellipses.
    pub min_aspect: f64,
    pub background: [f64; 3],
    /// Lesion colour for each image-level class; the class is drawn uniformly.
    pub lesion_colors: Vec<[f64; 3]>,
    /// Uniform per-image colour jitter applied to lesion and background.
    pub intensity_jitter: f64,
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 200,
            image_size: 64,
            lesions: 1,
            fg_fraction: 0.2,
            area_jitter: 0.3,
            min_aspect: 0.6,
            background: [0.82, 0.62, 0.52],
            lesion_colors: vec![[0.42, 0.26, 0.2], [0.62, 0.2, 0.24]],
            intensity_jitter: 0.05,
            texture: 0.04,
            noise: 0.03,
            seed: 2024,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.image_size < 8 || self.lesions == 0 {
            return Err(config("synthetic corpus needs images ≥ 1, size ≥ 8 and lesions ≥ 1"));
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction * (1.0 + self.area_jitter) < 0.45) {
            return Err(config("foreground fraction must lie in (0, 0.45) including jitter"));
        }
        if !(0.0..1.0).contains(&self.area_jitter) || !(self.min_aspect > 0.0 && self.min_aspect <= 1.0) {
            return Err(config("area_jitter must lie in [0, 1) and min_aspect in (0, 1]"));
        }
        if self.lesion_colors.is_empty() || self.noise < 0.0 || self.texture < 0.0 {
            return Err(config("need at least one lesion colour and non-negative noise/texture"));
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn one_sample(spec: &SyntheticSpec, index: usize, rng: &mut ChaCha8Rng) -> RawSample {
    let s = spec.image_size;
    let class = rng.random_range(0..spec.lesion_colors.len());
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-spec.intensity_jitter..=spec.intensity_jitter);
    let bg: Vec<f64> = spec.background.iter().map(|c| c + jitter(rng)).collect();
    let fg: Vec<f64> = spec.lesion_colors[class].iter().map(|c| c + jitter(rng)).collect();

    let per_lesion = spec.fg_fraction / spec.lesions as f64;
    let ellipses: Vec<Ellipse> = (0..spec.lesions)
        .map(|_| {
            let area = per_lesion * rng.random_range(1.0 - spec.area_jitter..=1.0 + spec.area_jitter) * (s * s) as f64;
            let aspect = rng.random_range(spec.min_aspect..=1.0);
            let a = (area / (std::f64::consts::PI * aspect)).sqrt();
            let b = a * aspect;
            let margin = a + 1.0;
            let lo = margin.min(s as f64 / 2.0);
            let hi = (s as f64 - margin).max(lo);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(lo..=hi),
                cx: rng.random_range(lo..=hi),
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();

    let phases: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let freq = std::f64::consts::TAU / s as f64;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    let mut mask = Mask::filled(s, s, 1, 0);
    let mut image = Image::filled(s, s, 3, 0.0);
    for y in 0..s {
        for x in 0..s {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = ellipses.iter().any(|e| e.contains(fy, fx));
            let tex = spec.texture
                * 0.5
                * ((2.0 * freq * fy + phases[0]).sin() + (3.0 * freq * fx + phases[1]).sin());
            let base = if inside { &fg } else { &bg };
            for (c, &b) in base.iter().enumerate() {
                let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                image.set(y, x, c, quantize(b + tex + n));
            }
            if inside {
                mask.set(y, x, 0, 1);
            }
        }
    }
    RawSample {
        id: format!("syn{index:04}"),
        image,
        mask: Some(mask),
        class_labels: vec![class as u8],
        dataset_tag: "synthetic".into(),
    }
}

/// Generates the corpus in memory. Intensities are quantized to 8 bits so the
/// in-memory corpus equals what [`write_synthetic`] puts on disk.
pub fn synthetic_samples(spec: &SyntheticSpec) -> Result<Vec<RawSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_images).map(|i| one_sample(spec, i, &mut rng)).collect())
}

/// The corpus as an in-memory dataset at its native size, without red normalization.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let cfg = PreprocessConfig {
        mode: PreprocessMode::Direct,
        final_side: spec.image_size,
        normalize_red: false,
    };
    let mut samples = Vec::with_capacity(spec.n_images);
    for raw in synthetic_samples(spec)? {
        samples.extend(preprocess(&raw, &cfg)?);
    }
    Ok(Dataset::new(samples))
}

/// Writes `images/<id>.png`, `masks/<id>.png`, `images/labels.csv` and `spec.json` under `dir`.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<RawSample>> {
    let samples = synthetic_samples(spec)?;
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&mask_dir)?;
    let mut labels = String::new();
    for s in &samples {
        save_image_png(&s.image, &img_dir.join(format!("{}.png", s.id)))?;
        if let Some(m) = &s.mask {
            save_mask_png(m, &mask_dir.join(format!("{}.png", s.id)))?;
        }
        let ids: Vec<String> = s.class_labels.iter().map(u8::to_string).collect();
        labels.push_str(&format!("{},{}\n", s.id, ids.join(" ")));
    }
    fs::write(img_dir.join("labels.csv"), labels)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(samples)
}
