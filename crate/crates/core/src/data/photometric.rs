use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plane::Image;

/// Maximum relative strength of each colour perturbation; a factor is drawn
/// uniformly from `1 ± strength` (brightness adds `± strength` instead).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

/// Factors drawn for one jitter application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorJitter {
    pub const NONE: Self = Self {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
    };

    pub fn draw(&self, rng: &mut impl Rng) -> JitterDraw {
        let mut sym = |s: f64| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
        JitterDraw {
            brightness: sym(self.brightness),
            contrast: 1.0 + sym(self.contrast),
            saturation: 1.0 + sym(self.saturation),
        }
    }

    pub fn apply_seeded(&self, image: &Image, seed: u64) -> Image {
        self.draw(&mut ChaCha8Rng::seed_from_u64(seed)).apply(image)
    }
}

impl JitterDraw {
    /// Brightness shift, contrast about the image mean, saturation about the
    /// per-pixel grey value, then clamping to `[0, 1]`. Neutral factors are skipped,
    /// so a zero-strength draw returns the image unchanged.
    pub fn apply(&self, image: &Image) -> Image {
        let (h, w, c) = image.dims();
        let mean = image.data().iter().sum::<f64>() / image.data().len() as f64 + self.brightness;
        let tone = |v: f64| {
            let v = if self.brightness != 0.0 { v + self.brightness } else { v };
            if self.contrast != 1.0 {
                mean + (v - mean) * self.contrast
            } else {
                v
            }
        };
        let mut out = image.clone();
        for y in 0..h {
            for x in 0..w {
                let px = image.pixel(y, x);
                let grey = tone(px.iter().sum::<f64>() / c as f64);
                for (ch, &pv) in px.iter().enumerate() {
                    let mut v = tone(pv);
                    if c > 1 && self.saturation != 1.0 {
                        v = grey + (v - grey) * self.saturation;
                    }
                    out.set(y, x, ch, v.clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}
