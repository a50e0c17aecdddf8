use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::GeometricTransform;
use super::plane::Plane;
use super::sample::{ProcessedSample, Step};

/// The geometric transform drawn for one augmentation call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub quarter_turns: u8,
    pub hflip: bool,
}

impl AugmentDraw {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            quarter_turns: rng.random_range(0..4),
            hflip: rng.random_bool(0.5),
        }
    }

    pub fn steps(self) -> Vec<Step> {
        let mut steps = Vec::new();
        if self.quarter_turns != 0 {
            steps.push(Step::Rotate90 {
                quarter_turns: self.quarter_turns,
            });
        }
        if self.hflip {
            steps.push(Step::FlipHorizontal);
        }
        steps
    }

    /// The draw as transforms, in application order.
    pub fn transforms(self) -> Vec<GeometricTransform> {
        let mut out = Vec::new();
        if self.quarter_turns != 0 {
            out.push(GeometricTransform::rotation(self.quarter_turns));
        }
        if self.hflip {
            out.push(GeometricTransform::Hflip);
        }
        out
    }

    pub fn apply<T: Copy + Default>(self, p: &Plane<T>) -> Plane<T> {
        self.transforms().into_iter().fold(p.clone(), |acc, t| t.apply_plane(&acc))
    }
}

/// Random right-angle rotation plus random horizontal flip, applied identically to image and mask.
pub fn augment(sample: &ProcessedSample, seed: u64) -> ProcessedSample {
    let draw = AugmentDraw::from_seed(seed);
    let mut out = sample.clone();
    for step in draw.steps() {
        let t = match step {
            Step::Rotate90 { quarter_turns } => GeometricTransform::rotation(quarter_turns),
            _ => GeometricTransform::Hflip,
        };
        out.image = t.apply_plane(&out.image);
        out.mask = out.mask.as_ref().map(|m| t.apply_plane(m));
        out.steps.push(step);
    }
    out
}
