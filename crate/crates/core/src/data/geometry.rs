//! Exact pixel permutations: flips and right-angle rotations.

use serde::{Deserialize, Serialize};

use super::plane::Plane;
use crate::error::{shape, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricTransform {
    Identity,
    Hflip,
    Vflip,
    /// Quarter turn counter-clockwise.
    Rot90,
    Rot180,
    Rot270,
}

impl GeometricTransform {
    pub const ALL: [GeometricTransform; 6] = [
        Self::Identity,
        Self::Hflip,
        Self::Vflip,
        Self::Rot90,
        Self::Rot180,
        Self::Rot270,
    ];

    pub fn inverse(self) -> Self {
        match self {
            Self::Rot90 => Self::Rot270,
            Self::Rot270 => Self::Rot90,
            other => other,
        }
    }

    pub fn rotation(quarter_turns: u8) -> Self {
        match quarter_turns % 4 {
            0 => Self::Identity,
            1 => Self::Rot90,
            2 => Self::Rot180,
            _ => Self::Rot270,
        }
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, Self::Rot90 | Self::Rot270)
    }

    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Input coordinate feeding output `(y, x)` of an `h×w` input.
    #[inline]
    pub fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Self::Identity => (y, x),
            Self::Hflip => (y, w - 1 - x),
            Self::Vflip => (h - 1 - y, x),
            Self::Rot90 => (x, w - 1 - y),
            Self::Rot180 => (h - 1 - y, w - 1 - x),
            Self::Rot270 => (h - 1 - x, y),
        }
    }

    pub fn apply_plane<T: Copy + Default>(self, p: &Plane<T>) -> Plane<T> {
        let (h, w, c) = p.dims();
        let (oh, ow) = self.output_dims(h, w);
        Plane::from_fn(oh, ow, c, |y, x, ch| {
            let (sy, sx) = self.source(y, x, h, w);
            p.get(sy, sx, ch)
        })
    }

    /// Applies the permutation to every channel of a `B×D×H×W` tensor.
    ///
    /// Rotations by a quarter turn require square maps so the batch keeps one shape.
    pub fn apply_tensor(self, t: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = t.dims4()?;
        if self.swaps_axes() && h != w {
            return Err(shape(format!("{self:?} needs a square map, got {h}×{w}")));
        }
        let hw = h * w;
        let src = t.data();
        let mut out = Tensor::zeros(t.shape());
        let dst = out.data_mut();
        for plane in 0..b * d {
            let base = plane * hw;
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.source(y, x, h, w);
                    dst[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_rotations() {
        let p = Plane::new(2, 2, 1, vec![1u8, 2, 3, 4]).unwrap();
        assert_eq!(GeometricTransform::Rot90.apply_plane(&p).data(), &[2, 4, 1, 3]);
        assert_eq!(GeometricTransform::Rot270.apply_plane(&p).data(), &[3, 1, 4, 2]);
        assert_eq!(GeometricTransform::Rot180.apply_plane(&p).data(), &[4, 3, 2, 1]);
        assert_eq!(GeometricTransform::Hflip.apply_plane(&p).data(), &[2, 1, 4, 3]);
        assert_eq!(GeometricTransform::Vflip.apply_plane(&p).data(), &[3, 4, 1, 2]);
    }

    #[test]
    fn inverse_round_trips_non_square() {
        let p = Plane::from_fn(3, 5, 2, |y, x, c| (y * 10 + x * 2 + c) as u8);
        for t in GeometricTransform::ALL {
            assert_eq!(t.inverse().apply_plane(&t.apply_plane(&p)), p, "{t:?}");
        }
    }

    #[test]
    fn tensor_rotation_requires_square() {
        let t = Tensor::zeros(&[1, 2, 3, 4]);
        assert!(GeometricTransform::Rot90.apply_tensor(&t).is_err());
        assert!(GeometricTransform::Hflip.apply_tensor(&t).is_ok());
    }
}
