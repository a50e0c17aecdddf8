use super::plane::Image;
use crate::error::{invalid, Result};

const RED: usize = 0;

/// Standardizes the red channel over the image, then min-max rescales it into `[0, 1]`.
///
/// A constant red channel has no spread to rescale and maps to 0.5.
/// Green and blue are copied through untouched.
pub fn normalize_red_channel(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return Err(invalid(format!(
            "red-channel normalization needs 3 channels, got {}",
            img.channels()
        )));
    }
    let n = (img.height() * img.width()) as f64;
    let reds: Vec<f64> = img.data().iter().skip(RED).step_by(3).copied().collect();
    let mean = reds.iter().sum::<f64>() / n;
    let std = (reds.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut out = img.clone();
    if std == 0.0 {
        out.data_mut().iter_mut().skip(RED).step_by(3).for_each(|r| *r = 0.5);
        return Ok(out);
    }
    let z: Vec<f64> = reds.iter().map(|r| (r - mean) / std).collect();
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (dst, zv) in out.data_mut().iter_mut().skip(RED).step_by(3).zip(z) {
        *dst = (zv - lo) / (hi - lo);
    }
    Ok(out)
}
