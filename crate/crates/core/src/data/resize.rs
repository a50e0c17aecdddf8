use super::plane::{Image, Plane};
use crate::error::{invalid, Result};

/// Source coordinate for output index `i` under corner-aligned sampling.
fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    if out_len == 1 {
        (in_len - 1) as f64 / 2.0
    } else {
        i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling: output corners coincide with input corners.
pub fn interpolate_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid(format!("output size {out_h}×{out_w} must be at least 1×1")));
    }
    let (h, w, c) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|j| {
            let sx = source_coord(j, w, out_w);
            let x0 = (sx.floor() as usize).min(w - 1);
            (x0, (x0 + 1).min(w - 1), sx - x0 as f64)
        })
        .collect();
    let mut out = Image::filled(out_h, out_w, c, 0.0);
    for i in 0..out_h {
        let sy = source_coord(i, h, out_h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.set(i, j, ch, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize for class-id masks (no new labels are invented).
pub fn resize_nearest<T: Copy + Default>(img: &Plane<T>, out_h: usize, out_w: usize) -> Result<Plane<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid(format!("output size {out_h}×{out_w} must be at least 1×1")));
    }
    let (h, w, c) = img.dims();
    Ok(Plane::from_fn(out_h, out_w, c, |y, x, ch| {
        let sy = source_coord(y, h, out_h).round() as usize;
        let sx = source_coord(x, w, out_w).round() as usize;
        img.get(sy.min(h - 1), sx.min(w - 1), ch)
    }))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn identity_resize() {
        let img = Image::from_fn(6, 5, 2, |y, x, c| (y * 7 + x * 3 + c) as f64 / 50.0);
        assert_eq!(interpolate_bilinear(&img, 6, 5).unwrap(), img);
    }

    #[test]
    fn checkerboard_upsample_by_hand() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = interpolate_bilinear(&img, 4, 4).unwrap();
        // output (i,j) samples (u,v) = (i/3, j/3); f(u,v) = u(1-v) + v(1-u)
        let expected = |i: usize, j: usize| {
            let (u, v) = (i as f64 / 3.0, j as f64 / 3.0);
            u * (1.0 - v) + v * (1.0 - u)
        };
        for i in 0..4 {
            for j in 0..4 {
                assert!((out.get(i, j, 0) - expected(i, j)).abs() < 1e-12);
            }
        }
        assert!((out.get(1, 1, 0) - 4.0 / 9.0).abs() < 1e-12);
        assert!((out.get(1, 2, 0) - 5.0 / 9.0).abs() < 1e-12);
        assert_eq!(out.get(0, 3, 0), 1.0);
    }

    #[test]
    fn zero_output_rejected() {
        let img = Image::filled(3, 3, 1, 0.1);
        assert!(interpolate_bilinear(&img, 0, 3).is_err());
        assert!(resize_nearest(&img, 3, 0).is_err());
    }

    #[test]
    fn nearest_keeps_label_set() {
        let m = crate::data::Mask::new(2, 2, 1, vec![0, 1, 2, 1]).unwrap();
        let up = resize_nearest(&m, 7, 9).unwrap();
        assert!(up.data().iter().all(|v| [0, 1, 2].contains(v)));
    }

    proptest! {
        #[test]
        fn constant_stays_constant(h in 1usize..20, w in 1usize..20, oh in 1usize..30, ow in 1usize..30, v in 0.0f64..1.0) {
            let img = Image::filled(h, w, 3, v);
            let out = interpolate_bilinear(&img, oh, ow).unwrap();
            prop_assert!(out.data().iter().all(|&o| (o - v).abs() < 1e-12));
        }

        #[test]
        fn output_within_input_range(seed in 0u64..1000, oh in 1usize..25, ow in 1usize..25) {
            let img = Image::from_fn(5, 7, 1, |y, x, _| ((seed as usize * 31 + y * 17 + x * 13) % 97) as f64 / 97.0);
            let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = interpolate_bilinear(&img, oh, ow).unwrap();
            prop_assert!(out.data().iter().all(|&o| o >= lo - 1e-12 && o <= hi + 1e-12));
        }
    }
}
