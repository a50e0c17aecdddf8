use serde::{Deserialize, Serialize};

use super::plane::Plane;
use crate::error::{invalid, shape, Result};

/// Layout of a tiled image; tiles are stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl TileGrid {
    pub fn new(orig_h: usize, orig_w: usize, tile_size: usize) -> Result<Self> {
        if orig_h == 0 || orig_w == 0 {
            return Err(invalid("cannot tile an empty image"));
        }
        if tile_size == 0 {
            return Err(invalid("tile size must be at least 1"));
        }
        let rows = orig_h.div_ceil(tile_size);
        let cols = orig_w.div_ceil(tile_size);
        Ok(Self {
            rows,
            cols,
            tile_size,
            orig_h,
            orig_w,
            pad_bottom: rows * tile_size - orig_h,
            pad_right: cols * tile_size - orig_w,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts one tile at grid position `(row, col)`, zero-padding past the image edge.
pub(crate) fn extract_tile<T: Copy + Default>(img: &Plane<T>, grid: &TileGrid, row: usize, col: usize) -> Plane<T> {
    let t = grid.tile_size;
    let c = img.channels();
    let mut tile = Plane::filled(t, t, c, T::default());
    let (y0, x0) = (row * t, col * t);
    let h = t.min(img.height().saturating_sub(y0));
    let w = t.min(img.width().saturating_sub(x0));
    for y in 0..h {
        let src = &img.data()[((y0 + y) * img.width() + x0) * c..((y0 + y) * img.width() + x0 + w) * c];
        tile.data_mut()[y * t * c..(y * t + w) * c].copy_from_slice(src);
    }
    tile
}

/// Splits an image into `tile_size` squares with blank (zero / class-0) padding.
pub fn tile_image<T: Copy + Default>(img: &Plane<T>, tile_size: usize) -> Result<(TileGrid, Vec<Plane<T>>)> {
    let grid = TileGrid::new(img.height(), img.width(), tile_size)?;
    let tiles = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
        .map(|(r, c)| extract_tile(img, &grid, r, c))
        .collect();
    Ok((grid, tiles))
}

/// Reassembles tiles into the original extent, discarding padding.
pub fn untile<T: Copy + Default>(grid: &TileGrid, tiles: &[Plane<T>]) -> Result<Plane<T>> {
    if tiles.len() != grid.len() {
        return Err(invalid(format!("grid expects {} tiles, got {}", grid.len(), tiles.len())));
    }
    let t = grid.tile_size;
    let c = tiles[0].channels();
    if tiles.iter().any(|p| p.height() != t || p.width() != t || p.channels() != c) {
        return Err(shape(format!("every tile must be {t}×{t}×{c}")));
    }
    let mut out = Plane::filled(grid.orig_h, grid.orig_w, c, T::default());
    for (i, tile) in tiles.iter().enumerate() {
        let (y0, x0) = ((i / grid.cols) * t, (i % grid.cols) * t);
        let h = t.min(grid.orig_h - y0);
        let w = t.min(grid.orig_w - x0);
        for y in 0..h {
            let dst = ((y0 + y) * grid.orig_w + x0) * c;
            out.data_mut()[dst..dst + w * c].copy_from_slice(&tile.data()[y * t * c..(y * t + w) * c]);
        }
    }
    Ok(out)
}
