use serde::{Deserialize, Serialize};

use super::normalize::normalize_red_channel;
use super::plane::{Image, Mask};
use super::resize::{interpolate_bilinear, resize_nearest};
use super::tiling::{extract_tile, TileGrid};
use super::geometry::GeometricTransform;
use crate::error::{invalid, shape, Result};

/// An image/mask pair as ingested, before any preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    /// Image-level class labels (classification tasks); empty when absent.
    #[serde(default)]
    pub class_labels: Vec<u8>,
    pub dataset_tag: String,
}

impl RawSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !matches!(self.image.channels(), 1 | 3) {
            return Err(invalid(format!(
                "{}: images must have 1 or 3 channels, got {}",
                self.id,
                self.image.channels()
            )));
        }
        if let Some(mask) = &self.mask {
            if (mask.height(), mask.width()) != (self.image.height(), self.image.width()) {
                return Err(shape(format!("{}: mask and image extents differ", self.id)));
            }
            if mask.max_class() as usize >= num_classes {
                return Err(invalid(format!(
                    "{}: mask class {} out of range for {num_classes} classes",
                    self.id,
                    mask.max_class()
                )));
            }
        }
        Ok(())
    }
}

/// One replayable preprocessing operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    NormalizeRed,
    Tile { row: usize, col: usize, tile_size: usize },
    /// Bilinear for images, nearest-neighbour for masks.
    Resize { height: usize, width: usize },
    Rotate90 { quarter_turns: u8 },
    FlipHorizontal,
}

/// A model-ready sample together with the steps that produced it from its raw source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedSample {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    #[serde(default)]
    pub class_labels: Vec<u8>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreprocessMode {
    /// Cut into `tile_size` squares (uniform large slides).
    Tile { tile_size: usize },
    /// Bilinear interpolation to `side`×`side` (variable-size photographs).
    Interpolate { side: usize },
    /// Resize straight to the final side.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub mode: PreprocessMode,
    pub final_side: usize,
    pub normalize_red: bool,
}

impl PreprocessConfig {
    /// Large uniform slides: 480 tiles, then 224.
    pub fn tiled() -> Self {
        Self {
            mode: PreprocessMode::Tile { tile_size: 480 },
            final_side: 224,
            normalize_red: false,
        }
    }

    /// Variable-size RGB photographs: interpolate to 480, resize to 224, red normalization.
    pub fn interpolated() -> Self {
        Self {
            mode: PreprocessMode::Interpolate { side: 480 },
            final_side: 224,
            normalize_red: true,
        }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::interpolated()
    }
}

fn sample_id(base: &str, steps: &[Step]) -> String {
    match steps.iter().find_map(|s| match s {
        Step::Tile { row, col, .. } => Some((row, col)),
        _ => None,
    }) {
        Some((r, c)) => format!("{base}_r{r}c{c}"),
        None => base.to_string(),
    }
}

/// Applies `steps` to a raw sample in order.
pub fn replay(raw: &RawSample, steps: &[Step]) -> Result<ProcessedSample> {
    if steps.is_empty() {
        return Err(invalid("a processed sample needs at least one step"));
    }
    let mut image = raw.image.clone();
    let mut mask = raw.mask.clone();
    for step in steps {
        match *step {
            Step::NormalizeRed => image = normalize_red_channel(&image)?,
            Step::Tile { row, col, tile_size } => {
                let grid = TileGrid::new(image.height(), image.width(), tile_size)?;
                if row >= grid.rows || col >= grid.cols {
                    return Err(invalid(format!("tile ({row},{col}) outside {}×{} grid", grid.rows, grid.cols)));
                }
                image = extract_tile(&image, &grid, row, col);
                mask = mask.map(|m| extract_tile(&m, &grid, row, col));
            }
            Step::Resize { height, width } => {
                image = interpolate_bilinear(&image, height, width)?;
                mask = mask.map(|m| resize_nearest(&m, height, width)).transpose()?;
            }
            Step::Rotate90 { quarter_turns } => {
                let t = GeometricTransform::rotation(quarter_turns);
                image = t.apply_plane(&image);
                mask = mask.map(|m| t.apply_plane(&m));
            }
            Step::FlipHorizontal => {
                let t = GeometricTransform::Hflip;
                image = t.apply_plane(&image);
                mask = mask.map(|m| t.apply_plane(&m));
            }
        }
    }
    Ok(ProcessedSample {
        id: sample_id(&raw.id, steps),
        image,
        mask,
        class_labels: raw.class_labels.clone(),
        steps: steps.to_vec(),
    })
}

/// Produces model-ready samples: one per tile in tiled mode, otherwise one.
pub fn preprocess(raw: &RawSample, cfg: &PreprocessConfig) -> Result<Vec<ProcessedSample>> {
    if cfg.final_side == 0 {
        return Err(invalid("final side must be positive"));
    }
    let mut prefix = Vec::new();
    if cfg.normalize_red && raw.image.channels() == 3 {
        prefix.push(Step::NormalizeRed);
    }
    let fin = Step::Resize {
        height: cfg.final_side,
        width: cfg.final_side,
    };
    let plans: Vec<Vec<Step>> = match cfg.mode {
        PreprocessMode::Tile { tile_size } => {
            let grid = TileGrid::new(raw.image.height(), raw.image.width(), tile_size)?;
            (0..grid.rows)
                .flat_map(|row| (0..grid.cols).map(move |col| (row, col)))
                .map(|(row, col)| {
                    let mut s = prefix.clone();
                    s.push(Step::Tile { row, col, tile_size });
                    s.push(fin.clone());
                    s
                })
                .collect()
        }
        PreprocessMode::Interpolate { side } => {
            let mut s = prefix.clone();
            s.push(Step::Resize { height: side, width: side });
            s.push(fin.clone());
            vec![s]
        }
        PreprocessMode::Direct => {
            let mut s = prefix.clone();
            s.push(fin.clone());
            vec![s]
        }
    };
    plans.iter().map(|steps| replay(raw, steps)).collect()
}
