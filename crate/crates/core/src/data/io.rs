//! File formats: raw image/mask directories, processed-sample files, split manifests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plane::{Image, Mask};
use super::sample::{ProcessedSample, RawSample};
use super::split::{DatasetSplit, SplitSpec};
use crate::error::{invalid, Error, Result};
use crate::store::{write_atomic, ArrayData, ArrayFile};

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg"];
pub const SAMPLE_EXT: &str = "s4ma";

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let gray = matches!(img.color().channel_count(), 1 | 2);
    if gray {
        let l = img.to_luma8();
        let (w, h) = l.dimensions();
        let data = l.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, 1, data)
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, 3, data)
    }
}

/// Reads a mask; 255 is read as class 1 (binary masks saved as black/white), other values are class ids.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let l = image::open(path)?.to_luma8();
    let (w, h) = l.dimensions();
    let data = l.into_raw().into_iter().map(|v| if v == 255 { 1 } else { v }).collect();
    Mask::new(h as usize, w as usize, 1, data)
}

/// Writes binary masks as black/white, multi-class masks as raw ids.
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let binary = mask.max_class() <= 1;
    let raw: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if binary && v == 1 { 255 } else { v })
        .collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .ok_or_else(|| invalid("mask buffer size"))?;
    ensure_parent(path)?;
    buf.save(path)?;
    Ok(())
}

pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    ensure_parent(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        1 => image::GrayImage::from_raw(w, h, raw)
            .ok_or_else(|| invalid("image buffer size"))?
            .save(path)?,
        3 => image::RgbImage::from_raw(w, h, raw)
            .ok_or_else(|| invalid("image buffer size"))?
            .save(path)?,
        c => return Err(invalid(format!("cannot write a {c}-channel png"))),
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Optional `labels.csv` beside the images: `stem,<space-separated class ids>`.
fn read_labels(dir: &Path) -> Result<HashMap<String, Vec<u8>>> {
    let path = dir.join("labels.csv");
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (n, line) in fs::read_to_string(&path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, labels) = line
            .split_once(',')
            .ok_or_else(|| invalid(format!("labels.csv line {}: expected `id,labels`", n + 1)))?;
        let labels = labels
            .split_whitespace()
            .map(|t| t.parse::<u8>().map_err(|e| invalid(format!("labels.csv line {}: {e}", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        out.insert(id.trim().to_string(), labels);
    }
    Ok(out)
}

/// Reads every image in `images`, pairing masks by file stem.
///
/// Masks come from `masks/<stem>.*` when a mask directory is given, otherwise from
/// `<stem>_mask.*` beside the image.
pub fn read_raw_dir(images: &Path, masks: Option<&Path>, tag: &str) -> Result<Vec<RawSample>> {
    let mut files: Vec<PathBuf> = fs::read_dir(images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p) && !stem(p).ends_with("_mask"))
        .collect();
    files.sort();
    let mask_index: HashMap<String, PathBuf> = match masks {
        Some(dir) => fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p))
            .map(|p| (stem(&p), p))
            .collect(),
        None => fs::read_dir(images)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p) && stem(p).ends_with("_mask"))
            .map(|p| (stem(&p).trim_end_matches("_mask").to_string(), p))
            .collect(),
    };
    let labels = read_labels(images)?;
    files
        .iter()
        .map(|p| {
            let id = stem(p);
            Ok(RawSample {
                image: load_image(p)?,
                mask: mask_index.get(&id).map(|m| load_mask(m)).transpose()?,
                class_labels: labels.get(&id).cloned().unwrap_or_default(),
                dataset_tag: tag.to_string(),
                id,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    steps: Vec<super::sample::Step>,
    class_labels: Vec<u8>,
}

pub fn save_processed(sample: &ProcessedSample, dir: &Path) -> Result<PathBuf> {
    let meta = SampleMeta {
        id: sample.id.clone(),
        steps: sample.steps.clone(),
        class_labels: sample.class_labels.clone(),
    };
    let mut f = ArrayFile::new("processed_sample", serde_json::to_value(meta)?);
    let (h, w, c) = sample.image.dims();
    f.push_f64("image", vec![h, w, c], sample.image.data().to_vec());
    if let Some(m) = &sample.mask {
        f.push_u8("mask", vec![m.height(), m.width()], m.data().to_vec());
    }
    let path = dir.join(format!("{}.{SAMPLE_EXT}", sample.id));
    f.save(&path)?;
    Ok(path)
}

pub fn load_processed(path: &Path) -> Result<ProcessedSample> {
    let f = ArrayFile::load(path)?;
    if f.kind != "processed_sample" {
        return Err(Error::Format(format!("{} is a {} file", path.display(), f.kind)));
    }
    let meta: SampleMeta = serde_json::from_value(f.meta.clone())?;
    let image = match f.get("image") {
        Some(a) => match (&a.data, a.shape.as_slice()) {
            (ArrayData::F64(v), [h, w, c]) => Image::new(*h, *w, *c, v.clone())?,
            _ => return Err(Error::Format("image array must be f64 H×W×C".into())),
        },
        None => return Err(Error::Format("sample file has no image".into())),
    };
    let mask = match f.get("mask") {
        Some(a) => match (&a.data, a.shape.as_slice()) {
            (ArrayData::U8(v), [h, w]) => Some(Mask::new(*h, *w, 1, v.clone())?),
            _ => return Err(Error::Format("mask array must be u8 H×W".into())),
        },
        None => None,
    };
    Ok(ProcessedSample {
        id: meta.id,
        image,
        mask,
        class_labels: meta.class_labels,
        steps: meta.steps,
    })
}

/// All processed samples in a directory, sorted by file name.
pub fn load_processed_dir(dir: &Path) -> Result<Vec<ProcessedSample>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == SAMPLE_EXT))
        .collect();
    files.sort();
    files.iter().map(|p| load_processed(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split_spec: SplitSpec,
    pub splits: DatasetSplit,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new(split_spec: SplitSpec, splits: DatasetSplit) -> Self {
        Self {
            version: 1,
            split_spec,
            splits,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), |w| {
            serde_json::to_writer_pretty(w, self)?;
            Ok(())
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preprocess, PreprocessConfig, PreprocessMode};

    #[test]
    fn raw_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(6, 8, 3, |y, x, c| ((y + x + c) % 5) as f64 / 4.0);
        let mask = Mask::from_fn(6, 8, 1, |y, _, _| u8::from(y < 3));
        save_image_png(&img, &dir.path().join("a.png")).unwrap();
        save_mask_png(&mask, &dir.path().join("a_mask.png")).unwrap();
        fs::write(dir.path().join("labels.csv"), "a,1 3\n").unwrap();
        let raws = read_raw_dir(dir.path(), None, "t").unwrap();
        assert_eq!(raws.len(), 1);
        assert_eq!(raws[0].mask.as_ref().unwrap(), &mask);
        assert_eq!(raws[0].class_labels, vec![1, 3]);
        for (a, b) in raws[0].image.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn processed_sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = RawSample {
            id: "x".into(),
            image: Image::from_fn(10, 12, 3, |y, x, c| ((y * x + c) % 7) as f64 / 6.0),
            mask: Some(Mask::from_fn(10, 12, 1, |y, x, _| u8::from(x > y))),
            class_labels: vec![0],
            dataset_tag: "t".into(),
        };
        let cfg = PreprocessConfig {
            mode: PreprocessMode::Interpolate { side: 16 },
            final_side: 8,
            normalize_red: true,
        };
        let s = preprocess(&raw, &cfg).unwrap().remove(0);
        let path = save_processed(&s, dir.path()).unwrap();
        assert_eq!(load_processed(&path).unwrap(), s);
        assert_eq!(load_processed_dir(dir.path()).unwrap(), vec![s]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(
            SplitSpec::standard(4),
            DatasetSplit {
                train: vec!["a".into()],
                val: vec!["b".into()],
                test: vec!["c".into()],
            },
        );
        m.save(dir.path()).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }
}
