use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use s4mi::class_weights::{median_frequency_weights, pixel_class_frequencies, pixel_ratio_weights, RatioOrientation};
use s4mi::data::io::{load_mask, load_processed_dir, read_raw_dir, save_image_png, save_processed, Manifest};
use s4mi::data::{preprocess, split_dataset, Image, Mask, PreprocessConfig, PreprocessMode, SplitSpec};
use s4mi::harness::config::TrainConfig;
use s4mi::harness::report::render_report;
use s4mi::harness::run::{run_experiment, RunStatus};
use s4mi::harness::synthetic::{write_synthetic, SyntheticSpec};
use s4mi::metrics::{confusion_counts, dice_coefficient, f1, iou, saliency_map};
use s4mi::models::{DifferentiableModel, Mode, Model};
use s4mi::{Error, Result};

#[derive(Parser)]
#[command(name = "s4mi", version, about = "Annotation-efficient segmentation and classification training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion corpus (images, masks, labels).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with a full synthetic spec; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Preprocess a raw image directory into training samples plus a split manifest.
    Preprocess {
        #[arg(long)]
        images: PathBuf,
        /// Mask directory keyed by file stem; defaults to `<stem>_mask` files beside the images.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Interpolate)]
        mode: ModeArg,
        /// Tile side (tile mode) or intermediate side (interpolate mode).
        #[arg(long, default_value_t = 480)]
        side: usize,
        #[arg(long, default_value_t = 224)]
        final_side: usize,
        #[arg(long)]
        normalize_red: bool,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value = "raw")]
        tag: String,
    },
    /// Print pixel frequencies and both class-weight initializations for a mask directory.
    Weights {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = OrientationArg::Complement)]
        orientation: OrientationArg,
    },
    /// Run every seed of an experiment config; exits non-zero unless all seeds complete.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "S4MI_OUTPUT_ROOT")]
        output_root: Option<PathBuf>,
        /// Comma-separated seeds replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        allow_any_fraction: bool,
    },
    /// Score a directory of predicted masks against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Metrics record destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the method x label-fraction table and plot from stored runs.
    Report {
        #[arg(long, env = "S4MI_OUTPUT_ROOT")]
        output_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Classifier checkpoint for saliency images.
        #[arg(long, requires = "saliency_data")]
        saliency_model: Option<PathBuf>,
        /// Processed sample directory supplying the saliency inputs.
        #[arg(long)]
        saliency_data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        saliency_count: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Tile,
    Interpolate,
    Direct,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrientationArg {
    Complement,
    Direct,
}

const DEFAULT_ROOT: &str = "runs";

fn synth(out: &Path, spec: Option<&Path>, n: Option<usize>, size: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut s: SyntheticSpec = match spec {
        Some(p) => toml::from_str(&fs::read_to_string(p)?)?,
        None => SyntheticSpec::default(),
    };
    s.n_images = n.unwrap_or(s.n_images);
    s.image_size = size.unwrap_or(s.image_size);
    s.seed = seed.unwrap_or(s.seed);
    s.validate()?;
    let samples = write_synthetic(&s, out)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn preprocess_dir(
    images: &Path,
    masks: Option<&Path>,
    out: &Path,
    mode: ModeArg,
    side: usize,
    final_side: usize,
    normalize_red: bool,
    split_seed: u64,
    tag: &str,
) -> Result<()> {
    let cfg = PreprocessConfig {
        mode: match mode {
            ModeArg::Tile => PreprocessMode::Tile { tile_size: side },
            ModeArg::Interpolate => PreprocessMode::Interpolate { side },
            ModeArg::Direct => PreprocessMode::Direct,
        },
        final_side,
        normalize_red,
    };
    let raw = read_raw_dir(images, masks, tag)?;
    fs::create_dir_all(out)?;
    let mut ids = Vec::new();
    for r in &raw {
        for s in preprocess(r, &cfg)? {
            save_processed(&s, out)?;
            ids.push(s.id.clone());
        }
    }
    let spec = SplitSpec::standard(split_seed);
    let splits = split_dataset(&ids, &spec)?;
    Manifest::new(spec, splits).save(out)?;
    println!("preprocessed {} images into {} samples in {}", raw.len(), ids.len(), out.display());
    Ok(())
}

fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let is_png = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, p.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.trim_end_matches("_mask").to_string(), p);
        }
    }
    Ok(out)
}

fn weights(dir: &Path, classes: usize, orientation: OrientationArg) -> Result<serde_json::Value> {
    let masks: Vec<Mask> = mask_files(dir)?.values().map(|p| load_mask(p)).collect::<Result<_>>()?;
    if masks.is_empty() {
        return Err(Error::InvalidInput(format!("no masks in {}", dir.display())));
    }
    let refs: Vec<&Mask> = masks.iter().collect();
    let freqs = pixel_class_frequencies(&refs, classes)?;
    let orientation = match orientation {
        OrientationArg::Complement => RatioOrientation::Complement,
        OrientationArg::Direct => RatioOrientation::Direct,
    };
    let ratio = pixel_ratio_weights(&freqs, orientation);
    let median = median_frequency_weights(&freqs)?;
    Ok(json!({
        "masks": masks.len(),
        "frequencies": freqs.freqs,
        "schemes": [ratio, median],
        "ratio_orientation": orientation,
    }))
}

fn eval_dirs(pred: &Path, gt: &Path, classes: usize) -> Result<serde_json::Value> {
    let preds = mask_files(pred)?;
    let gts = mask_files(gt)?;
    let mut per_image = Vec::new();
    let (mut sum_iou, mut sum_dice) = (0.0, 0.0);
    let mut confusion = vec![None; classes];
    for (id, gp) in &gts {
        let pp = preds
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("no prediction for {id}")))?;
        let (p, g) = (load_mask(pp)?, load_mask(gp)?);
        let (i, d) = (iou(&p, &g)?, dice_coefficient(&p, &g)?);
        sum_iou += i;
        sum_dice += d;
        for (c, acc) in confusion.iter_mut().enumerate().skip(1) {
            let cc = confusion_counts(&p, &g, c as u8)?;
            *acc = Some(match acc.take() {
                Some(prev) => cc.merge(&prev),
                None => cc,
            });
        }
        per_image.push(json!({"id": id, "iou": i, "dice": d}));
    }
    if per_image.is_empty() {
        return Err(Error::InvalidInput(format!("no ground-truth masks in {}", gt.display())));
    }
    let n = per_image.len() as f64;
    let per_class: Vec<_> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, cc)| cc.as_ref().map(|cc| json!({"class": c, "f1": f1(cc).value, "counts": cc})))
        .collect();
    Ok(json!({
        "version": 1,
        "images": per_image.len(),
        "mean_iou": sum_iou / n,
        "mean_dice": sum_dice / n,
        "per_class": per_class,
        "per_image": per_image,
    }))
}

fn saliency_images(model: &Path, data: &Path, count: usize, out: &Path) -> Result<usize> {
    let mut m = Model::load(model)?;
    m.set_mode(Mode::Eval);
    let samples = load_processed_dir(data)?;
    let dir = out.join("saliency");
    fs::create_dir_all(&dir)?;
    for s in samples.iter().take(count) {
        let scores = m.forward(&Image::batch_tensor(&[&s.image])?)?;
        let class = scores
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        let map = saliency_map(&m, &s.image, class)?;
        let img = Image::new(map.height, map.width, 1, map.values)?;
        save_image_png(&img, &dir.join(format!("{}_class{class}.png", s.id)))?;
    }
    Ok(count.min(samples.len()))
}

fn write_or_print(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            out,
            spec,
            n_images,
            image_size,
            seed,
        } => synth(&out, spec.as_deref(), n_images, image_size, seed)?,
        Command::Preprocess {
            images,
            masks,
            out,
            mode,
            side,
            final_side,
            normalize_red,
            split_seed,
            tag,
        } => preprocess_dir(&images, masks.as_deref(), &out, mode, side, final_side, normalize_red, split_seed, &tag)?,
        Command::Weights {
            masks,
            classes,
            orientation,
        } => write_or_print(&weights(&masks, classes, orientation)?, None)?,
        Command::Train {
            config,
            output_root,
            seeds,
            epochs,
            allow_any_fraction,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if epochs.is_some() {
                cfg.epochs = epochs;
            }
            cfg.allow_any_fraction |= allow_any_fraction;
            let root = output_root
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
            let res = run_experiment(&cfg, &root)?;
            for r in &res.records {
                let cached = if res.cached.contains(&r.seed) { " (cached)" } else { "" };
                match &r.status {
                    RunStatus::Completed => println!(
                        "seed {}: {} = {:.4} in {:.1}s{cached}",
                        r.seed,
                        r.primary_metric,
                        r.primary().unwrap_or(f64::NAN),
                        r.wall_clock_s
                    ),
                    RunStatus::Aborted { diagnostic } => println!("seed {}: aborted: {diagnostic}{cached}", r.seed),
                }
            }
            if let Some(s) = &res.aggregate.summary {
                println!("{}: {:.4} ± {:.4} over {} seeds", res.aggregate.metric, s.mean, s.ci_halfwidth, s.values.len());
            }
            println!("records in {}", res.dir.display());
            if !res.all_completed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Eval { pred, gt, classes, out } => write_or_print(&eval_dirs(&pred, &gt, classes)?, out.as_deref())?,
        Command::Report {
            output_root,
            out,
            saliency_model,
            saliency_data,
            saliency_count,
        } => {
            let root = output_root.unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
            let report = render_report(&root, &out)?;
            let filled = report.rows.iter().flat_map(|r| &r.1).filter(|c| c.is_some()).count();
            println!("report with {filled} cells written to {}", out.display());
            if let (Some(m), Some(d)) = (saliency_model, saliency_data) {
                let n = saliency_images(&m, &d, saliency_count, &out)?;
                println!("{n} saliency maps written");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
