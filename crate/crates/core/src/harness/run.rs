//! Seeded experiment runs, their persisted records and per-config aggregates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use super::synthetic::synthetic_dataset;
use crate::data::io::{load_processed_dir, Manifest, MANIFEST_FILE};
use crate::data::{split_dataset, subsample_labels, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_seeds, SeedAggregate};
use crate::models::{build_model, comparable_pair, Family, ModelSpec};
use crate::picie::{evaluate_unsupervised, train_picie};
use crate::seg::{evaluate_iou, train_cross_teaching, train_supervised, EvalSet, EvalTarget};
use crate::selfsup::{evaluate_f1, finetune, pretrain, Branch, Regime};
use crate::store::write_atomic;

pub const RECORD_VERSION: u32 = 1;
pub const RECORD_FILE: &str = "record.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { diagnostic: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub status: RunStatus,
    /// Trainer-specific per-epoch history.
    pub history: serde_json::Value,
    /// Metric values by `<split>_<metric>`, e.g. `test_iou`.
    pub final_metrics: BTreeMap<String, f64>,
    /// Key of the headline metric in `final_metrics`.
    pub primary_metric: String,
    /// Label accesses during label-free phases; zero by contract.
    pub unsupervised_label_reads: usize,
    pub wall_clock_s: f64,
    pub artifacts: Vec<String>,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn primary(&self) -> Option<f64> {
        self.final_metrics.get(&self.primary_metric).copied()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if r.version != RECORD_VERSION {
            return Err(Error::Format(format!("record version {} unsupported", r.version)));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_hash: String,
    pub name: String,
    pub method: Method,
    pub label_fraction: f64,
    pub metric: String,
    pub completed_seeds: Vec<u64>,
    pub aborted_seeds: Vec<u64>,
    /// Over completed seeds; absent when none completed. A single seed gets a zero half-width.
    pub summary: Option<SeedAggregate>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RunRecord>,
    pub aggregate: Aggregate,
    pub dir: PathBuf,
    /// Seeds served from existing records.
    pub cached: Vec<u64>,
}

impl ExperimentResult {
    pub fn all_completed(&self) -> bool {
        self.records.iter().all(RunRecord::completed)
    }
}

/// The config's dataset with its train/val/test split.
pub fn load_dataset(cfg: &TrainConfig) -> Result<(Dataset, DatasetSplit)> {
    let data = if cfg.dataset == "synthetic" {
        synthetic_dataset(&cfg.synthetic)?
    } else {
        Dataset::new(load_processed_dir(Path::new(&cfg.dataset))?)
    };
    let manifest = Path::new(&cfg.dataset).join(MANIFEST_FILE);
    let split = if cfg.dataset != "synthetic" && manifest.exists() {
        Manifest::load(Path::new(&cfg.dataset))?.splits
    } else {
        split_dataset(&data.ids(), &cfg.split)?
    };
    Ok((data, split))
}

struct Outcome {
    history: serde_json::Value,
    metrics: BTreeMap<String, f64>,
    unsupervised_label_reads: usize,
    artifacts: Vec<String>,
}

fn seg_side(data: &Dataset) -> usize {
    data.image(0).height()
}

fn execute(cfg: &TrainConfig, seed: u64, dir: &Path) -> Result<Outcome> {
    let (data, split) = load_dataset(cfg)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let train = data.subset(&split.train)?;
    let val = data.subset(&split.val)?;
    let test = data.subset(&split.test)?;
    let side = seg_side(&data);
    let k = cfg.num_classes;
    let mut metrics = BTreeMap::new();
    let mut artifacts = Vec::new();
    let mut save = |model: &crate::models::Model, name: &str| -> Result<()> {
        model.save(&dir.join(name))?;
        artifacts.push(name.to_string());
        Ok(())
    };
    let (history, unsupervised_label_reads) = match cfg.method {
        Method::Supervised => {
            let labels = subsample_labels(&split.train, cfg.label_fraction, seed)?;
            let labeled = train.subset(&labels.labeled)?;
            let (conv, _) = comparable_pair(cfg.model.param_budget, k, side, seed)?;
            let val_set = EvalSet::from_dataset(&val);
            let run = train_supervised(conv, &labeled, (!val_set.is_empty()).then_some(&val_set), &cfg.seg, seed)?;
            metrics.insert("val_iou".into(), run.history.best_val_iou.unwrap_or(f64::NAN));
            metrics.insert("test_iou".into(), evaluate_iou(&run.model, &EvalSet::from_dataset(&test), cfg.seg.eval_batch)?);
            save(&run.model, "model.s4ma")?;
            (serde_json::to_value(&run.history)?, 0)
        }
        Method::SemiCrossTeach => {
            let labels = subsample_labels(&split.train, cfg.label_fraction, seed)?;
            let labeled = train.subset(&labels.labeled)?;
            let unlabeled = train.subset(&labels.unlabeled)?;
            let (conv, attn) = comparable_pair(cfg.model.param_budget, k, side, seed)?;
            let val_set = EvalSet::from_dataset(&val);
            let run = train_cross_teaching(
                conv,
                attn,
                &labeled,
                &unlabeled,
                (!val_set.is_empty()).then_some(&val_set),
                &cfg.seg,
                seed,
            )?;
            let reads = unlabeled.label_reads();
            metrics.insert("val_iou".into(), run.history.best_val_iou.unwrap_or(f64::NAN));
            let test_set = EvalSet::from_dataset(&test);
            metrics.insert("test_iou".into(), run.evaluate(cfg.seg.eval_target, &test_set, cfg.seg.eval_batch)?);
            for (name, target) in [("test_iou_conv", EvalTarget::Conv), ("test_iou_attn", EvalTarget::Attention)] {
                metrics.insert(name.into(), run.evaluate(target, &test_set, cfg.seg.eval_batch)?);
            }
            save(&run.conv, "conv.s4ma")?;
            save(&run.attn, "attn.s4ma")?;
            (serde_json::to_value(&run.history)?, reads)
        }
        Method::SelfsupAug | Method::SelfsupArch => {
            let spec = |family| {
                ModelSpec::new(family, cfg.model.classifier_width, k)
                    .with_input_side(side)
                    .with_depth(cfg.model.classifier_depth)
            };
            let dim = cfg.pretrain.projection_dim;
            let (regime, branches) = if cfg.method == Method::SelfsupAug {
                let b = Branch::new(build_model(&spec(Family::ConvClassifier), seed)?, dim, seed ^ 0x9e37)?;
                (Regime::AugmentationAsymmetric, vec![b])
            } else {
                let conv = Branch::new(build_model(&spec(Family::ConvClassifier), seed)?, dim, seed ^ 0x9e37)?;
                let attn = Branch::new(build_model(&spec(Family::AttentionClassifier), seed ^ 0xa77e)?, dim, seed ^ 0x79b9)?;
                (Regime::ArchitectureAsymmetric, vec![conv, attn])
            };
            let pre = pretrain(branches, &train, regime, &cfg.pretrain, seed)?;
            let reads = train.label_reads();
            let backbone = pre.branches[0].backbone.clone();
            let mut ft_cfg = cfg.finetune.clone();
            ft_cfg.task = crate::selfsup::ClassTask::SingleLabel { classes: k };
            let run = finetune(backbone, &train, cfg.label_fraction, Some(&val), &ft_cfg, seed)?;
            if let Some(f) = run.history.last().and_then(|e| e.val_f1) {
                metrics.insert("val_f1".into(), f);
            }
            metrics.insert("test_f1".into(), evaluate_f1(&run.model, &test, ft_cfg.task, ft_cfg.averaging)?);
            metrics.insert("labeled_images".into(), run.labeled_ids.len() as f64);
            if let Some(p) = pre.history.probe_loss.last() {
                metrics.insert("final_probe_loss".into(), *p);
            }
            save(&run.model, "model.s4ma")?;
            let history = serde_json::json!({"pretrain": pre.history, "finetune": run.history});
            (history, reads)
        }
        Method::Picie => {
            let spec = ModelSpec::new(Family::ConvUnet, cfg.model.picie_width, cfg.model.feature_dim)
                .with_input_side(side)
                .with_depth(cfg.model.picie_depth);
            let run = train_picie(build_model(&spec, seed)?, &train, &cfg.picie, seed)?;
            let reads = train.label_reads();
            let n = if cfg.picie_eval_images == 0 { test.len() } else { cfg.picie_eval_images.min(test.len()) };
            let set = EvalSet::from_dataset(&test);
            let m = evaluate_unsupervised(&run.extractor, &run.clusters, &set.images[..n.min(set.images.len())], &set.masks[..n.min(set.masks.len())], k)?;
            metrics.insert("test_miou".into(), m.miou);
            save(&run.extractor.model, "extractor.s4ma")?;
            fs::write(dir.join("clusters.json"), serde_json::to_string_pretty(&run.clusters)?)?;
            artifacts.push("clusters.json".into());
            let history = serde_json::json!({"epochs": run.history, "matching": m.mapping});
            (history, reads)
        }
    };
    Ok(Outcome {
        history,
        metrics,
        unsupervised_label_reads,
        artifacts,
    })
}

/// Runs one seed, or returns its stored record if one exists.
pub fn run_seed(cfg: &TrainConfig, seed: u64, root: &Path) -> Result<(RunRecord, bool)> {
    let hash = cfg.config_hash()?;
    let dir = root.join(&hash).join(format!("seed-{seed}"));
    let path = dir.join(RECORD_FILE);
    if path.exists() {
        return Ok((RunRecord::load(&path)?, true));
    }
    fs::create_dir_all(&dir)?;
    let resolved = cfg.resolved();
    let start = Instant::now();
    let outcome = execute(&resolved, seed, &dir);
    let wall_clock_s = start.elapsed().as_secs_f64();
    let primary_metric = format!("test_{}", cfg.method.metric());
    let record = match outcome {
        Ok(o) => RunRecord {
            version: RECORD_VERSION,
            config_hash: hash,
            config: cfg.clone(),
            seed,
            status: RunStatus::Completed,
            history: o.history,
            final_metrics: o.metrics,
            primary_metric,
            unsupervised_label_reads: o.unsupervised_label_reads,
            wall_clock_s,
            artifacts: o.artifacts,
        },
        Err(e) => RunRecord {
            version: RECORD_VERSION,
            config_hash: hash,
            config: cfg.clone(),
            seed,
            status: RunStatus::Aborted {
                diagnostic: e.to_string(),
            },
            history: serde_json::Value::Null,
            final_metrics: BTreeMap::new(),
            primary_metric,
            unsupervised_label_reads: 0,
            wall_clock_s,
            artifacts: Vec::new(),
        },
    };
    write_atomic(&path, |w| {
        serde_json::to_writer_pretty(w, &record)?;
        Ok(())
    })?;
    Ok((record, false))
}

pub fn aggregate_records(cfg: &TrainConfig, records: &[RunRecord]) -> Result<Aggregate> {
    let done: Vec<&RunRecord> = records.iter().filter(|r| r.completed()).collect();
    let values: Vec<f64> = done.iter().filter_map(|r| r.primary()).collect();
    Ok(Aggregate {
        config_hash: cfg.config_hash()?,
        name: cfg.name.clone(),
        method: cfg.method,
        label_fraction: cfg.label_fraction,
        metric: cfg.method.metric().into(),
        completed_seeds: done.iter().map(|r| r.seed).collect(),
        aborted_seeds: records.iter().filter(|r| !r.completed()).map(|r| r.seed).collect(),
        summary: match values.len() {
            0 => None,
            1 => Some(SeedAggregate {
                values: values.clone(),
                mean: values[0],
                ci_halfwidth: 0.0,
                confidence: 0.95,
            }),
            _ => Some(aggregate_seeds(&values)?),
        },
    })
}

/// Runs every seed of `cfg` under `root/<config hash>/`, then writes the aggregate.
/// A failing seed is recorded with its diagnostic and the remaining seeds still run.
pub fn run_experiment(cfg: &TrainConfig, root: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dir = root.join(cfg.config_hash()?);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    let mut records = Vec::with_capacity(cfg.seeds.len());
    let mut cached = Vec::new();
    for &seed in &cfg.seeds {
        let (record, hit) = run_seed(cfg, seed, root)?;
        if hit {
            cached.push(seed);
        }
        records.push(record);
    }
    let aggregate = aggregate_records(cfg, &records)?;
    write_atomic(&dir.join(AGGREGATE_FILE), |w| {
        serde_json::to_writer_pretty(w, &aggregate)?;
        Ok(())
    })?;
    Ok(ExperimentResult {
        records,
        aggregate,
        dir,
        cached,
    })
}

/// Every aggregate stored under `root`, ordered by method then fraction.
pub fn collect_aggregates(root: &Path) -> Result<Vec<Aggregate>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    for d in dirs {
        let p = d.join(AGGREGATE_FILE);
        if p.exists() {
            out.push(serde_json::from_str(&fs::read_to_string(p)?)?);
        }
    }
    out.sort_by(|a: &Aggregate, b| a.method.cmp(&b.method).then(a.label_fraction.total_cmp(&b.label_fraction)));
    Ok(out)
}
