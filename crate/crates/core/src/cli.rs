//! Command-line driver: `train`, `eval`, `explain`, `gradcheck`, `bench`
//! and `gen-phantoms`, configured by a TOML file plus flag overrides.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 for
//! usage and configuration errors. Errors go to stderr as one line;
//! stdout carries progress and tables only.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    phantom::{PhantomVariant, MANIFEST_FILE},
    read_raw_volume, read_volume, write_phantom_dataset, BoundingBox, DatasetManifest, PhantomSpec, Split,
};
use crate::error::{Error, Result};
use crate::gradcam::{self, BoxOverlap};
use crate::gradcheck::{run_gradcheck_with, Fault, GradcheckConfig};
use crate::layers::Mode;
use crate::metrics::MetricSummary;
use crate::model::{ArchitectureSpec, Model};
use crate::tensor::{DType, Element};
use crate::train::{self, Dataset, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "resattnet", version, about = "3D residual self-attention networks for volumetric classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Architecture preset
    #[arg(long, global = true, value_name = "NAME")]
    pub model: Option<String>,
    /// Feature layer to explain
    #[arg(long, global = true, value_name = "NAME")]
    pub layer: Option<String>,
    /// Class to explain
    #[arg(long, global = true, value_name = "0|1", value_parser = clap::value_parser!(u8).range(0..=1))]
    pub class: Option<u8>,
    /// Channel width multiplier
    #[arg(long = "width-mult", global = true, value_name = "R")]
    pub width_mult: Option<f64>,
    /// Dataset manifest (CSV)
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Model checkpoint for eval/explain
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Volume to explain
    #[arg(long, global = true, value_name = "PATH")]
    pub volume: Option<PathBuf>,
    /// Breaks the conv backward pass so the gradient check must fail.
    #[arg(long, global = true, hide = true)]
    pub corrupt_conv_backward: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a model on a manifest's train split
    Train,
    /// Score a checkpoint on one split
    Eval,
    /// Grad-CAM heatmap for one volume
    Explain,
    /// Finite-difference check of every backward pass
    Gradcheck,
    /// Train and evaluate several architectures on one dataset
    Bench,
    /// Write a synthetic phantom dataset
    GenPhantoms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Train/val/test fractions applied when the manifest has no splits.
    pub split_fractions: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            split_fractions: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            split: Split::Test,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub checkpoint: Option<PathBuf>,
    pub volume: Option<PathBuf>,
    /// Ground-truth mask to score the peak region against.
    pub mask: Option<PathBuf>,
    pub layer: Option<String>,
    pub class: usize,
    pub top_fraction: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            checkpoint: None,
            volume: None,
            mask: None,
            layer: None,
            class: 1,
            top_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_per_class: usize,
    pub fractions: [f64; 3],
    pub grid: usize,
    pub noise_std: f64,
    pub blob_count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub delta: f64,
    pub variant: PhantomVariant,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let s = PhantomSpec::default();
        PhantomConfig {
            n_per_class: 250,
            fractions: [0.8, 0.0, 0.2],
            grid: s.grid,
            noise_std: s.noise_std,
            blob_count: s.blob_count,
            radius_min: s.radius_min,
            radius_max: s.radius_max,
            delta: s.delta,
            variant: s.variant,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid: self.grid,
            noise_std: self.noise_std,
            blob_count: self.blob_count,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            delta: self.delta,
            variant: self.variant,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub models: Vec<String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            models: ["vgg", "resnet18", "resnet34", "resattnet18", "resattnet34"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// Everything a command needs. Top-level `seed` overrides the seeds of the
/// sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<String>,
    pub width_mult: f64,
    pub seed: Option<u64>,
    pub dtype: DType,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
    pub phantom: PhantomConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            width_mult: 1.0,
            seed: None,
            dtype: DType::F32,
            out: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            explain: ExplainConfig::default(),
            phantom: PhantomConfig::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

pub const DEFAULT_MODEL: &str = "micro-resattnet";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

fn absolutize(p: &Path, base: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))
    }

    /// Reads the config file (paths inside resolve against its directory)
    /// and applies flag overrides (paths resolve against the working
    /// directory).
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                let mut cfg = Self::from_toml(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
                let base = absolutize(path.parent().unwrap_or(Path::new("")), &cwd);
                for p in [
                    &mut cfg.out,
                    &mut cfg.data.manifest,
                    &mut cfg.eval.checkpoint,
                    &mut cfg.explain.checkpoint,
                    &mut cfg.explain.volume,
                    &mut cfg.explain.mask,
                ]
                .into_iter()
                .flatten()
                {
                    *p = absolutize(p, &base);
                }
                cfg
            }
            None => RunConfig::default(),
        };
        let abs = |p: &PathBuf| absolutize(p, &cwd);
        if let Some(s) = flags.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &flags.out {
            cfg.out = Some(abs(o));
        }
        if let Some(m) = &flags.model {
            cfg.model = Some(m.clone());
        }
        if let Some(l) = &flags.layer {
            cfg.explain.layer = Some(l.clone());
        }
        if let Some(c) = flags.class {
            cfg.explain.class = c as usize;
        }
        if let Some(w) = flags.width_mult {
            cfg.width_mult = w;
        }
        if let Some(m) = &flags.manifest {
            cfg.data.manifest = Some(abs(m));
        }
        if let Some(c) = &flags.checkpoint {
            cfg.eval.checkpoint = Some(abs(c));
            cfg.explain.checkpoint = Some(abs(c));
        }
        if let Some(v) = &flags.volume {
            cfg.explain.volume = Some(abs(v));
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
            cfg.gradcheck.seed = s;
        }
        if !(cfg.width_mult > 0.0 && cfg.width_mult.is_finite()) {
            return Err(Error::Config(format!("width_mult must be > 0, got {}", cfg.width_mult)));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    fn model_name(&self) -> &str {
        self.model.as_deref().unwrap_or(DEFAULT_MODEL)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set out in the config".into()))
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let path = self
            .data
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no manifest: pass --manifest or set [data] manifest".into()))?;
        let m = DatasetManifest::load(path)?;
        if m.entries.iter().all(|e| e.split.is_none()) {
            return m.split(self.data.split_fractions, m.seed.unwrap_or(self.seed()));
        }
        Ok(m)
    }

    /// Writes the fully resolved config next to the command's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let mut resolved = self.clone();
        resolved.seed = Some(self.seed());
        resolved.model = Some(self.model_name().to_string());
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string(&resolved).map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        let p = dir.join(RESOLVED_CONFIG);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ManifestNotFound(_) => 2,
        _ => 1,
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn split_records(m: &DatasetManifest, split: Split) -> Result<Dataset<f64>> {
    let records = m.load_records(Some(split))?;
    Ok(Dataset::from_records(&records))
}

fn cast_dataset<T: Element>(d: &Dataset<f64>) -> Dataset<T> {
    Dataset {
        inputs: d.inputs.iter().map(|t| t.cast()).collect(),
        labels: d.labels.clone(),
        ids: d.ids.clone(),
    }
}

fn input_dims(d: &Dataset<f64>) -> Result<[usize; 3]> {
    let first = d.inputs.first().ok_or_else(|| Error::NoSamples("train split is empty".into()))?;
    let dims = first.shape().spatial();
    if let Some((i, _)) = d.inputs.iter().enumerate().find(|(_, t)| t.shape().spatial() != dims) {
        return Err(Error::DimensionMismatch {
            op: "dataset",
            detail: format!("{} has dims {:?}, first volume has {dims:?}", d.ids[i], d.inputs[i].shape().spatial()),
        });
    }
    Ok(dims)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undef".into())
}

fn train_typed<T: Element>(cfg: &RunConfig, spec: &ArchitectureSpec, tr: &Dataset<f64>, val: &Dataset<f64>, out: &Path) -> Result<train::TrainReport> {
    let mut model = Model::<T>::build(spec, input_dims(tr)?, cfg.seed())?;
    let (tr, val) = (cast_dataset::<T>(tr), cast_dataset::<T>(val));
    let epochs = cfg.train.epochs;
    train::train(&mut model, &tr, Some(&val), &cfg.train, Some(out), &mut |r| {
        let val = match (r.val_loss, r.val_acc) {
            (Some(l), Some(a)) => format!(" val_loss {l:.6} val_acc {a:.4}"),
            _ => String::new(),
        };
        println!(
            "epoch {}/{} lr {:.3e} loss {:.6} acc {:.4}{val}",
            r.epoch + 1,
            epochs,
            r.lr,
            r.loss,
            r.acc
        );
    })
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let manifest = cfg.manifest()?;
    let spec = ArchitectureSpec::preset(cfg.model_name(), cfg.width_mult)?;
    cfg.write_resolved(out)?;
    let tr = split_records(&manifest, Split::Train)?;
    if tr.is_empty() {
        return Err(Error::NoSamples("train split is empty".into()));
    }
    let val = split_records(&manifest, Split::Val)?;
    println!(
        "training {} on {} samples ({} val), {} epochs",
        spec.name,
        tr.len(),
        val.len(),
        cfg.train.epochs
    );
    let report = match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg, &spec, &tr, &val, out)?,
        DType::F64 => train_typed::<f64>(cfg, &spec, &tr, &val, out)?,
    };
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "done: final train acc {:.4}, best epoch {} (acc {:.4}), checkpoints in {}",
        last.acc,
        report.best_epoch + 1,
        report.best_acc,
        out.display()
    );
    Ok(())
}

/// What `eval` writes to `eval_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub model: String,
    pub split: Split,
    pub loss: f64,
    pub metrics: MetricSummary,
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    if let Some(out) = &cfg.out {
        let best = out.join(train::BEST_CHECKPOINT);
        if best.is_file() {
            return Ok(best);
        }
    }
    Err(Error::Config("no checkpoint: pass --checkpoint or set it in the config".into()))
}

/// Fails when the config names an architecture the checkpoint was not
/// trained with.
fn check_spec(cfg: &RunConfig, stored: &ArchitectureSpec, path: &Path) -> Result<()> {
    if let Some(name) = &cfg.model {
        let wanted = ArchitectureSpec::preset(name, cfg.width_mult)?;
        if &wanted != stored {
            return Err(Error::CheckpointMismatch(format!(
                "{} holds {:?} ({} stages, widths {:?}) but the config asks for {:?} (widths {:?}, width_mult {})",
                path.display(),
                stored.name,
                stored.stages.len(),
                stored.stages.iter().map(|s| s.channels).collect::<Vec<_>>(),
                name,
                wanted.stages.iter().map(|s| s.channels).collect::<Vec<_>>(),
                cfg.width_mult
            )));
        }
    }
    Ok(())
}

fn eval_typed<T: Element>(path: &Path, data: &Dataset<f64>, batch: usize) -> Result<train::Evaluation> {
    let model = checkpoint::load::<T>(path)?;
    train::evaluate(&model, &cast_dataset::<T>(data), batch, Mode::Eval)
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let ckpt = checkpoint_path(cfg, cfg.eval.checkpoint.as_deref())?;
    let header = checkpoint::peek(&ckpt)?;
    check_spec(cfg, &header.spec, &ckpt)?;
    let manifest = cfg.manifest()?;
    let split = cfg.eval.split;
    let data = split_records(&manifest, split)?;
    if data.is_empty() {
        return Err(Error::NoSamples(format!("the {split} split of the manifest is empty")));
    }
    cfg.write_resolved(out)?;
    let ev = match header.dtype {
        DType::F32 => eval_typed::<f32>(&ckpt, &data, cfg.train.batch_size)?,
        DType::F64 => eval_typed::<f64>(&ckpt, &data, cfg.train.batch_size)?,
    };
    let metrics = crate::metrics::summarize(&ev.scores, cfg.eval.threshold)?;
    let mut csv = String::from("subject,label,score,predicted,loss\n");
    for (i, s) in ev.scores.iter().enumerate() {
        csv.push_str(&format!("{},{},{:e},{},{:e}\n", data.ids[i], s.label, s.score, ev.predicted[i], ev.losses[i]));
    }
    let p = out.join("eval_scores.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let summary = EvalSummary {
        checkpoint: ckpt,
        model: header.spec.name.clone(),
        split,
        loss: ev.loss,
        metrics,
    };
    write_json(&out.join("eval_summary.json"), &summary)?;
    let m = &summary.metrics;
    println!(
        "{} samples: ACC {} SEN {} SPE {} AUC {} (tp {} tn {} fp {} fn {})",
        m.samples,
        fmt_opt(m.acc),
        fmt_opt(m.sen),
        fmt_opt(m.spe),
        fmt_opt(m.auc),
        m.counts.tp,
        m.counts.tn,
        m.counts.fp,
        m.counts.fn_
    );
    Ok(())
}

/// What `explain` writes to `explain_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub volume: PathBuf,
    pub layer: String,
    pub class: usize,
    pub logit: f64,
    pub probability: f64,
    /// Spatial size of the explained layer's map.
    pub map_dims: [usize; 3],
    pub top_fraction: f64,
    pub region_voxels: usize,
    pub region_bbox: Option<BoundingBox>,
    pub peak_voxel: Option<[usize; 3]>,
    pub mask_bbox: Option<BoundingBox>,
    pub overlap: Option<BoxOverlap>,
    pub heatmap: PathBuf,
    pub montage: PathBuf,
}

fn explain_typed<T: Element>(cfg: &RunConfig, ckpt: &Path, volume: &Path, out: &Path) -> Result<ExplainReport> {
    let model = checkpoint::load::<T>(ckpt)?;
    let record = read_volume(volume, "explain", 0)?;
    let x = record.volume.cast::<T>();
    let layer = match &cfg.explain.layer {
        Some(l) => l.clone(),
        None => model.last_feature_layer(),
    };
    let res = gradcam::compute_gradcam(&model, &x, cfg.explain.class, &layer)?;
    let region = gradcam::peak_region(&res, cfg.explain.top_fraction)?;
    let dims = res.upsampled.shape().spatial();
    let mut region_mask = vec![0f32; res.upsampled.len()];
    for p in &region {
        region_mask[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = 1.0;
    }
    let (mask_bbox, overlap) = match &cfg.explain.mask {
        Some(m) => {
            let mask = read_raw_volume(m)?;
            match BoundingBox::of_mask(mask.dims, &mask.data) {
                Some(bb) => (Some(bb), Some(gradcam::overlap(&region, &bb))),
                None => (None, None),
            }
        }
        None => (None, None),
    };
    let heatmap = out.join("heatmap.nii");
    let montage = out.join("heatmap_montage.png");
    let background = read_raw_volume(volume)?;
    gradcam::export_heatmap(&res, Some(&background), &heatmap, &montage)?;
    Ok(ExplainReport {
        volume: volume.to_path_buf(),
        layer,
        class: cfg.explain.class,
        logit: res.logit,
        probability: res.probability,
        map_dims: res.heatmap.shape().spatial(),
        top_fraction: cfg.explain.top_fraction,
        region_voxels: region.len(),
        region_bbox: BoundingBox::of_mask(dims, &region_mask),
        peak_voxel: region.first().copied(),
        mask_bbox,
        overlap,
        heatmap,
        montage,
    })
}

fn cmd_explain(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let ckpt = checkpoint_path(cfg, cfg.explain.checkpoint.as_deref())?;
    let volume = cfg
        .explain
        .volume
        .clone()
        .ok_or_else(|| Error::Config("no volume to explain: pass --volume or set [explain] volume".into()))?;
    let header = checkpoint::peek(&ckpt)?;
    check_spec(cfg, &header.spec, &ckpt)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = match header.dtype {
        DType::F32 => explain_typed::<f32>(cfg, &ckpt, &volume, out)?,
        DType::F64 => explain_typed::<f64>(cfg, &ckpt, &volume, out)?,
    };
    cfg.write_resolved(out)?;
    write_json(&out.join("explain_report.json"), &report)?;
    println!(
        "class {} p={:.4} at {} ({:?} map): top {:.0}% mass in {} voxels{}",
        report.class,
        report.probability,
        report.layer,
        report.map_dims,
        100.0 * report.top_fraction,
        report.region_voxels,
        match &report.overlap {
            Some(o) => format!(", {} inside the mask box (IoU {:.4})", o.inside, o.iou),
            None => String::new(),
        }
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, fault: Fault) -> Result<bool> {
    let report = run_gradcheck_with(&cfg.gradcheck, fault)?;
    print!("{}", report.table());
    if let Some(out) = &cfg.out {
        cfg.write_resolved(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    println!("{}", if report.passed { "all gradients match" } else { "gradient check FAILED" });
    Ok(report.passed)
}

/// One row of the `bench` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
    pub params: Option<usize>,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn bench_one<T: Element>(cfg: &RunConfig, name: &str, tr: &Dataset<f64>, te: &Dataset<f64>, dir: &Path) -> Result<(usize, MetricSummary)> {
    let spec = ArchitectureSpec::preset(name, cfg.width_mult)?;
    let mut model = Model::<T>::build(&spec, input_dims(tr)?, cfg.seed())?;
    let (tr, te) = (cast_dataset::<T>(tr), cast_dataset::<T>(te));
    train::train(&mut model, &tr, None, &cfg.train, Some(dir), &mut |_| {})?;
    let ev = train::evaluate(&model, &te, cfg.train.batch_size, Mode::Eval)?;
    Ok((model.param_count(), crate::metrics::summarize(&ev.scores, cfg.eval.threshold)?))
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let manifest = cfg.manifest()?;
    let tr = split_records(&manifest, Split::Train)?;
    let te = split_records(&manifest, Split::Test)?;
    if tr.is_empty() || te.is_empty() {
        return Err(Error::NoSamples("bench needs nonempty train and test splits".into()));
    }
    cfg.write_resolved(out)?;
    let mut rows = Vec::new();
    for name in &cfg.bench.models {
        let start = Instant::now();
        let dir = out.join(name);
        let result = match cfg.dtype {
            DType::F32 => bench_one::<f32>(cfg, name, &tr, &te, &dir),
            DType::F64 => bench_one::<f64>(cfg, name, &tr, &te, &dir),
        };
        let seconds = start.elapsed().as_secs_f64();
        let row = match result {
            Ok((params, m)) => BenchRow {
                model: name.clone(),
                acc: m.acc,
                sen: m.sen,
                spe: m.spe,
                auc: m.auc,
                params: Some(params),
                seconds,
                error: None,
            },
            Err(e) => BenchRow {
                model: name.clone(),
                acc: None,
                sen: None,
                spe: None,
                auc: None,
                params: None,
                seconds,
                error: Some(e.to_string()),
            },
        };
        println!(
            "{:<16} ACC {} SEN {} SPE {} AUC {} params {} {:.1}s{}",
            row.model,
            fmt_opt(row.acc),
            fmt_opt(row.sen),
            fmt_opt(row.spe),
            fmt_opt(row.auc),
            row.params.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            row.seconds,
            row.error.as_ref().map(|e| format!(" failed: {e}")).unwrap_or_default()
        );
        rows.push(row);
    }
    write_json(&out.join("bench.json"), &rows)?;
    let mut csv = String::from("model,acc,sen,spe,auc,params,seconds,error\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.3},{}\n",
            r.model,
            cell(r.acc),
            cell(r.sen),
            cell(r.spe),
            cell(r.auc),
            r.params.map(|p| p.to_string()).unwrap_or_default(),
            r.seconds,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    let p = out.join("bench.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))
}

fn cmd_gen_phantoms(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let spec = cfg.phantom.spec(cfg.seed());
    let m = write_phantom_dataset(out, &spec, cfg.phantom.n_per_class, cfg.phantom.fractions)?;
    cfg.write_resolved(out)?;
    println!(
        "wrote {} phantoms ({} train, {} val, {} test) to {}",
        m.entries.len(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

/// Runs one command; `Ok(false)` means it ran but reported failure.
pub fn run(cli: &Cli) -> Result<bool> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    match cli.command {
        Command::Train => cmd_train(&cfg).map(|_| true),
        Command::Eval => cmd_eval(&cfg).map(|_| true),
        Command::Explain => cmd_explain(&cfg).map(|_| true),
        Command::Gradcheck => {
            let fault = if cli.flags.corrupt_conv_backward { Fault::ConvBackward } else { Fault::None };
            cmd_gradcheck(&cfg, fault)
        }
        Command::Bench => cmd_bench(&cfg).map(|_| true),
        Command::GenPhantoms => cmd_gen_phantoms(&cfg).map(|_| true),
    }
}

/// Parses arguments, runs, reports errors, and returns the exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("modle = \"vgg\"").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = 0.1").is_err());
        let cfg = RunConfig::from_toml("model = \"vgg\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(4);
        cfg.model = Some("resnet18".into());
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
