//! Run orchestration: manifests, output-directory management, and the work
//! behind the four CLI commands (generate, train, eval, predict).
//!
//! Every training run writes `manifest.json` into its output directory
//! before the first iteration. The manifest embeds the fully resolved
//! config, so feeding it back as the config of a later run reproduces the
//! metrics CSV byte for byte.

use crate::checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
use crate::config::{GenerateConfig, RunKind, Strategy, TrainConfig};
use crate::consensus::consensus_response;
use crate::data::{
    export_domain, generate_domain, load_domain, read_manifest, take_split, write_manifest,
    DatasetManifest, DomainEntry, Sample, Split,
};
use crate::error::{Error, Result};
use crate::image::{ImagePatch, SegmentationOutput};
use crate::instanceseg::instances_from_prediction;
use crate::metrics::{read_metrics_csv, EvalReport, MetricsWriter, StepRecord};
use crate::model::PUNet;
use crate::rng::{derive_rng, Stream};
use crate::selftrain::{adapt_separate, evaluate, train_joint, train_source, TrainOutput};
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Worker-count cap honored by all parallel sections.
pub const THREADS_ENV: &str = "PROBADAPT_THREADS";

/// Configure the global worker pool from `PROBADAPT_THREADS`. Call once at
/// process start; unset means one worker per core.
pub fn configure_threads_from_env() -> Result<()> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let text = raw.to_string_lossy();
    let n: usize = text
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={text:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn timestamp() -> String {
    chrono::Utc::now()
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

// -- lock file --------------------------------------------------------------

/// Guards an output directory against concurrent runs. The lock file is
/// removed when the guard drops; a crash can leave it behind, in which case
/// the error message says what to delete.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(dir: &Path) -> Result<LockGuard> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run; if no run is active, delete {}",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// -- manifest ---------------------------------------------------------------

/// File names a run produces, relative to its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub metrics_csv: String,
    pub best_checkpoint: String,
    pub final_checkpoint: String,
    pub teacher_checkpoint: Option<String>,
}

/// Everything needed to reproduce a run: the resolved config (defaults made
/// explicit by serialization), the seed, the software version, and where the
/// artifacts went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub config: TrainConfig,
    /// Pretrained checkpoint consumed by separate adaptation, if any.
    pub pretrained: Option<String>,
    pub outputs: RunOutputs,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

// -- generate ---------------------------------------------------------------

/// Render every configured domain to `<root>/<domain>/{images,labels}` and
/// write the dataset manifest. Fully determined by the config.
pub fn run_generate(cfg: &GenerateConfig) -> Result<DatasetManifest> {
    let root = Path::new(&cfg.root);
    fs::create_dir_all(root)?;
    let mut domains = Vec::new();
    for spec in &cfg.domains {
        spec.validate()?;
        let samples = generate_domain(spec, cfg.images_per_domain)?;
        domains.push(export_domain(root, spec, &samples)?);
    }
    let manifest = DatasetManifest { domains };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

// -- train ------------------------------------------------------------------

/// A train request, after flag handling: flags already override file values.
#[derive(Debug, Clone)]
pub struct TrainInvocation {
    pub config: TrainConfig,
    pub out_dir: PathBuf,
    pub pretrained: Option<PathBuf>,
    pub plots: bool,
}

/// Load a train config from a TOML config file or a JSON run manifest, then
/// apply flag overrides (flags win).
pub fn resolve_train_inputs(
    config_path: &Path,
    seed: Option<u64>,
    pretrained: Option<PathBuf>,
) -> Result<(TrainConfig, Option<PathBuf>)> {
    let text = fs::read_to_string(config_path)?;
    let (mut config, manifest_pretrained) =
        if config_path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
            (manifest.config, manifest.pretrained.map(PathBuf::from))
        } else {
            (TrainConfig::from_toml(&text)?, None)
        };
    if let Some(s) = seed {
        config.seed = s;
    }
    let pretrained = pretrained.or(manifest_pretrained);
    config.validate()?;
    Ok((config, pretrained))
}

struct LoadedData {
    source_train: Vec<Sample>,
    target_train: Vec<Sample>,
    val: Vec<Sample>,
}

fn domain_entry<'a>(ds: &'a DatasetManifest, name: &str, root: &Path) -> Result<&'a DomainEntry> {
    ds.domains
        .iter()
        .find(|d| d.spec.name == name)
        .ok_or_else(|| {
            Error::Config(format!(
                "domain {name:?} not present in dataset {}",
                root.display()
            ))
        })
}

/// Source training data is labeled; target training data is loaded without
/// labels (the adaptation protocol treats the target as unlabeled).
/// Validation uses the target's labeled val split when a target exists —
/// for reporting and checkpoint selection only — and the source val split
/// otherwise.
fn load_data(config: &TrainConfig, kind: RunKind) -> Result<LoadedData> {
    let root = Path::new(&config.data.root);
    let ds = read_manifest(root)?;
    let mut data = LoadedData {
        source_train: Vec::new(),
        target_train: Vec::new(),
        val: Vec::new(),
    };
    let needs_source = !matches!(kind, RunKind::Adapt(spec) if spec.strategy == Strategy::Separate);
    if needs_source {
        let name = config
            .data
            .source
            .as_deref()
            .ok_or_else(|| Error::Config("config lists no source domain".into()))?;
        let entry = domain_entry(&ds, name, root)?;
        let all = load_domain(root, name, entry.count, true)?;
        data.source_train = take_split(&all, Split::Train);
        data.val = take_split(&all, Split::Val);
    }
    if matches!(kind, RunKind::Adapt(_)) {
        let name = config
            .data
            .target
            .as_deref()
            .ok_or_else(|| Error::Config("config lists no target domain".into()))?;
        let entry = domain_entry(&ds, name, root)?;
        let unlabeled = load_domain(root, name, entry.count, false)?;
        data.target_train = take_split(&unlabeled, Split::Train);
        let labeled = load_domain(root, name, entry.count, true)?;
        data.val = take_split(&labeled, Split::Val);
    }
    Ok(data)
}

/// A prepared run: config validated, data loaded, directory locked, and the
/// manifest already on disk. Split from [`TrainSession::execute`] so the CLI
/// can distinguish configuration failures from runtime failures.
pub struct TrainSession {
    config: TrainConfig,
    kind: RunKind,
    out_dir: PathBuf,
    pretrained_model: Option<PUNet>,
    data: LoadedData,
    manifest: RunManifest,
    plots: bool,
    _lock: LockGuard,
}

/// Artifact locations and headline numbers of a finished run.
#[derive(Debug)]
pub struct TrainSummary {
    pub manifest_path: PathBuf,
    pub metrics_csv: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub teacher_checkpoint: Option<PathBuf>,
    pub plot_files: Vec<PathBuf>,
    pub best_val_dice: Option<f64>,
    pub best_iteration: u64,
}

impl TrainSession {
    pub fn prepare(invocation: TrainInvocation) -> Result<TrainSession> {
        let TrainInvocation {
            config,
            out_dir,
            pretrained,
            plots,
        } = invocation;
        config.validate()?;
        let kind = config.run_kind()?;

        let separate = matches!(kind, RunKind::Adapt(spec) if spec.strategy == Strategy::Separate);
        if separate && pretrained.is_none() {
            return Err(Error::Config(format!(
                "run {:?} adapts a pretrained model; pass --pretrained <checkpoint>",
                config.run
            )));
        }
        if !separate && pretrained.is_some() {
            return Err(Error::Config(
                "--pretrained only applies to separate adaptation runs".into(),
            ));
        }

        fs::create_dir_all(&out_dir)?;
        let lock = LockGuard::acquire(&out_dir)?;
        let pretrained_model = pretrained
            .as_deref()
            .map(|p| Ok::<_, Error>(load_checkpoint_expecting(p, &config.model)?.0))
            .transpose()?;
        let data = load_data(&config, kind)?;

        let uses_ema_teacher = match kind {
            RunKind::Adapt(spec) => spec.method == crate::config::Method::MeanTeacher,
            RunKind::Source => false,
        };
        let manifest = RunManifest {
            version: VERSION.into(),
            seed: config.seed,
            started_at: timestamp(),
            finished_at: None,
            config: config.clone(),
            pretrained: pretrained.map(|p| p.display().to_string()),
            outputs: RunOutputs {
                metrics_csv: "metrics.csv".into(),
                best_checkpoint: "best.ckpt".into(),
                final_checkpoint: "final.ckpt".into(),
                teacher_checkpoint: uses_ema_teacher.then(|| "teacher.ckpt".into()),
            },
        };
        manifest.write(&out_dir.join("manifest.json"))?;

        Ok(TrainSession {
            config,
            kind,
            out_dir,
            pretrained_model,
            data,
            manifest,
            plots,
            _lock: lock,
        })
    }

    pub fn execute(mut self) -> Result<TrainSummary> {
        let csv_path = self.out_dir.join(&self.manifest.outputs.metrics_csv);
        let mut writer = MetricsWriter::create(&csv_path)?;
        let output: TrainOutput = {
            let mut sink = |r: StepRecord| writer.write(&r);
            match self.kind {
                RunKind::Source => train_source(
                    &self.config,
                    &self.data.source_train,
                    &self.data.val,
                    &mut sink,
                )?,
                RunKind::Adapt(spec) if spec.strategy == Strategy::Joint => train_joint(
                    &self.config,
                    &self.data.source_train,
                    &self.data.target_train,
                    &self.data.val,
                    &mut sink,
                )?,
                RunKind::Adapt(_) => adapt_separate(
                    &self.config,
                    self.pretrained_model
                        .take()
                        .expect("prepare() enforced the pretrained checkpoint"),
                    &self.data.target_train,
                    &self.data.val,
                    &mut sink,
                )?,
            }
        };
        writer.finish()?;

        let best_checkpoint = self.out_dir.join(&self.manifest.outputs.best_checkpoint);
        let final_checkpoint = self.out_dir.join(&self.manifest.outputs.final_checkpoint);
        save_checkpoint(&best_checkpoint, &output.best_weights, output.best_iteration)?;
        save_checkpoint(
            &final_checkpoint,
            &output.final_weights,
            self.config.schedule.total_iterations,
        )?;
        let teacher_checkpoint = match (&self.manifest.outputs.teacher_checkpoint, &output.final_teacher) {
            (Some(name), Some(teacher)) => {
                let path = self.out_dir.join(name);
                save_checkpoint(&path, teacher, self.config.schedule.total_iterations)?;
                Some(path)
            }
            _ => None,
        };

        let plot_files = if self.plots {
            write_plots(&csv_path, &self.out_dir)?
        } else {
            Vec::new()
        };

        self.manifest.finished_at = Some(timestamp());
        let manifest_path = self.out_dir.join("manifest.json");
        self.manifest.write(&manifest_path)?;

        Ok(TrainSummary {
            manifest_path,
            metrics_csv: csv_path,
            best_checkpoint,
            final_checkpoint,
            teacher_checkpoint,
            plot_files,
            best_val_dice: output.best_val_dice,
            best_iteration: output.best_iteration,
        })
    }
}

/// Prepare and execute in one call — for callers that do not care which
/// phase an error came from.
pub fn run_train(invocation: TrainInvocation) -> Result<TrainSummary> {
    TrainSession::prepare(invocation)?.execute()
}

// -- eval -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalInvocation {
    pub checkpoint: PathBuf,
    pub config: TrainConfig,
    /// Defaults to the config's target domain, falling back to the source.
    pub domain: Option<String>,
    pub split: Split,
    pub n_samples: usize,
    pub seed: u64,
    /// When set, the report is also written as JSON into this directory.
    pub out_dir: Option<PathBuf>,
    /// Additionally derive instance counts from each prediction.
    pub instances: bool,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub report_path: Option<PathBuf>,
    /// Per-image instance counts, aligned with `report.per_image_dice`.
    pub instance_counts: Option<Vec<usize>>,
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

pub fn run_eval(inv: &EvalInvocation) -> Result<EvalOutcome> {
    inv.config.model.validate()?;
    let (model, _) = load_checkpoint_expecting(&inv.checkpoint, &inv.config.model)?;
    let domain = inv
        .domain
        .clone()
        .or_else(|| inv.config.data.target.clone())
        .or_else(|| inv.config.data.source.clone())
        .ok_or_else(|| Error::Config("no domain to evaluate; config lists neither target nor source".into()))?;
    let root = Path::new(&inv.config.data.root);
    let ds = read_manifest(root)?;
    let entry = domain_entry(&ds, &domain, root)?;
    let all = load_domain(root, &domain, entry.count, true)?;
    let samples = take_split(&all, inv.split);
    let mut report = evaluate(&model, &samples, inv.n_samples, inv.seed)?;
    report.split = split_name(inv.split).into();

    let instance_counts = if inv.instances {
        Some(count_instances(&model, &samples, inv.n_samples, inv.seed)?)
    } else {
        None
    };

    let report_path = match &inv.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("eval_{domain}_{}.json", split_name(inv.split)));
            report.write_json(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(EvalOutcome {
        report,
        report_path,
        instance_counts,
    })
}

/// Instance counts from the mean prediction. Two-class outputs provide a
/// boundary channel; single-class outputs get a zero boundary, which makes
/// the watershed equivalent to connected components of the thresholded
/// foreground.
fn count_instances(
    model: &PUNet,
    samples: &[Sample],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let mut rng = derive_rng(seed, Stream::Evaluation, s.index as u64, 1);
            let preds = model.predict_samples(&s.image, n_samples, &mut rng)?;
            let mean = SegmentationOutput::mean_of(&preds)?;
            let two_class = if mean.classes() == 2 {
                mean
            } else {
                let fg = mean.class_plane(0);
                let (h, w) = fg.dim();
                let mut arr = Array3::zeros((2, h, w));
                arr.slice_mut(s![0, .., ..]).assign(&fg);
                SegmentationOutput::new(arr)?
            };
            let labeling = instances_from_prediction(&two_class, 0.5, 0.5)?;
            Ok(labeling.instance_count as usize)
        })
        .collect()
}

// -- predict ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PredictInvocation {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub out_dir: PathBuf,
    pub n_samples: usize,
    pub seed: u64,
    /// Confidence threshold for the consensus map.
    pub theta: f64,
}

/// Write per-sample predictions, their mean, and the consensus map as PGM
/// files. Returns the paths written, deterministic in the seed.
pub fn run_predict(inv: &PredictInvocation) -> Result<Vec<PathBuf>> {
    let (model, _) = load_checkpoint(&inv.checkpoint)?;
    let pixels = crate::data::pgm::read_image(&inv.image)?;
    let patch = ImagePatch::new(pixels)?;
    let mut rng = derive_rng(inv.seed, Stream::Prediction, 0, 0);
    let samples = model.predict_samples(&patch, inv.n_samples, &mut rng)?;
    fs::create_dir_all(&inv.out_dir)?;
    let mut written = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let path = inv.out_dir.join(format!("sample_{i:02}.pgm"));
        crate::data::pgm::write_image(&path, &sample.class_plane(0))?;
        written.push(path);
    }
    let mean = SegmentationOutput::mean_of(&samples)?;
    let mean_path = inv.out_dir.join("mean.pgm");
    crate::data::pgm::write_image(&mean_path, &mean.class_plane(0))?;
    written.push(mean_path);
    let consensus = consensus_response(&samples, inv.theta)?;
    let consensus_path = inv.out_dir.join("consensus.pgm");
    crate::data::pgm::write_image(&consensus_path, &consensus)?;
    written.push(consensus_path);
    Ok(written)
}

// -- plots ------------------------------------------------------------------

/// Loss and validation-dice curves derived from the metrics CSV, written as
/// standalone SVG files.
pub fn write_plots(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_metrics_csv(csv_path)?;
    let mut written = Vec::new();
    if records.is_empty() {
        return Ok(written);
    }
    let loss: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.iteration as f64, r.loss_total))
        .collect();
    let loss_path = out_dir.join("loss.svg");
    fs::write(&loss_path, svg_line_chart("training loss", "loss", &loss))?;
    written.push(loss_path);

    let dice: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.val_dice.map(|d| (r.iteration as f64, d)))
        .collect();
    if !dice.is_empty() {
        let dice_path = out_dir.join("val_dice.svg");
        fs::write(&dice_path, svg_line_chart("validation dice", "dice", &dice))?;
        written.push(dice_path);
    }
    Ok(written)
}

fn svg_line_chart(title: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" ",
            "font-size=\"16\">{title}</text>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{xmax}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<text x=\"{m}\" y=\"{ylabpos}\" font-family=\"sans-serif\" font-size=\"12\">",
            "{ylabel}: {ymin:.4} to {ymax:.4}</text>\n",
            "<text x=\"{xmax}\" y=\"{xlabpos}\" text-anchor=\"end\" font-family=\"sans-serif\" ",
            "font-size=\"12\">iteration {xmin:.0} to {xmax_v:.0}</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = W,
        h = H,
        tx = W / 2.0,
        title = title,
        m = M,
        ybase = H - M,
        xmax = W - M,
        ylabpos = M - 8.0,
        ylabel = ylabel,
        ymin = y0,
        ymax = y1,
        xlabpos = H - M + 20.0,
        xmin = x0,
        xmax_v = x1,
        pts = path.join(" ")
    )
}
