//! `logad` command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{read_config_file, resolve_data_dir, RunConfig, DATA_ROOT_ENV};
use crate::datasets::{
    gen_mini_loco, load_loco_layout, preprocess, save_image, Dataset, MiniLocoSpec, RawImage, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{category_metrics, score_test_split, MapSource, Report, METRIC_KEYS};
use crate::nets::TripletModel;
use crate::scorer::{self, CalibrationStats, Projection};
use crate::trainer::{pretrain_teacher, run_training};

pub const MARGIN_GRID: [f64; 5] = [0.0, 0.2, 0.4, 1.0, 2.0];
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const MAPS_MANIFEST: &str = "maps.json";

#[derive(Parser, Debug)]
#[command(name = "logad", version, about = "Logical anomaly detection with teacher/student/auto-encoder distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration; unspecified keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the 64x64, 32-channel profile instead of the desk defaults.
    #[arg(long)]
    pub fast: bool,
    /// Override any configuration key, e.g. `--set margin=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for initialization and the training image order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total optimizer steps.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Hinge margin of the feature-space constraint, in [0, 2].
    #[arg(long)]
    pub margin: Option<f64>,
    /// Square input side in pixels (power of two).
    #[arg(long)]
    pub image_size: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = if self.fast { RunConfig::fast() } else { RunConfig::default() };
        let mut overrides = self.overrides.clone();
        if let Some(v) = self.seed {
            overrides.push(format!("seed={v}"));
        }
        if let Some(v) = self.iterations {
            overrides.push(format!("iterations={v}"));
        }
        if let Some(v) = self.margin {
            overrides.push(format!("margin={v:?}"));
        }
        if let Some(v) = self.image_size {
            overrides.push(format!("image_size={v}"));
        }
        RunConfig::load(self.config.as_deref(), base, &overrides)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Margin,
    Ablation,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic pegboard dataset in the LOCO directory layout.
    GenData {
        /// TOML dataset spec; unspecified keys take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
        /// 64x64 canvases.
        #[arg(long)]
        fast: bool,
        /// Generator seed, overriding the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill the teacher from a fixed random wide descriptor network.
    PretrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (defaults to $LOGAD_DATA_ROOT).
        #[arg(long, env = DATA_ROOT_ENV)]
        data: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train student and auto-encoder on the normal training images.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (defaults to $LOGAD_DATA_ROOT).
        #[arg(long, env = DATA_ROOT_ENV)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints, the loss log and the resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, conflicts_with = "teacher")]
        resume: Option<PathBuf>,
        /// Take the teacher from a pretrain-teacher checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Calibrate on validation images, score the test split and report metrics.
    Eval {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (defaults to $LOGAD_DATA_ROOT).
        #[arg(long, env = DATA_ROOT_ENV)]
        data: Option<PathBuf>,
        /// Report path (JSON); a text table goes next to it and to stdout.
        #[arg(long)]
        out: PathBuf,
        /// Quantile-normalize without the sigmoid.
        #[arg(long)]
        linear_projection: bool,
        /// Use ground-truth masks as maps (sanity check; all metrics become 1).
        #[arg(long)]
        oracle_maps: bool,
    },
    /// Write per-image anomaly maps as raw float planes with a manifest.
    Score {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (defaults to $LOGAD_DATA_ROOT).
        #[arg(long, env = DATA_ROOT_ENV)]
        data: Option<PathBuf>,
        /// Directory for the map planes and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Quantile-normalize without the sigmoid.
        #[arg(long)]
        linear_projection: bool,
    },
    /// Train and evaluate over a margin grid or the cumulative ablation rows.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (defaults to $LOGAD_DATA_ROOT).
        #[arg(long, env = DATA_ROOT_ENV)]
        data: Option<PathBuf>,
        /// Directory holding one run per sweep point plus the comparison table.
        #[arg(long)]
        out: PathBuf,
        /// Margin grid or cumulative ablation rows.
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Margin values (comma separated) replacing the default grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Render heatmaps and input / ground truth / map panels from `score` output.
    Plot {
        /// Output directory of `score`.
        #[arg(long)]
        maps: PathBuf,
        /// Directory for the PNG figures.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, fast, seed } => cmd_gen_data(spec.as_deref(), &out, fast, seed),
        Command::PretrainTeacher { cfg, data, out } => {
            let cfg = cfg.resolve()?;
            cmd_pretrain_teacher(&cfg, &resolve_data_dir(data.as_deref())?, &out)
        }
        Command::Train { cfg, data, out, resume, teacher } => {
            let cfg = cfg.resolve()?;
            let data = resolve_data_dir(data.as_deref())?;
            cmd_train(&cfg, &data, &out, resume.as_deref(), teacher.as_deref()).map(|_| ())
        }
        Command::Eval { checkpoint, data, out, linear_projection, oracle_maps } => {
            let projection = if linear_projection { Projection::Linear } else { Projection::Sigmoid };
            let source = if oracle_maps { MapSource::Oracle } else { MapSource::Model };
            let report = cmd_eval(&checkpoint, &resolve_data_dir(data.as_deref())?, &out, projection, source)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Score { checkpoint, data, out, linear_projection } => {
            let projection = if linear_projection { Projection::Linear } else { Projection::Sigmoid };
            cmd_score(&checkpoint, &resolve_data_dir(data.as_deref())?, &out, projection)
        }
        Command::Sweep { cfg, data, out, axis, values } => {
            let cfg = cfg.resolve()?;
            let table = cmd_sweep(&cfg, &resolve_data_dir(data.as_deref())?, &out, axis, values)?;
            print!("{}", table.to_markdown());
            Ok(())
        }
        Command::Plot { maps, out } => cmd_plot(&maps, &out),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(d)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(spec: Option<&Path>, out: &Path, fast: bool, seed: Option<u64>) -> Result<()> {
    let base = if fast { MiniLocoSpec::fast() } else { MiniLocoSpec::default() };
    let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(p) = spec {
        let file: toml::Table =
            toml::from_str(&read_config_file(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        table.extend(file);
    }
    let mut spec: MiniLocoSpec = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let ds = gen_mini_loco(&spec, out)?;
    write(&out.join("mini_loco_spec.toml"), &toml::to_string(&spec).expect("spec serializes"))?;
    println!("{}", ds.summary());
    Ok(())
}

fn load_dataset(data: &Path) -> Result<Dataset> {
    load_loco_layout(data).map_err(|e| match e {
        // Missing splits are a usage problem rather than an I/O failure.
        Error::Dataset(d) => Error::Config(d.to_string()),
        other => other,
    })
}

pub fn cmd_pretrain_teacher(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let images = ds.preprocessed(Split::Train, cfg.image_size)?;
    let mut model = TripletModel::new(cfg.model())?;
    let losses = pretrain_teacher(&mut model, &images, cfg.pretrain_iterations, cfg.pretrain_lr, cfg.seed)?;
    checkpoint::save(out, &model, None)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("teacher matching loss {first:.5} -> {last:.5} over {} steps", losses.len());
    }
    Ok(())
}

/// Trains into `out`; returns the final checkpoint path.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    teacher: Option<&Path>,
) -> Result<PathBuf> {
    let ds = load_dataset(data)?;
    let images = ds.preprocessed(Split::Train, cfg.image_size)?;
    mkdir(out)?;
    cfg.write_resolved(out)?;
    let (model, optimizer) = match resume {
        Some(p) => {
            let model = checkpoint::load_model_expecting(p, &cfg.model())?;
            let ck = checkpoint::load(p)?;
            (model, ck.optimizer)
        }
        None => {
            let mut model = TripletModel::new(cfg.model())?;
            if let Some(t) = teacher {
                let src = checkpoint::load_model_expecting(t, &cfg.model())?;
                model.teacher = src.teacher;
                model.teacher_norm = src.teacher_norm;
            }
            (model, None)
        }
    };
    let outcome = run_training(&images, &cfg.train(), model, optimizer.as_ref(), out)?;
    if let Some(last) = outcome.records.last() {
        log::info!("step {} total {:.6}", last.step + 1, last.bundle.total);
    }
    Ok(outcome.final_checkpoint)
}

fn calibrated(checkpoint_path: &Path, ds: &Dataset) -> Result<(Checkpoint, CalibrationStats)> {
    let ck = checkpoint::load(checkpoint_path)?;
    let val = ds.preprocessed(Split::Validation, ck.model.config.image_size)?;
    let stats = scorer::calibrate(&ck.model, &val)?;
    Ok((ck, stats))
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    data: &Path,
    out: &Path,
    projection: Projection,
    source: MapSource,
) -> Result<Report> {
    let ds = load_dataset(data)?;
    let (ck, stats) = calibrated(checkpoint_path, &ds)?;
    let samples = score_test_split(&ck.model, &stats, &ds, projection, source)?;
    let mut cats = BTreeMap::new();
    cats.insert(ds.category.clone(), category_metrics(&samples)?);
    let report = Report::from_categories(cats);
    write(out, &report.to_json())?;
    write(&out.with_extension("txt"), &report.to_table())?;
    write(
        &out.with_file_name(CALIBRATION_FILE),
        &serde_json::to_string_pretty(&stats).expect("stats serialize"),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub id: String,
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub branch: scorer::Branch,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapsManifest {
    pub data_dir: PathBuf,
    pub maps: Vec<MapEntry>,
}

pub fn cmd_score(checkpoint_path: &Path, data: &Path, out: &Path, projection: Projection) -> Result<()> {
    let ds = load_dataset(data)?;
    let (ck, stats) = calibrated(checkpoint_path, &ds)?;
    mkdir(out)?;
    let size = ck.model.config.image_size;
    let mut maps = Vec::new();
    for s in ds.split(Split::Test) {
        let x = preprocess(&s.image, size)?;
        let scored = scorer::score_image_with(&ck.model, &stats, &x, projection)?;
        let file = format!("{}.f32", s.id.replace('/', "__"));
        let bytes: Vec<u8> = scored.map.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let path = out.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        maps.push(MapEntry {
            id: s.id.clone(),
            file,
            height: scored.map.height,
            width: scored.map.width,
            branch: scored.map.branch,
            score: scored.score,
        });
    }
    let manifest = MapsManifest {
        data_dir: data.to_path_buf(),
        maps,
    };
    write(&out.join(MAPS_MANIFEST), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    write(&out.join(CALIBRATION_FILE), &serde_json::to_string_pretty(&stats).expect("stats serialize"))?;
    println!("wrote {} maps to {}", manifest.maps.len(), out.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<(String, BTreeMap<String, f64>)>,
}

impl SweepTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| point |");
        for k in METRIC_KEYS {
            s.push_str(&format!(" {k} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(METRIC_KEYS.len()));
        s.push('\n');
        for (label, m) in &self.rows {
            s.push_str(&format!("| {label} |"));
            for k in METRIC_KEYS {
                match m.get(k) {
                    Some(v) => s.push_str(&format!(" {v:.4} |")),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("point,{}\n", METRIC_KEYS.join(","));
        for (label, m) in &self.rows {
            let vals: Vec<String> = METRIC_KEYS
                .iter()
                .map(|k| m.get(*k).map(|v| v.to_string()).unwrap_or_default())
                .collect();
            s.push_str(&format!("{label},{}\n", vals.join(",")));
        }
        s
    }
}

/// Cumulative ablation rows: baseline, then each component switched on in turn.
pub fn ablation_rows(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut cfg = RunConfig {
        instance_norm_relu: false,
        sigmoid_projection: false,
        dfsc: false,
        momentum_update: false,
        ..base.clone()
    };
    let mut rows = vec![("baseline".to_string(), cfg.clone())];
    cfg.instance_norm_relu = true;
    rows.push(("+in_relu".into(), cfg.clone()));
    cfg.sigmoid_projection = true;
    rows.push(("+sigmoid".into(), cfg.clone()));
    cfg.dfsc = true;
    rows.push(("+dfsc".into(), cfg.clone()));
    cfg.momentum_update = true;
    rows.push(("+momentum".into(), cfg));
    rows
}

pub fn sweep_points(base: &RunConfig, axis: SweepAxis, values: Option<&[f64]>) -> Vec<(String, RunConfig)> {
    match axis {
        SweepAxis::Margin => values
            .unwrap_or(&MARGIN_GRID)
            .iter()
            .map(|&m| (format!("margin_{m:.1}"), RunConfig { margin: m, ..base.clone() }))
            .collect(),
        SweepAxis::Ablation => ablation_rows(base),
    }
}

pub fn cmd_sweep(
    base: &RunConfig,
    data: &Path,
    out: &Path,
    axis: SweepAxis,
    values: Option<Vec<f64>>,
) -> Result<SweepTable> {
    let points = sweep_points(base, axis, values.as_deref());
    for (_, cfg) in &points {
        cfg.validate()?;
    }
    let mut rows = Vec::new();
    for (label, cfg) in points {
        let dir = out.join(&label);
        log::info!("sweep point {label}");
        let ckpt = cmd_train(&cfg, data, &dir, None, None)?;
        let report = cmd_eval(&ckpt, data, &dir.join("report.json"), cfg.projection(), MapSource::Model)?;
        rows.push((label, report.mean));
    }
    let table = SweepTable { axis, rows };
    write(&out.join("sweep.md"), &table.to_markdown())?;
    write(&out.join("sweep.csv"), &table.to_csv())?;
    Ok(table)
}

/// Piecewise-linear dark-to-bright colormap on `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 4.0],
        [87.0, 16.0, 110.0],
        [188.0, 55.0, 84.0],
        [249.0, 142.0, 9.0],
        [252.0, 255.0, 164.0],
    ];
    let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 } * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

fn resize_nearest(img: &RawImage, w: usize, h: usize) -> RawImage {
    let mut out = RawImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(x * img.width / w, y * img.height / h));
        }
    }
    out
}

pub fn cmd_plot(maps_dir: &Path, out: &Path) -> Result<()> {
    let manifest_path = maps_dir.join(MAPS_MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|_| Error::Config(format!("{} has no {MAPS_MANIFEST}; run `score` first", maps_dir.display())))?;
    let manifest: MapsManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    if manifest.maps.is_empty() {
        return Err(Error::Config(format!("{} lists no maps", manifest_path.display())));
    }
    let ds = load_dataset(&manifest.data_dir).ok();
    mkdir(out)?;
    for m in &manifest.maps {
        let path = maps_dir.join(&m.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != m.height * m.width * 4 {
            return Err(Error::Config(format!("{} does not hold a {}x{} plane", path.display(), m.height, m.width)));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let (w, h) = (m.width, m.height);
        let mut heat = RawImage::filled(w, h, [0, 0, 0]);
        for (i, &v) in values.iter().enumerate() {
            heat.set(i % w, i / w, colormap(v as f64));
        }
        let stem = m.id.replace('/', "__");
        save_image(&out.join(format!("{stem}_heatmap.png")), &heat)?;

        let sample = ds.as_ref().and_then(|d| d.samples.iter().find(|s| s.id == m.id));
        let mut panel = RawImage::filled(3 * w, h, [0, 0, 0]);
        if let Some(s) = sample {
            let input = resize_nearest(&s.image, w, h);
            let gt = s.annotations_at(w.max(h), &ds.as_ref().expect("dataset").defects);
            for y in 0..h {
                for x in 0..w {
                    panel.set(x, y, input.get(x, y));
                    let on = w == h && gt.iter().any(|r| r.mask[y * w + x]);
                    panel.set(w + x, y, if on { [255, 255, 255] } else { [0, 0, 0] });
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                panel.set(2 * w + x, y, heat.get(x, y));
            }
        }
        save_image(&out.join(format!("{stem}_panel.png")), &panel)?;
    }
    println!("rendered {} panels to {}", manifest.maps.len(), out.display());
    Ok(())
}
