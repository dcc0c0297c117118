//! Training loop: AdamW with exponential warmup, EMA student shadow,
//! periodic checkpoints and a per-step loss log.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, OptimizerState};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle, LossWeights, TripletOutputs};
use crate::nets::{autoencoder_forward, student_forward_graph, ParamStore, TripletModel};
use crate::numeric::{Graph, NdArray};

pub const LOG_HEADER: &str = "step,d_sa,d_ta,d_ts_masked,l_dfsc,total,lr";
pub const LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    /// Optimizer updates the online student; an EMA shadow is kept for scoring.
    #[default]
    Shadow,
    /// No averaging: the shadow is a plain copy of the online student.
    Off,
    /// The online student is overwritten by its EMA after every step.
    InPlace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: u64,
    /// Rate constant of the exponential warmup, `w(t) = 1 - exp(-(1 - b) t)`.
    pub warmup_beta2: f64,
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    pub ema_momentum: f64,
    pub ema_mode: EmaMode,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint period in steps; 0 means every 10% of `iterations`.
    pub checkpoint_every: u64,
    /// Fit per-channel teacher feature statistics before the first step.
    pub teacher_standardize: bool,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            iterations: 2000,
            warmup_beta2: 0.997,
            lr_drop_fraction: 0.9,
            lr_drop_factor: 0.1,
            ema_momentum: 0.99,
            ema_mode: EmaMode::Shadow,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            teacher_standardize: true,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return bad(format!("ema_momentum must lie in (0, 1), got {}", self.ema_momentum));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) {
            return bad("lr_drop_fraction must lie in [0, 1]".into());
        }
        self.weights.validate()
    }

    pub fn checkpoint_period(&self) -> u64 {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            self.iterations.div_ceil(10).max(1)
        }
    }
}

/// Learning rate at step `t`: exponential warmup times the late drop.
pub fn lr_at(t: u64, cfg: &TrainConfig) -> f64 {
    let warm = 1.0 - (-(1.0 - cfg.warmup_beta2) * t as f64).exp();
    let drop = if t as f64 >= cfg.lr_drop_fraction * cfg.iterations as f64 {
        cfg.lr_drop_factor
    } else {
        1.0
    };
    cfg.lr * warm * drop
}

/// `shadow <- momentum * shadow + (1 - momentum) * online`.
pub fn ema_update(online: &ParamStore, shadow: &mut ParamStore, momentum: f64) -> Result<()> {
    if !online.same_layout(shadow) {
        return Err(Error::shape(
            "ema_update",
            "online and shadow parameter lists differ in names or shapes",
        ));
    }
    // Written as s + (1 - m)(o - s) so equal entries stay bit-identical.
    let k = (1.0 - momentum) as f32;
    for (s, o) in shadow.arrays_mut().zip(online.arrays()) {
        for (sv, &ov) in s.data_mut().iter_mut().zip(o.data()) {
            *sv += k * (ov - *sv);
        }
    }
    Ok(())
}

/// First and second moments for one parameter list.
#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<NdArray<f32>>,
    v: Vec<NdArray<f32>>,
}

impl Moments {
    fn zeros(store: &ParamStore) -> Self {
        let z: Vec<_> = store.arrays().map(|a| NdArray::zeros(a.shape())).collect();
        Moments { m: z.clone(), v: z }
    }

    fn restore(store: &ParamStore, prefix: &str, state: &OptimizerState) -> Result<Self> {
        let mut out = Self::zeros(store);
        for (i, (name, a)) in store.iter().enumerate() {
            let key = format!("{prefix}.{name}");
            let (Some(m), Some(v)) = (state.first_moment.get(&key), state.second_moment.get(&key))
            else {
                return Err(Error::Config(format!("optimizer state lacks {key}")));
            };
            if m.shape() != a.shape() || v.shape() != a.shape() {
                return Err(Error::shape("optimizer restore", format!("moment shape of {key}")));
            }
            out.m[i] = m.clone();
            out.v[i] = v.clone();
        }
        Ok(out)
    }

    fn export(&self, store: &ParamStore, prefix: &str, state: &mut OptimizerState) {
        for (i, (name, _)) in store.iter().enumerate() {
            let key = format!("{prefix}.{name}");
            state.first_moment.insert(key.clone(), self.m[i].clone());
            state.second_moment.insert(key, self.v[i].clone());
        }
    }
}

/// AdamW state for the student and auto-encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    student: Moments,
    autoencoder: Moments,
}

impl AdamW {
    pub fn new(model: &TripletModel) -> Self {
        AdamW {
            student: Moments::zeros(&model.student),
            autoencoder: Moments::zeros(&model.autoencoder),
        }
    }

    pub fn from_state(model: &TripletModel, state: &OptimizerState) -> Result<Self> {
        Ok(AdamW {
            student: Moments::restore(&model.student, "student", state)?,
            autoencoder: Moments::restore(&model.autoencoder, "autoencoder", state)?,
        })
    }

    pub fn state(&self, model: &TripletModel) -> OptimizerState {
        let mut s = OptimizerState::default();
        self.student.export(&model.student, "student", &mut s);
        self.autoencoder.export(&model.autoencoder, "autoencoder", &mut s);
        s
    }
}

struct AdamStep {
    lr: f32,
    decay: f32,
    b1: f32,
    b2: f32,
    eps: f32,
    bias1: f32,
    bias2: f32,
}

fn adamw_apply(store: &mut ParamStore, moments: &mut Moments, grads: &[Option<NdArray<f32>>], h: &AdamStep) {
    for (i, p) in store.arrays_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (moments.m[i].data_mut(), moments.v[i].data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = h.b1 * m[j] + (1.0 - h.b1) * gj;
            v[j] = h.b2 * v[j] + (1.0 - h.b2) * gj * gj;
            let mhat = m[j] / h.bias1;
            let vhat = v[j] / h.bias2;
            *w -= h.lr * h.decay * *w;
            *w -= h.lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
}

/// One optimizer step on a single image.
///
/// `teacher_features` is `T(image)`, passed in so callers can cache it.
/// Updates student and auto-encoder, then the EMA shadow, and increments
/// `model.step`.
pub fn train_step(
    model: &mut TripletModel,
    optim: &mut AdamW,
    image: &NdArray<f32>,
    teacher_features: &NdArray<f32>,
    cfg: &TrainConfig,
) -> Result<LossBundle> {
    let t = model.step;
    let mut g: Graph<f32> = Graph::new();
    let sp = model.student.bind(&mut g, true);
    let ap = model.autoencoder.bind(&mut g, true);
    let x = g.constant(image.clone());
    let teacher = g.constant(teacher_features.clone());
    let (student_t, student_a) = student_forward_graph(&mut g, &model.config, &sp, x)?;
    let autoencoder = autoencoder_forward(&mut g, &model.config, &ap, x)?;
    let out = TripletOutputs {
        teacher,
        student_t,
        student_a,
        autoencoder,
    };
    let loss = total_loss(&mut g, &out, &cfg.weights)?;
    let b = loss.bundle;
    if !b.is_finite() {
        return Err(Error::NonFinite {
            step: t,
            detail: format!(
                "d_sa={} d_ta={} d_ts_masked={} l_dfsc={} total={}",
                b.d_sa, b.d_ta, b.d_ts_masked, b.l_dfsc, b.total
            ),
        });
    }
    let mut grads = g.backward(loss.total)?;
    let sg: Vec<_> = sp.iter().map(|&v| grads.take(v)).collect();
    let ag: Vec<_> = ap.iter().map(|&v| grads.take(v)).collect();
    drop(g);

    let n = (t + 1) as i32;
    let h = AdamStep {
        lr: lr_at(t, cfg) as f32,
        decay: cfg.weight_decay as f32,
        b1: cfg.adam_beta1 as f32,
        b2: cfg.adam_beta2 as f32,
        eps: cfg.adam_eps as f32,
        bias1: (1.0 - cfg.adam_beta1.powi(n)) as f32,
        bias2: (1.0 - cfg.adam_beta2.powi(n)) as f32,
    };
    adamw_apply(&mut model.student, &mut optim.student, &sg, &h);
    adamw_apply(&mut model.autoencoder, &mut optim.autoencoder, &ag, &h);

    match cfg.ema_mode {
        EmaMode::Shadow => ema_update(&model.student, &mut model.student_shadow, cfg.ema_momentum)?,
        EmaMode::Off => model.student_shadow = model.student.clone(),
        EmaMode::InPlace => {
            ema_update(&model.student, &mut model.student_shadow, cfg.ema_momentum)?;
            model.student = model.student_shadow.clone();
        }
    }
    model.step += 1;
    Ok(b)
}

/// Image index used at step `t`: a fresh seeded permutation per epoch, so any
/// step's position is recomputable without carrying RNG state.
pub fn stream_index(seed: u64, n: usize, t: u64) -> usize {
    let epoch = t / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order[(t % n as u64) as usize]
}

struct EpochOrder {
    seed: u64,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl EpochOrder {
    fn index(&mut self, t: u64) -> usize {
        let n = self.order.len();
        let epoch = t / n as u64;
        if self.epoch != Some(epoch) {
            self.order = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[(t % n as u64) as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub bundle: LossBundle,
    pub lr: f64,
}

impl LogRecord {
    pub fn csv(&self) -> String {
        let b = &self.bundle;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, b.d_sa, b.d_ta, b.d_ts_masked, b.l_dfsc, b.total, self.lr
        )
    }
}

pub struct TrainOutcome {
    pub model: TripletModel,
    pub records: Vec<LogRecord>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

/// Keeps the header and records before `start`, so a resumed run continues
/// the same file.
fn open_log(path: &Path, start: u64) -> Result<BufWriter<fs::File>> {
    let mut kept = vec![LOG_HEADER.to_string()];
    if start > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s < start)
                    })
                    .map(str::to_string),
            );
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Trains on `images` (preprocessed normal samples) until `cfg.iterations`
/// steps have been taken in total. A model with `step > 0` resumes; pass the
/// optimizer state saved with it for an exact continuation.
pub fn run_training(
    images: &[NdArray<f32>],
    cfg: &TrainConfig,
    mut model: TripletModel,
    optimizer: Option<&OptimizerState>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("training images"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = model.step;
    if start == 0 && cfg.teacher_standardize {
        model.fit_teacher_normalization(images)?;
    }
    let mut optim = match optimizer {
        Some(s) => AdamW::from_state(&model, s)?,
        None => AdamW::new(&model),
    };
    let teacher: Vec<NdArray<f32>> = images
        .iter()
        .map(|x| model.teacher_forward(x))
        .collect::<Result<_>>()?;

    let log_path = out_dir.join(LOG_FILE);
    let mut log = open_log(&log_path, start)?;
    let period = cfg.checkpoint_period();
    let mut order = EpochOrder {
        seed: cfg.seed,
        epoch: None,
        order: vec![0; images.len()],
    };
    let mut records = Vec::new();
    for t in start..cfg.iterations {
        let i = order.index(t);
        let lr = lr_at(t, cfg);
        let bundle = train_step(&mut model, &mut optim, &images[i], &teacher[i], cfg)?;
        let rec = LogRecord { step: t, bundle, lr };
        writeln!(log, "{}", rec.csv()).map_err(|e| Error::io(&log_path, e))?;
        records.push(rec);
        let done = t + 1;
        if done % period == 0 && done < cfg.iterations {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            checkpoint::save(&checkpoint_path(out_dir, done), &model, Some(&optim.state(&model)))?;
            log::info!("step {done}/{}: total {:.5}", cfg.iterations, bundle.total);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_checkpoint, &model, Some(&optim.state(&model)))?;
    Ok(TrainOutcome {
        model,
        records,
        final_checkpoint,
        log_path,
    })
}

/// Distills the teacher from a fixed random descriptor network twice as wide,
/// by mean-squared matching of per-channel standardized descriptor features.
/// Returns the per-step losses.
pub fn pretrain_teacher(
    model: &mut TripletModel,
    images: &[NdArray<f32>],
    iterations: u64,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Empty("teacher pretraining images"));
    }
    let pdn = &model.config.pdn;
    let wide_cfg = crate::nets::PdnConfig {
        widths: pdn.widths.map(|w| 2 * w),
        ..pdn.clone()
    };
    let wide = crate::nets::random_pdn(&wide_cfg, seed ^ 0x5eed_7eac);
    let raw: Vec<NdArray<f32>> = images
        .iter()
        .map(|x| crate::nets::pdn_apply(&wide, x))
        .collect::<Result<_>>()?;
    let mut stats_model = model.clone();
    stats_model.teacher = wide;
    stats_model.fit_teacher_normalization(images)?;
    let targets: Vec<NdArray<f32>> = raw
        .iter()
        .map(|r| stats_model.teacher_norm.apply(r))
        .collect::<Result<_>>()?;

    let mut moments = Moments::zeros(&model.teacher);
    let mut losses = Vec::with_capacity(iterations as usize);
    for t in 0..iterations {
        let i = stream_index(seed, images.len(), t);
        let mut g: Graph<f32> = Graph::new();
        let p = model.teacher.bind(&mut g, true);
        let x = g.constant(images[i].clone());
        let target = g.constant(targets[i].clone());
        let out = crate::nets::pdn_forward(&mut g, &p, x)?;
        let loss = crate::losses::msd(&mut g, out, target)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: format!("teacher pretraining loss {value}"),
            });
        }
        let mut grads = g.backward(loss)?;
        let gs: Vec<_> = p.iter().map(|&v| grads.take(v)).collect();
        let n = (t + 1) as i32;
        let h = AdamStep {
            lr: lr as f32,
            decay: 0.0,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            bias1: (1.0 - 0.9f64.powi(n)) as f32,
            bias2: (1.0 - 0.999f64.powi(n)) as f32,
        };
        adamw_apply(&mut model.teacher, &mut moments, &gs, &h);
        losses.push(value);
    }
    model.teacher_norm = crate::nets::ChannelStats::identity(pdn.out_channels);
    Ok(losses)
}
