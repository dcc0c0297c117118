//! Teacher and student patch description networks and the instance-normalized
//! auto-encoder.
//!
//! Parameters live in flat, ordered [`ParamStore`]s; the forward functions
//! index them positionally. Every network maps a `3 x H x W` image to a
//! `C x H/4 x W/4` feature map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels::INSTANCE_NORM_EPS;
use crate::numeric::{Element, Graph, NdArray, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdnConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Hidden widths of the first three convolutions.
    pub widths: [usize; 3],
}

impl PdnConfig {
    pub fn desk(out_channels: usize) -> Self {
        PdnConfig {
            in_channels: 3,
            out_channels,
            widths: [32, 64, 64],
        }
    }

    pub fn full_scale() -> Self {
        PdnConfig {
            in_channels: 3,
            out_channels: 384,
            widths: [128, 256, 256],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentHeads {
    /// One trunk with `2C` outputs split in half.
    #[default]
    Shared,
    /// Two independent networks with `C` outputs each.
    Separate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pdn: PdnConfig,
    pub ae_width: usize,
    /// Side of the square input images; a power of two.
    pub image_size: usize,
    /// Instance normalization before every auto-encoder activation plus the
    /// ReLU opening the decoder.
    pub instance_norm: bool,
    pub student_heads: StudentHeads,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            pdn: PdnConfig::desk(64),
            ae_width: 64,
            image_size: 256,
            instance_norm: true,
            student_heads: StudentHeads::Shared,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size {s} must be a power of two >= 8"
            )));
        }
        if self.pdn.out_channels == 0 || self.ae_width == 0 || self.pdn.in_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.pdn.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("pdn widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    fn encoder_depth(&self) -> usize {
        self.image_size.trailing_zeros() as usize
    }

    fn decoder_depth(&self) -> usize {
        self.feature_size().trailing_zeros() as usize
    }
}

/// Ordered named parameter arrays of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, NdArray<f32>)>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: NdArray<f32>) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<f32>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn arrays(&self) -> impl Iterator<Item = &NdArray<f32>> {
        self.entries.iter().map(|(_, a)| a)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut NdArray<f32>> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    pub fn get(&self, name: &str) -> Option<&NdArray<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn num_values(&self) -> usize {
        self.arrays().map(NdArray::len).sum()
    }

    /// Registers every array as a graph leaf.
    pub fn bind(&self, g: &mut Graph<f32>, requires_grad: bool) -> Vec<Var> {
        self.arrays().map(|a| g.leaf(a.clone(), requires_grad)).collect()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, a1), (n2, a2))| n1 == n2 && a1.shape() == a2.shape())
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// PyTorch default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and bias.
    Uniform,
    /// He normal for weights, zero bias.
    HeNormal { gain: f64 },
}

fn push_conv(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    init: Init,
    rng: &mut ChaCha8Rng,
) {
    let fan_in = (c_in * k * k) as f64;
    let shape = [c_out, c_in, k, k];
    let (weight, bias) = match init {
        Init::Uniform => {
            let bound = 1.0 / fan_in.sqrt();
            let w = NdArray::from_fn(&shape, |_| rng.random_range(-bound..bound) as f32);
            let b = NdArray::from_fn(&[c_out], |_| rng.random_range(-bound..bound) as f32);
            (w, b)
        }
        Init::HeNormal { gain } => {
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
            let w = NdArray::from_fn(&shape, |_| normal.sample(rng) as f32);
            (w, NdArray::zeros(&[c_out]))
        }
    };
    store.push(format!("{name}.weight"), weight);
    store.push(format!("{name}.bias"), bias);
}

fn push_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.push(format!("{name}.gamma"), NdArray::full(&[c], 1.0));
    store.push(format!("{name}.beta"), NdArray::zeros(&[c]));
}

/// (kernel, padding) of the four PDN convolutions; two 2x2 pools follow the
/// first two. Net downsampling is exactly 4 for any side divisible by 4.
const PDN_LAYOUT: [(usize, usize); 4] = [(4, 3), (4, 2), (3, 1), (4, 1)];

fn build_pdn(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &PdnConfig,
    out_channels: usize,
    init: Init,
    rng: &mut ChaCha8Rng,
) {
    let [w1, w2, w3] = cfg.widths;
    let chans = [(cfg.in_channels, w1), (w1, w2), (w2, w3), (w3, out_channels)];
    for (i, ((c_in, c_out), (k, _))) in chans.into_iter().zip(PDN_LAYOUT).enumerate() {
        let last = i == 3;
        let init = match init {
            Init::HeNormal { .. } if last => Init::HeNormal { gain: 1.0 },
            other => other,
        };
        push_conv(store, &format!("{prefix}conv{}", i + 1), c_out, c_in, k, init, rng);
    }
}

/// Randomly initialized (He normal) PDN, e.g. a fixed descriptor network.
pub fn random_pdn(cfg: &PdnConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    build_pdn(&mut store, "", cfg, cfg.out_channels, Init::HeNormal { gain: 2.0 }, &mut rng);
    store
}

/// Forward pass of a standalone PDN parameter list.
pub fn pdn_apply(params: &ParamStore, image: &NdArray<f32>) -> Result<NdArray<f32>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let out = pdn_forward(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}

/// conv4 -> ReLU -> pool -> conv4 -> ReLU -> pool -> conv3 -> ReLU -> conv4.
pub fn pdn_forward<T: Element>(g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
    debug_assert_eq!(p.len(), 8);
    let mut h = x;
    for (i, (_, pad)) in PDN_LAYOUT.iter().enumerate() {
        h = g.conv2d(h, p[2 * i], p[2 * i + 1], 1, *pad)?;
        if i < 3 {
            h = g.relu(h);
        }
        if i < 2 {
            h = g.avg_pool2d(h, 2, 2)?;
        }
    }
    Ok(h)
}

fn build_autoencoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let w = cfg.ae_width;
    let enc = cfg.encoder_depth();
    for i in 0..enc {
        let c_in = if i == 0 { cfg.pdn.in_channels } else { w };
        push_conv(store, &format!("enc{}", i + 1), w, c_in, 3, Init::Uniform, rng);
        if cfg.instance_norm && i + 1 < enc {
            push_norm(store, &format!("enc{}.norm", i + 1), w);
        }
    }
    for i in 0..cfg.decoder_depth() {
        push_conv(store, &format!("dec{}", i + 1), w, w, 3, Init::Uniform, rng);
        if cfg.instance_norm {
            push_norm(store, &format!("dec{}.norm", i + 1), w);
        }
    }
    push_conv(store, "dec_out", cfg.pdn.out_channels, w, 3, Init::Uniform, rng);
}

/// Strided 3x3 encoder down to a 1x1 bottleneck, then a decoder of
/// bilinear x2 upsampling + 3x3 convolutions back to `H/4 x W/4`.
///
/// The bottleneck has no activation. With `instance_norm` the decoder opens
/// with a ReLU and every other activation is preceded by instance normalization.
pub fn autoencoder_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &[Var],
    x: Var,
) -> Result<Var> {
    let (_, h, w) = g.value(x).dims3("autoencoder_forward")?;
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::shape(
            "autoencoder_forward",
            format!(
                "input {h}x{w} does not match configured image_size {}",
                cfg.image_size
            ),
        ));
    }
    let mut it = p.iter().copied();
    let mut next = || it.next().expect("autoencoder parameter layout");
    let enc = cfg.encoder_depth();
    let mut z = x;
    for i in 0..enc {
        let (wt, b) = (next(), next());
        z = g.conv2d(z, wt, b, 2, 1)?;
        if i + 1 < enc {
            if cfg.instance_norm {
                let (gm, bt) = (next(), next());
                z = g.instance_norm(z, gm, bt, INSTANCE_NORM_EPS)?;
            }
            z = g.relu(z);
        }
    }
    if cfg.instance_norm {
        z = g.relu(z);
    }
    let mut side = 1;
    for _ in 0..cfg.decoder_depth() {
        side *= 2;
        z = g.bilinear_resize(z, side, side)?;
        let (wt, b) = (next(), next());
        z = g.conv2d(z, wt, b, 1, 1)?;
        if cfg.instance_norm {
            let (gm, bt) = (next(), next());
            z = g.instance_norm(z, gm, bt, INSTANCE_NORM_EPS)?;
        }
        z = g.relu(z);
    }
    let (wt, b) = (next(), next());
    g.conv2d(z, wt, b, 1, 1)
}

/// Splits a student forward into its teacher-side and auto-encoder-side heads.
pub fn student_forward_graph<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &[Var],
    x: Var,
) -> Result<(Var, Var)> {
    let c = cfg.pdn.out_channels;
    match cfg.student_heads {
        StudentHeads::Shared => {
            let trunk = pdn_forward(g, p, x)?;
            Ok((g.slice_channels(trunk, 0, c)?, g.slice_channels(trunk, c, c)?))
        }
        StudentHeads::Separate => {
            let st = pdn_forward(g, &p[..8], x)?;
            let sa = pdn_forward(g, &p[8..], x)?;
            Ok((st, sa))
        }
    }
}

/// Per-channel affine standardization applied to raw teacher features.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: NdArray<f32>,
    pub std: NdArray<f32>,
}

impl ChannelStats {
    pub fn identity(c: usize) -> Self {
        ChannelStats {
            mean: NdArray::zeros(&[c]),
            std: NdArray::full(&[c], 1.0),
        }
    }

    pub fn apply(&self, raw: &NdArray<f32>) -> Result<NdArray<f32>> {
        let (c, h, w) = raw.dims3("teacher normalization")?;
        if c != self.mean.len() {
            return Err(Error::shape(
                "teacher normalization",
                format!("{c} channels vs {} statistics", self.mean.len()),
            ));
        }
        let plane = h * w;
        let data = raw
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i / plane;
                (v - self.mean.data()[ch]) / self.std.data()[ch]
            })
            .collect();
        NdArray::new(vec![c, h, w], data)
    }
}

/// Teacher, dual-head student, auto-encoder and the student's EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletModel {
    pub config: ModelConfig,
    pub teacher: ParamStore,
    pub teacher_norm: ChannelStats,
    pub student: ParamStore,
    pub student_shadow: ParamStore,
    pub autoencoder: ParamStore,
    /// Optimizer steps applied so far.
    pub step: u64,
}

impl TripletModel {
    /// Seed-deterministic initialization; the teacher is a frozen random PDN.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.pdn.out_channels;

        let mut teacher = ParamStore::default();
        build_pdn(&mut teacher, "", &config.pdn, c, Init::HeNormal { gain: 2.0 }, &mut rng);

        let mut student = ParamStore::default();
        match config.student_heads {
            StudentHeads::Shared => {
                build_pdn(&mut student, "", &config.pdn, 2 * c, Init::Uniform, &mut rng)
            }
            StudentHeads::Separate => {
                build_pdn(&mut student, "head_t.", &config.pdn, c, Init::Uniform, &mut rng);
                build_pdn(&mut student, "head_a.", &config.pdn, c, Init::Uniform, &mut rng);
            }
        }

        let mut autoencoder = ParamStore::default();
        build_autoencoder(&mut autoencoder, &config, &mut rng);

        Ok(TripletModel {
            teacher_norm: ChannelStats::identity(c),
            student_shadow: student.clone(),
            config,
            teacher,
            student,
            autoencoder,
            step: 0,
        })
    }

    fn check_image(&self, image: &NdArray<f32>, op: &'static str) -> Result<()> {
        let (c, h, w) = image.dims3(op)?;
        if c != self.config.pdn.in_channels {
            return Err(Error::shape(
                op,
                format!("image has {c} channels, expected {}", self.config.pdn.in_channels),
            ));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                op,
                format!("spatial size {h}x{w} is not divisible by 4"),
            ));
        }
        Ok(())
    }

    /// Raw (unstandardized) teacher features.
    pub fn teacher_raw(&self, image: &NdArray<f32>) -> Result<NdArray<f32>> {
        self.check_image(image, "teacher_forward")?;
        let mut g = Graph::new();
        let p = self.teacher.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = pdn_forward(&mut g, &p, x)?;
        Ok(g.value(out).clone())
    }

    /// Standardized teacher features `T(x)`; never tracked for gradients.
    pub fn teacher_forward(&self, image: &NdArray<f32>) -> Result<NdArray<f32>> {
        self.teacher_norm.apply(&self.teacher_raw(image)?)
    }

    /// Fits the teacher's per-channel feature statistics over `images`.
    pub fn fit_teacher_normalization(&mut self, images: &[NdArray<f32>]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Empty("fit_teacher_normalization"));
        }
        let c = self.config.pdn.out_channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for img in images {
            let raw = self.teacher_raw(img)?;
            let plane = raw.len() / c;
            for (i, &v) in raw.data().iter().enumerate() {
                sum[i / plane] += v as f64;
                sq[i / plane] += (v as f64) * (v as f64);
            }
            count += plane;
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32
            })
            .collect();
        self.teacher_norm = ChannelStats {
            mean: NdArray::new(vec![c], mean)?,
            std: NdArray::new(vec![c], std)?,
        };
        Ok(())
    }

    fn student_with(&self, params: &ParamStore, image: &NdArray<f32>) -> Result<(NdArray<f32>, NdArray<f32>)> {
        self.check_image(image, "student_forward")?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let (st, sa) = student_forward_graph(&mut g, &self.config, &p, x)?;
        Ok((g.value(st).clone(), g.value(sa).clone()))
    }

    /// `(S^T(x), S^A(x))` from the online student.
    pub fn student_forward(&self, image: &NdArray<f32>) -> Result<(NdArray<f32>, NdArray<f32>)> {
        self.student_with(&self.student, image)
    }

    /// Student heads evaluated with the EMA shadow parameters.
    pub fn ema_shadow_forward(&self, image: &NdArray<f32>) -> Result<(NdArray<f32>, NdArray<f32>)> {
        self.student_with(&self.student_shadow, image)
    }

    /// Raw `2C`-channel trunk output of the shared-head student.
    pub fn student_trunk(&self, image: &NdArray<f32>) -> Result<NdArray<f32>> {
        if self.config.student_heads != StudentHeads::Shared {
            return Err(Error::invalid("student_trunk", "student heads are separate"));
        }
        self.check_image(image, "student_forward")?;
        let mut g = Graph::new();
        let p = self.student.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = pdn_forward(&mut g, &p, x)?;
        Ok(g.value(out).clone())
    }

    pub fn autoencoder_forward(&self, image: &NdArray<f32>) -> Result<NdArray<f32>> {
        self.check_image(image, "autoencoder_forward")?;
        let mut g = Graph::new();
        let p = self.autoencoder.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = autoencoder_forward(&mut g, &self.config, &p, x)?;
        Ok(g.value(out).clone())
    }

    /// Spatial extent of the auto-encoder bottleneck for the configured input.
    pub fn bottleneck_size(&self) -> usize {
        let mut s = self.config.image_size;
        for _ in 0..self.config.encoder_depth() {
            s = (s + 2 - 3) / 2 + 1;
        }
        s
    }
}
