//! Anomaly maps and image scores from a trained model.
//!
//! Two raw difference maps (student-vs-autoencoder "global", teacher-vs-student
//! "local") are quantile-normalized, squashed by a sigmoid, averaged and
//! upsampled to image resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::TripletModel;
use crate::numeric::kernels::quantile_in_place;
use crate::numeric::{bilinear_resize, NdArray};

pub const Q_LOW: f64 = 0.9;
pub const Q_HIGH: f64 = 0.995;
/// Largest double below one; sigmoid outputs are clamped to it so maps stay
/// inside the open unit interval even where `exp` saturates.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Global,
    Local,
    Combined,
}

/// Unnormalized `H x W` map, non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() || values.is_empty() {
            return Err(Error::shape(
                "ScoreMap::new",
                format!("{height}x{width} needs {} values, got {}", height * width, values.len()),
            ));
        }
        Ok(ScoreMap { height, width, values })
    }
}

/// Normalized map; values in (0, 1) under the sigmoid projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Resolution of the feature maps it was computed from.
    pub source: (usize, usize),
    pub branch: Branch,
}

fn channel_mean_sq(a: &NdArray<f32>, b: &NdArray<f32>, op: &'static str) -> Result<ScoreMap> {
    a.ensure_same_shape(b, op)?;
    let (c, h, w) = a.dims3(op)?;
    let plane = h * w;
    let mut out = vec![0.0f64; plane];
    for ch in 0..c {
        let (pa, pb) = (&a.data()[ch * plane..][..plane], &b.data()[ch * plane..][..plane]);
        for ((o, &x), &y) in out.iter_mut().zip(pa).zip(pb) {
            let d = x as f64 - y as f64;
            *o += d * d;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    ScoreMap::new(h, w, out)
}

/// Channel mean of `(S_A - A)^2`.
pub fn global_map(student_a: &NdArray<f32>, autoencoder: &NdArray<f32>) -> Result<ScoreMap> {
    channel_mean_sq(student_a, autoencoder, "global_map")
}

/// Channel mean of `(T - S_T)^2`.
pub fn local_map(teacher: &NdArray<f32>, student_t: &NdArray<f32>) -> Result<ScoreMap> {
    channel_mean_sq(teacher, student_t, "local_map")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub q_low: f64,
    pub q_high: f64,
    pub degenerate: bool,
}

impl BranchStats {
    pub fn fit(mut pooled: Vec<f64>) -> Result<Self> {
        let q_low = quantile_in_place(&mut pooled, Q_LOW)?;
        let q_high = quantile_in_place(&mut pooled, Q_HIGH)?;
        Ok(BranchStats {
            q_low,
            q_high,
            degenerate: !(q_high > q_low),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub global: BranchStats,
    pub local: BranchStats,
}

/// How a raw map is mapped after quantile normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    #[default]
    Sigmoid,
    /// `0.1 * (x - q_low) / (q_high - q_low)`, unbounded; ablation only.
    Linear,
}

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub fn project(x: f64, stats: &BranchStats, projection: Projection) -> f64 {
    if stats.degenerate {
        return 0.5;
    }
    let z = (x - stats.q_low) / (stats.q_high - stats.q_low);
    match projection {
        Projection::Sigmoid => sigmoid(z),
        Projection::Linear => 0.1 * z,
    }
}

pub fn normalize_map(
    raw: &ScoreMap,
    stats: &BranchStats,
    projection: Projection,
    branch: Branch,
) -> AnomalyMap {
    if stats.degenerate {
        log::warn!("degenerate calibration for {branch:?} branch; emitting a constant 0.5 map");
    }
    AnomalyMap {
        height: raw.height,
        width: raw.width,
        values: raw.values.iter().map(|&x| project(x, stats, projection)).collect(),
        source: (raw.height, raw.width),
        branch,
    }
}

/// Element-wise mean of the two normalized maps.
pub fn combine(global: &AnomalyMap, local: &AnomalyMap) -> Result<AnomalyMap> {
    if (global.height, global.width) != (local.height, local.width) {
        return Err(Error::shape(
            "combine",
            format!(
                "{}x{} vs {}x{}",
                global.height, global.width, local.height, local.width
            ),
        ));
    }
    Ok(AnomalyMap {
        height: global.height,
        width: global.width,
        values: global
            .values
            .iter()
            .zip(&local.values)
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect(),
        source: global.source,
        branch: Branch::Combined,
    })
}

pub fn image_score(map: &AnomalyMap) -> f64 {
    map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Bilinear resize; stays inside the input's value range.
pub fn upsample(map: &AnomalyMap, height: usize, width: usize) -> Result<AnomalyMap> {
    let arr = NdArray::new(vec![1, map.height, map.width], map.values.clone())?;
    let out = bilinear_resize(&arr, height, width)?;
    let (lo, hi) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    Ok(AnomalyMap {
        height,
        width,
        values: out.into_data().into_iter().map(|v| v.clamp(lo, hi)).collect(),
        source: map.source,
        branch: map.branch,
    })
}

/// Raw `(global, local)` maps from the EMA shadow student.
pub fn raw_maps(model: &TripletModel, image: &NdArray<f32>) -> Result<(ScoreMap, ScoreMap)> {
    let t = model.teacher_forward(image)?;
    let (st, sa) = model.ema_shadow_forward(image)?;
    let a = model.autoencoder_forward(image)?;
    Ok((global_map(&sa, &a)?, local_map(&t, &st)?))
}

pub fn calibrate_from_maps(maps: &[(ScoreMap, ScoreMap)]) -> Result<CalibrationStats> {
    if maps.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let pool = |pick: fn(&(ScoreMap, ScoreMap)) -> &ScoreMap| -> Vec<f64> {
        maps.iter().flat_map(|m| pick(m).values.iter().copied()).collect()
    };
    Ok(CalibrationStats {
        global: BranchStats::fit(pool(|m| &m.0))?,
        local: BranchStats::fit(pool(|m| &m.1))?,
    })
}

/// Fits both branch normalizers on normal validation images.
pub fn calibrate(model: &TripletModel, validation: &[NdArray<f32>]) -> Result<CalibrationStats> {
    if validation.is_empty() {
        return Err(Error::Empty("validation images"));
    }
    let maps: Vec<_> = validation
        .iter()
        .map(|x| raw_maps(model, x))
        .collect::<Result<_>>()?;
    calibrate_from_maps(&maps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImage {
    /// Combined map at image resolution.
    pub map: AnomalyMap,
    pub score: f64,
    pub global: AnomalyMap,
    pub local: AnomalyMap,
}

pub fn score_image_with(
    model: &TripletModel,
    stats: &CalibrationStats,
    image: &NdArray<f32>,
    projection: Projection,
) -> Result<ScoredImage> {
    let (_, h, w) = image.dims3("score_image")?;
    let (g, l) = raw_maps(model, image)?;
    let global = normalize_map(&g, &stats.global, projection, Branch::Global);
    let local = normalize_map(&l, &stats.local, projection, Branch::Local);
    let map = upsample(&combine(&global, &local)?, h, w)?;
    let score = image_score(&map);
    Ok(ScoredImage {
        map,
        score,
        global,
        local,
    })
}

/// Combined map at image resolution and its maximum.
pub fn score_image(
    model: &TripletModel,
    stats: &CalibrationStats,
    image: &NdArray<f32>,
) -> Result<(AnomalyMap, f64)> {
    let s = score_image_with(model, stats, image, Projection::Sigmoid)?;
    Ok((s.map, s.score))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(c: usize, h: usize, w: usize, v: &[f32]) -> NdArray<f32> {
        NdArray::new(vec![c, h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn difference_maps_by_hand() {
        let a = arr(2, 1, 1, &[1.0, 3.0]);
        let z = arr(2, 1, 1, &[0.0, 0.0]);
        assert_eq!(global_map(&a, &z).unwrap().values, vec![5.0]);
        assert_eq!(global_map(&a, &a).unwrap().values, vec![0.0]);
        assert_eq!(local_map(&arr(1, 1, 1, &[2.0]), &arr(1, 1, 1, &[0.0])).unwrap().values, vec![4.0]);
        let m = local_map(&arr(3, 2, 5, &[0.5; 30]), &arr(3, 2, 5, &[0.0; 30])).unwrap();
        assert_eq!((m.height, m.width), (2, 5));
        assert!(global_map(&a, &arr(1, 1, 1, &[0.0])).is_err());
    }

    #[test]
    fn calibration_quantiles() {
        let vals: Vec<f64> = (1..=1000).map(f64::from).collect();
        let s = BranchStats::fit(vals).unwrap();
        assert!((s.q_low - 900.1).abs() < 1e-9);
        assert!((s.q_high - 995.005).abs() < 1e-9);
        assert!(!s.degenerate);
        let c = BranchStats::fit(vec![3.0; 16]).unwrap();
        assert!(c.degenerate);
        let raw = ScoreMap::new(1, 3, vec![0.0, 3.0, 100.0]).unwrap();
        let n = normalize_map(&raw, &c, Projection::Sigmoid, Branch::Local);
        assert_eq!(n.values, vec![0.5; 3]);
    }

    #[test]
    fn calibration_ignores_order() {
        let m = |v: f64| (ScoreMap::new(1, 2, vec![v, 2.0 * v]).unwrap(), ScoreMap::new(1, 1, vec![v]).unwrap());
        let a = calibrate_from_maps(&[m(1.0), m(5.0), m(2.0)]).unwrap();
        let b = calibrate_from_maps(&[m(2.0), m(1.0), m(5.0)]).unwrap();
        assert_eq!(a, b);
        assert!(calibrate_from_maps(&[]).is_err());
    }

    #[test]
    fn sigmoid_projection_values() {
        let s = BranchStats { q_low: 1.0, q_high: 3.0, degenerate: false };
        assert_eq!(project(1.0, &s, Projection::Sigmoid), 0.5);
        assert!((project(3.0, &s, Projection::Sigmoid) - 0.731_058_578_630_004_9).abs() < 1e-15);
        let far = project(-1e6, &s, Projection::Sigmoid);
        assert!(far > 0.0 && far < 1e-300);
        let high = project(1e6, &s, Projection::Sigmoid);
        assert!(high < 1.0 && high > 0.999);
        assert!((project(5.0, &s, Projection::Linear) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn combine_and_score() {
        let mk = |v: Vec<f64>| AnomalyMap { height: 1, width: v.len(), values: v, source: (1, 2), branch: Branch::Global };
        let c = combine(&mk(vec![0.2, 0.4]), &mk(vec![0.8, 0.4])).unwrap();
        assert_eq!(c.values, vec![0.5, 0.4]);
        assert_eq!(c.branch, Branch::Combined);
        assert_eq!(image_score(&mk(vec![0.1, 0.9, 0.1])), 0.9);
        assert!(combine(&mk(vec![0.1]), &mk(vec![0.1, 0.2])).is_err());
    }

    #[test]
    fn upsampling_preserves_range() {
        let m = AnomalyMap { height: 2, width: 2, values: vec![0.1, 0.9, 0.3, BELOW_ONE], source: (2, 2), branch: Branch::Combined };
        let u = upsample(&m, 8, 8).unwrap();
        assert_eq!(u.values.len(), 64);
        assert!(u.values.iter().all(|&v| (0.1..=BELOW_ONE).contains(&v)));
    }
}
