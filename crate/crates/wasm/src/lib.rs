//! Browser bindings for three interactive views: a pegboard scene renderer,
//! the feature separation hinge under gradient descent, and anomaly metrics on
//! synthetic maps. Every entry point has a plain Rust twin that host tests call.

use logad::datasets::{render_mini_loco, Label, MiniLocoSpec, Split};
use logad::losses::{dfsc_loss, DfscReduction, NormalizeOrder};
use logad::metrics::{aupro, pixel_roc_auc, roc_auc, spro, DefectAnnotation, LabeledScore, RegionImage};
use logad::numeric::{Graph, NdArray};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// One rendered pegboard image with its defect mask.
#[wasm_bindgen]
pub struct Scene {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    mask: Vec<u8>,
    defect: String,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Interleaved RGBA bytes, ready for `ImageData`.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// One byte per pixel, 255 inside the defect region.
    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    /// Defect type, empty for normal scenes.
    #[wasm_bindgen(getter)]
    pub fn defect(&self) -> String {
        self.defect.clone()
    }
}

fn label_of(kind: &str) -> Result<Label, String> {
    match kind {
        "good" => Ok(Label::Good),
        "logical" => Ok(Label::LogicalAnomaly),
        "structural" => Ok(Label::StructuralAnomaly),
        other => Err(format!("unknown scene kind `{other}`")),
    }
}

/// Renders test image `index` of the requested kind for a generator seed.
pub fn scene(seed: u64, kind: &str, index: usize, canvas: usize) -> Result<Scene, String> {
    let label = label_of(kind)?;
    let n = index + 1;
    let spec = MiniLocoSpec {
        canvas,
        train: 1,
        validation: 1,
        test_good: if label == Label::Good { n } else { 1 },
        logical: if label == Label::LogicalAnomaly { n } else { 0 },
        structural: if label == Label::StructuralAnomaly { n } else { 0 },
        seed,
        ..MiniLocoSpec::default()
    };
    let ds = render_mini_loco(&spec).map_err(|e| e.to_string())?;
    let s = ds
        .split(Split::Test)
        .filter(|s| s.label == label)
        .nth(index)
        .ok_or("scene index out of range")?;
    let (w, h) = (s.image.width, s.image.height);
    let rgba = s.image.pixels.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    let mask = (0..w * h)
        .map(|i| if s.regions.iter().any(|r| r.annotation.mask[i]) { 255 } else { 0 })
        .collect();
    Ok(Scene {
        width: w,
        height: h,
        rgba,
        mask,
        defect: s.regions.first().map(|r| r.defect_type.clone()).unwrap_or_default(),
    })
}

#[wasm_bindgen(js_name = renderScene)]
pub fn render_scene(seed: u32, kind: &str, index: u32, canvas: u32) -> Result<Scene, JsError> {
    scene(seed.into(), kind, index as usize, canvas as usize).map_err(|e| JsError::new(&e))
}

#[derive(Debug, Serialize)]
pub struct HingeTrace {
    /// Loss after each descent step, starting with the initial value.
    pub losses: Vec<f64>,
    /// Locations entering the mean at the start.
    pub active_locations: usize,
    /// Per-location distance between channel-normalized vectors at the start.
    pub distances: Vec<f64>,
    pub margin: f64,
}

fn normal_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    NdArray::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn channel_distances(t: &NdArray<f64>, a: &NdArray<f64>, c: usize, hw: usize) -> Vec<f64> {
    let unit = |x: &NdArray<f64>, p: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..c).map(|k| x.data()[k * hw + p]).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    };
    (0..hw)
        .map(|p| {
            let (u, v) = (unit(t, p), unit(a, p));
            u.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

/// Gradient descent on the auto-encoder map alone against a fixed teacher map.
///
/// The start is `A = T + spread * noise` on an 8 x 4 x 4 map.
pub fn hinge_trace(seed: u64, spread: f64, margin: f64, q: f64, mask_first: bool, steps: usize, lr: f64) -> Result<HingeTrace, String> {
    if !(0.0..=2.0).contains(&margin) || !(0.0..=1.0).contains(&q) {
        return Err("margin must lie in [0, 2] and q in [0, 1]".into());
    }
    let (c, h, w) = (8, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = normal_map(&mut rng, &[c, h, w]);
    let noise = normal_map(&mut rng, &[c, h, w]);
    let mut a = NdArray::from_fn(&[c, h, w], |i| t.data()[i] + spread * noise.data()[i]);
    let order = if mask_first { NormalizeOrder::AfterMask } else { NormalizeOrder::BeforeMask };
    let distances = channel_distances(&t, &a, c, h * w);
    let mut losses = Vec::with_capacity(steps + 1);
    let mut active_locations = 0;
    for step in 0..=steps {
        let mut g = Graph::new();
        let tv = g.constant(t.clone());
        let av = g.leaf(a.clone(), true);
        let out = dfsc_loss(&mut g, tv, av, q, margin, DfscReduction::ActiveMean, order).map_err(|e| e.to_string())?;
        if step == 0 {
            active_locations = out.active_locations;
        }
        losses.push(g.value(out.loss).data()[0]);
        if step == steps {
            break;
        }
        let grads = g.backward(out.loss).map_err(|e| e.to_string())?;
        if let Some(d) = grads.get(av) {
            for (v, gv) in a.data_mut().iter_mut().zip(d.data()) {
                *v -= lr * gv;
            }
        }
    }
    Ok(HingeTrace {
        losses,
        active_locations,
        distances,
        margin,
    })
}

#[wasm_bindgen(js_name = hingeTrace)]
pub fn hinge_trace_json(seed: u32, spread: f64, margin: f64, q: f64, mask_first: bool, steps: u32, lr: f64) -> Result<String, JsError> {
    let trace = hinge_trace(seed.into(), spread, margin, q, mask_first, steps as usize, lr).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&trace).expect("trace serializes"))
}

#[derive(Debug, Serialize)]
pub struct MetricsView {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub aupro_030: f64,
    pub spro_005: f64,
    pub size: usize,
    /// Map of the first anomalous image, min-max scaled to `[0, 1]`.
    pub preview: Vec<f64>,
    pub preview_mask: Vec<bool>,
}

/// Scores `pairs` normal and `pairs` anomalous synthetic maps where each
/// anomalous map carries a rectangular defect raised by `signal` above
/// unit Gaussian noise.
pub fn metrics_view(seed: u64, signal: f64, size: usize, pairs: usize, saturation: f64) -> Result<MetricsView, String> {
    if size < 4 || pairs == 0 || !(saturation > 0.0 && saturation <= 1.0) {
        return Err("need size >= 4, at least one pair and saturation in (0, 1]".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::new();
    let mut regions = Vec::new();
    for i in 0..2 * pairs {
        let anomalous = i >= pairs;
        let mut mask = vec![false; size * size];
        if anomalous {
            let (rw, rh) = (rng.random_range(1..=size / 2), rng.random_range(1..=size / 2));
            let (x0, y0) = (rng.random_range(0..=size - rw), rng.random_range(0..=size - rh));
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    mask[y * size + x] = true;
                }
            }
        }
        let map: Vec<f64> = mask
            .iter()
            .map(|&m| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n + if m { signal } else { 0.0 }
        })
            .collect();
        let area = mask.iter().filter(|&&m| m).count() as f64;
        regions.push(if anomalous {
            vec![DefectAnnotation {
                mask,
                saturation_area: (saturation * area).clamp(1.0, area),
            }]
        } else {
            Vec::new()
        });
        maps.push(map);
    }
    let err = |e: logad::Error| e.to_string();
    let scores: Vec<LabeledScore> = maps
        .iter()
        .zip(&regions)
        .map(|(m, r)| LabeledScore::new(m.iter().copied().fold(f64::NEG_INFINITY, f64::max), !r.is_empty()))
        .collect();
    let views: Vec<RegionImage> = maps.iter().zip(&regions).map(|(m, r)| RegionImage { map: m, regions: r }).collect();
    let union: Vec<Vec<bool>> = regions
        .iter()
        .map(|r| (0..size * size).map(|p| r.iter().any(|d| d.mask[p])).collect())
        .collect();
    let map_refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
    let mask_refs: Vec<&[bool]> = union.iter().map(Vec::as_slice).collect();
    let first = &maps[pairs];
    let (lo, hi) = first.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    Ok(MetricsView {
        image_auroc: roc_auc(&scores).map_err(err)?,
        pixel_auroc: pixel_roc_auc(&map_refs, &mask_refs).map_err(err)?,
        aupro_030: aupro(&views, 0.30).map_err(err)?,
        spro_005: spro(&views, 0.05).map_err(err)?,
        size,
        preview: first.iter().map(|v| (v - lo) / (hi - lo).max(1e-12)).collect(),
        preview_mask: union[pairs].clone(),
    })
}

#[wasm_bindgen(js_name = metricsView)]
pub fn metrics_view_json(seed: u32, signal: f64, size: u32, pairs: u32, saturation: f64) -> Result<String, JsError> {
    let view = metrics_view(seed.into(), signal, size as usize, pairs as usize, saturation).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&view).expect("view serializes"))
}
