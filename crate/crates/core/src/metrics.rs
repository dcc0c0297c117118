//! Image AUROC, pixel AUROC, AUPRO and saturation-aware sPRO.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Logical,
    Structural,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    pub anomalous: bool,
    pub kind: Option<AnomalyKind>,
}

impl LabeledScore {
    pub fn new(score: f64, anomalous: bool) -> Self {
        LabeledScore {
            score,
            anomalous,
            kind: None,
        }
    }
}

/// One defect region of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DefectAnnotation {
    /// Row-major, same extent as the image's anomaly map.
    pub mask: Vec<bool>,
    /// Pixels that must be covered for full overlap; `1 <= s <= area`.
    pub saturation_area: f64,
}

impl DefectAnnotation {
    /// Annotation whose saturation equals its area (plain PRO semantics).
    pub fn full(mask: Vec<bool>) -> Self {
        let area = mask.iter().filter(|&&m| m).count() as f64;
        DefectAnnotation {
            mask,
            saturation_area: area,
        }
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// A scored map and the defect regions of its image (none for good images).
#[derive(Clone, Copy, Debug)]
pub struct RegionImage<'a> {
    pub map: &'a [f64],
    pub regions: &'a [DefectAnnotation],
}

fn check_finite(values: impl IntoIterator<Item = f64>, op: &'static str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::invalid(op, "scores must be finite"))
    }
}

/// Twice the Mann-Whitney U statistic, as an integer, via midranks.
fn twice_u(pairs: &mut [(f64, bool)]) -> (u128, u128, u128) {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = pairs.iter().filter(|p| p.1).count() as u128;
    let n_neg = pairs.len() as u128 - n_pos;
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // ranks i+1..=j share the midrank (i+1+j)/2
        let pos_in_group = pairs[i..j].iter().filter(|p| p.1).count() as u128;
        rank_sum2 += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    (rank_sum2 - n_pos * (n_pos + 1), n_pos, n_neg)
}

fn auc_from_pairs(pairs: &mut [(f64, bool)], op: &'static str) -> Result<f64> {
    check_finite(pairs.iter().map(|p| p.0), op)?;
    let (u2, n_pos, n_neg) = twice_u(pairs);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            op,
            format!("need both classes, got {n_pos} anomalous and {n_neg} normal"),
        ));
    }
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// `P(s_anomalous > s_normal) + P(tie) / 2`.
pub fn roc_auc(scores: &[LabeledScore]) -> Result<f64> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.anomalous)).collect();
    auc_from_pairs(&mut pairs, "roc_auc")
}

/// ROC AUC over all pixels of all maps pooled.
pub fn pixel_roc_auc(maps: &[&[f64]], masks: &[&[bool]]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::shape(
            "pixel_roc_auc",
            format!("{} maps vs {} masks", maps.len(), masks.len()),
        ));
    }
    let mut pairs = Vec::with_capacity(maps.iter().map(|m| m.len()).sum());
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if m.len() != k.len() {
            return Err(Error::shape(
                "pixel_roc_auc",
                format!("image {i}: map has {} pixels, mask {}", m.len(), k.len()),
            ));
        }
        pairs.extend(m.iter().copied().zip(k.iter().copied()));
    }
    auc_from_pairs(&mut pairs, "pixel_roc_auc")
}

/// Points `(fpr, mean overlap)` of the threshold-swept curve, starting at
/// `(0, 0)`. A pixel is detected when its score is `>=` the threshold.
pub fn overlap_curve(images: &[RegionImage], saturate: bool) -> Result<Vec<(f64, f64)>> {
    struct Px {
        score: f64,
        negative: bool,
        first_region: usize,
        region_count: usize,
    }
    let mut pixels = Vec::new();
    let mut memberships: Vec<usize> = Vec::new();
    let mut capacity: Vec<f64> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        check_finite(img.map.iter().copied(), "overlap_curve")?;
        for r in img.regions {
            if r.mask.len() != img.map.len() {
                return Err(Error::shape(
                    "overlap_curve",
                    format!("image {i}: region mask {} vs map {}", r.mask.len(), img.map.len()),
                ));
            }
            let area = r.area();
            if area == 0 {
                return Err(Error::invalid("overlap_curve", format!("image {i}: empty region")));
            }
            let s = if saturate { r.saturation_area } else { area as f64 };
            if !(s >= 1.0 && s <= area as f64) {
                return Err(Error::invalid(
                    "overlap_curve",
                    format!("image {i}: saturation area {s} outside [1, {area}]"),
                ));
            }
            capacity.push(s);
        }
        let base = capacity.len() - img.regions.len();
        for (p, &score) in img.map.iter().enumerate() {
            let first = memberships.len();
            for (k, r) in img.regions.iter().enumerate() {
                if r.mask[p] {
                    memberships.push(base + k);
                }
            }
            let count = memberships.len() - first;
            pixels.push(Px {
                score,
                negative: count == 0,
                first_region: first,
                region_count: count,
            });
        }
    }
    let n_regions = capacity.len();
    if n_regions == 0 {
        return Err(Error::invalid("overlap_curve", "no defect regions"));
    }
    let n_neg = pixels.iter().filter(|p| p.negative).count();
    if n_neg == 0 {
        return Err(Error::invalid("overlap_curve", "no defect-free pixels for the false positive rate"));
    }

    pixels.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut hits = vec![0usize; n_regions];
    let mut overlap_sum = 0.0f64;
    let mut fp = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pixels.len() {
        let mut j = i;
        while j < pixels.len() && pixels[j].score == pixels[i].score {
            let p = &pixels[j];
            if p.negative {
                fp += 1;
            }
            for &r in &memberships[p.first_region..p.first_region + p.region_count] {
                let before = (hits[r] as f64 / capacity[r]).min(1.0);
                hits[r] += 1;
                overlap_sum += (hits[r] as f64 / capacity[r]).min(1.0) - before;
            }
            j += 1;
        }
        curve.push((fp as f64 / n_neg as f64, overlap_sum / n_regions as f64));
        i = j;
    }
    Ok(curve)
}

/// Trapezoidal area under a curve sorted by x, up to `limit`, with the
/// ordinate interpolated at `limit`.
pub fn area_up_to(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

fn check_limit(limit: f64, op: &'static str) -> Result<()> {
    if limit > 0.0 && limit <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("fpr_limit {limit} outside (0, 1]")))
    }
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
pub fn aupro(images: &[RegionImage], fpr_limit: f64) -> Result<f64> {
    check_limit(fpr_limit, "aupro")?;
    Ok(area_up_to(&overlap_curve(images, false)?, fpr_limit) / fpr_limit)
}

/// As [`aupro`] with each region's overlap saturating at its saturation area.
pub fn spro(images: &[RegionImage], fpr_limit: f64) -> Result<f64> {
    check_limit(fpr_limit, "spro")?;
    Ok(area_up_to(&overlap_curve(images, true)?, fpr_limit) / fpr_limit)
}

pub const AUPRO_LIMIT: f64 = 0.30;
pub const SPRO_LIMIT: f64 = 0.05;

/// Everything needed to evaluate one scored test image.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    pub score: f64,
    /// `None` for good images.
    pub kind: Option<AnomalyKind>,
    /// Image-resolution combined map.
    pub map: Vec<f64>,
    pub regions: Vec<DefectAnnotation>,
}

pub const METRIC_KEYS: [&str; 6] = [
    "image_auroc",
    "image_auroc_logical",
    "image_auroc_structural",
    "pixel_auroc",
    "aupro_0.30",
    "spro_0.05",
];

fn subset_auroc(samples: &[EvalSample], kind: Option<AnomalyKind>) -> Result<f64> {
    let scores: Vec<LabeledScore> = samples
        .iter()
        .filter(|s| s.kind.is_none() || kind.is_none() || s.kind == kind)
        .map(|s| LabeledScore {
            score: s.score,
            anomalous: s.kind.is_some(),
            kind: s.kind,
        })
        .collect();
    roc_auc(&scores)
}

/// All metrics for one category. Metrics whose class is absent are skipped.
pub fn category_metrics(samples: &[EvalSample]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let has = |k: AnomalyKind| samples.iter().any(|s| s.kind == Some(k));
    out.insert("image_auroc".to_string(), subset_auroc(samples, None)?);
    if has(AnomalyKind::Logical) {
        out.insert("image_auroc_logical".into(), subset_auroc(samples, Some(AnomalyKind::Logical))?);
    }
    if has(AnomalyKind::Structural) {
        out.insert(
            "image_auroc_structural".into(),
            subset_auroc(samples, Some(AnomalyKind::Structural))?,
        );
    }
    let unions: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| {
            (0..s.map.len())
                .map(|p| s.regions.iter().any(|r| r.mask[p]))
                .collect()
        })
        .collect();
    let maps: Vec<&[f64]> = samples.iter().map(|s| s.map.as_slice()).collect();
    let masks: Vec<&[bool]> = unions.iter().map(Vec::as_slice).collect();
    out.insert("pixel_auroc".into(), pixel_roc_auc(&maps, &masks)?);
    let images: Vec<RegionImage> = samples
        .iter()
        .map(|s| RegionImage {
            map: &s.map,
            regions: &s.regions,
        })
        .collect();
    out.insert("aupro_0.30".into(), aupro(&images, AUPRO_LIMIT)?);
    out.insert("spro_0.05".into(), spro(&images, SPRO_LIMIT)?);
    Ok(out)
}

/// Per-category metrics plus their unweighted mean under `"mean"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub categories: BTreeMap<String, BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
}

impl Report {
    pub fn from_categories(categories: BTreeMap<String, BTreeMap<String, f64>>) -> Self {
        let mut mean = BTreeMap::new();
        for key in METRIC_KEYS {
            let vals: Vec<f64> = categories.values().filter_map(|m| m.get(key).copied()).collect();
            if !vals.is_empty() {
                mean.insert(key.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Report { categories, mean }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16}", "category");
        for k in METRIC_KEYS {
            let _ = write!(s, " {k:>22}");
        }
        s.push('\n');
        let mean_label = "mean".to_string();
        let rows = self.categories.iter().chain(std::iter::once((&mean_label, &self.mean)));
        for (name, m) in rows {
            let _ = write!(s, "{name:<16}");
            for k in METRIC_KEYS {
                match m.get(k) {
                    Some(v) => {
                        let _ = write!(s, " {:>22.4}", v);
                    }
                    None => {
                        let _ = write!(s, " {:>22}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Where the per-pixel maps come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MapSource {
    #[default]
    Model,
    /// Ground-truth masks as maps; every metric should then be 1.
    Oracle,
}

/// Calibrated scoring of every test sample at the model's input size.
pub fn score_test_split(
    model: &crate::nets::TripletModel,
    stats: &crate::scorer::CalibrationStats,
    dataset: &crate::datasets::Dataset,
    projection: crate::scorer::Projection,
    source: MapSource,
) -> Result<Vec<EvalSample>> {
    use crate::datasets::{preprocess, Split};
    let size = model.config.image_size;
    dataset
        .split(Split::Test)
        .map(|s| {
            let regions = s.annotations_at(size, &dataset.defects);
            let map = match source {
                MapSource::Model => {
                    let x = preprocess(&s.image, size)?;
                    crate::scorer::score_image_with(model, stats, &x, projection)?.map.values
                }
                MapSource::Oracle => (0..size * size)
                    .map(|p| if regions.iter().any(|r| r.mask[p]) { 1.0 } else { 0.0 })
                    .collect(),
            };
            let score = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(EvalSample {
                id: s.id.clone(),
                score,
                kind: s.label.kind(),
                map,
                regions,
            })
        })
        .collect()
}

/// Scores the test split and reports one category.
pub fn evaluate(
    model: &crate::nets::TripletModel,
    stats: &crate::scorer::CalibrationStats,
    dataset: &crate::datasets::Dataset,
) -> Result<Report> {
    let samples = score_test_split(
        model,
        stats,
        dataset,
        crate::scorer::Projection::Sigmoid,
        MapSource::Model,
    )?;
    let mut cats = BTreeMap::new();
    cats.insert(dataset.category.clone(), category_metrics(&samples)?);
    Ok(Report::from_categories(cats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(anom: &[f64], norm: &[f64]) -> Vec<LabeledScore> {
        anom.iter()
            .map(|&s| LabeledScore::new(s, true))
            .chain(norm.iter().map(|&s| LabeledScore::new(s, false)))
            .collect()
    }

    #[test]
    fn roc_auc_examples() {
        assert_eq!(roc_auc(&labeled(&[0.8, 0.9], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(roc_auc(&labeled(&[0.3, 0.3], &[0.3, 0.3, 0.3])).unwrap(), 0.5);
        assert_eq!(roc_auc(&labeled(&[0.9, 0.4], &[0.5, 0.1])).unwrap(), 0.75);
        assert!(roc_auc(&labeled(&[0.9], &[])).is_err());
        assert!(roc_auc(&labeled(&[f64::NAN], &[0.1])).is_err());
    }

    #[test]
    fn pixel_auroc_examples() {
        let mask = [true, false, false, true];
        let map: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        assert_eq!(pixel_roc_auc(&[&map], &[&mask]).unwrap(), 1.0);
        assert_eq!(pixel_roc_auc(&[&[0.3; 4]], &[&mask]).unwrap(), 0.5);
    }

    fn single_region(map: Vec<f64>, mask: Vec<bool>, sat: f64) -> (Vec<f64>, Vec<DefectAnnotation>) {
        (map, vec![DefectAnnotation { mask, saturation_area: sat }])
    }

    #[test]
    fn perfect_and_constant_pro() {
        let mask: Vec<bool> = (0..16).map(|i| i < 4).collect();
        let map: Vec<f64> = (0..16).map(|i| if i < 4 { 0.9 } else { 0.1 + i as f64 * 0.01 }).collect();
        let (m, r) = single_region(map, mask.clone(), 4.0);
        let imgs = [RegionImage { map: &m, regions: &r }];
        for limit in [0.05, 0.3, 1.0] {
            assert_eq!(aupro(&imgs, limit).unwrap(), 1.0);
        }
        let c = vec![0.5; 16];
        let imgs = [RegionImage { map: &c, regions: &r }];
        assert!((aupro(&imgs, 1.0).unwrap() - 0.5).abs() < 1e-12);
        // The chord PRO(f) = f integrates to L^2/2, i.e. L/2 after normalization.
        assert!((aupro(&imgs, 0.3).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn saturation_caps_overlap() {
        let mask: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let map: Vec<f64> = (0..20).map(|i| if i < 5 { 1.0 } else { 0.0 }).collect();
        let (m, r) = single_region(map, mask, 5.0);
        let curve = overlap_curve(&[RegionImage { map: &m, regions: &r }], true).unwrap();
        assert_eq!(curve[1], (0.0, 1.0));
        let plain = overlap_curve(&[RegionImage { map: &m, regions: &r }], false).unwrap();
        assert_eq!(plain[1], (0.0, 0.5));
    }

    #[test]
    fn pro_errors() {
        let m = vec![0.1; 4];
        let r = vec![DefectAnnotation::full(vec![true; 4])];
        assert!(aupro(&[RegionImage { map: &m, regions: &r }], 0.3).is_err());
        assert!(aupro(&[RegionImage { map: &m, regions: &[] }], 0.3).is_err());
        let r = vec![DefectAnnotation::full(vec![true, false, false, false])];
        assert!(aupro(&[RegionImage { map: &m, regions: &r }], 0.0).is_err());
        let bad = vec![DefectAnnotation { mask: vec![true, false, false, false], saturation_area: 2.0 }];
        assert!(spro(&[RegionImage { map: &m, regions: &bad }], 0.3).is_err());
    }

    #[test]
    fn report_means_and_rendering() {
        let mut cats = BTreeMap::new();
        for (name, v) in [("a", 0.6), ("b", 0.8)] {
            let m: BTreeMap<String, f64> = METRIC_KEYS.iter().map(|k| (k.to_string(), v)).collect();
            cats.insert(name.to_string(), m);
        }
        let r = Report::from_categories(cats);
        assert!((r.mean["image_auroc"] - 0.7).abs() < 1e-12);
        let table = r.to_table();
        assert_eq!(table.lines().count(), 4);
        let back: Report = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
