//! Synthetic "pegboard" category.
//!
//! The canvas is a `grid x grid` array of cells. The first `objects` cells
//! (row-major) each hold one colored square inside the cell's centered legal
//! square. In every column an object in an odd row must carry the partner
//! color of the object directly above it. Logical anomalies break exactly one
//! of these rules; structural anomalies paint scratches or blots on an
//! otherwise legal scene.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{write_loco_layout, Dataset, Label, RawImage, Region, SaturationRule, Sample, Split};
use crate::error::{DatasetError, Result};
use crate::metrics::DefectAnnotation;

pub const PALETTE: [[u8; 3]; 4] = [[200, 50, 45], [60, 160, 70], [50, 85, 200], [225, 195, 45]];
pub const BACKGROUND: [u8; 3] = [178, 176, 168];
const HOLE: [u8; 3] = [132, 130, 122];
const SCRATCH: [u8; 3] = [48, 44, 40];
const BLOT: [u8; 3] = [120, 80, 45];

/// Partner color index required below a color (red/blue, green/yellow).
pub fn partner(color: usize) -> usize {
    [2, 3, 0, 1][color]
}

pub const LOGICAL_DEFECTS: [&str; 4] = ["missing_object", "extra_object", "misplaced_object", "mismatched_pair"];
pub const STRUCTURAL_DEFECTS: [&str; 2] = ["scratch", "blot"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogicalMix {
    pub missing: f64,
    pub extra: f64,
    pub misplaced: f64,
    pub mismatched: f64,
}

impl Default for LogicalMix {
    fn default() -> Self {
        LogicalMix {
            missing: 1.0,
            extra: 1.0,
            misplaced: 1.0,
            mismatched: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructuralMix {
    pub scratch: f64,
    pub blot: f64,
}

impl Default for StructuralMix {
    fn default() -> Self {
        StructuralMix { scratch: 1.0, blot: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiniLocoSpec {
    pub category: String,
    pub canvas: usize,
    pub grid: usize,
    pub objects: usize,
    pub count_rule: bool,
    pub position_rule: bool,
    pub pairing_rule: bool,
    pub train: usize,
    pub validation: usize,
    pub test_good: usize,
    pub logical: usize,
    pub structural: usize,
    pub logical_mix: LogicalMix,
    pub structural_mix: StructuralMix,
    /// Per-pixel Gaussian noise, in 8-bit levels.
    pub noise: f64,
    /// Half-width of the uniform per-image brightness shift.
    pub brightness_jitter: f64,
    pub saturation: SaturationRule,
    pub seed: u64,
}

impl Default for MiniLocoSpec {
    fn default() -> Self {
        MiniLocoSpec {
            category: "pegboard".into(),
            canvas: 256,
            grid: 2,
            objects: 4,
            count_rule: true,
            position_rule: true,
            pairing_rule: true,
            train: 200,
            validation: 40,
            test_good: 40,
            logical: 40,
            structural: 40,
            logical_mix: LogicalMix::default(),
            structural_mix: StructuralMix::default(),
            noise: 3.0,
            brightness_jitter: 8.0,
            saturation: SaturationRule::Relative(0.5),
            seed: 0,
        }
    }
}

/// Pixel geometry shared by the renderer and rule checkers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub cell: usize,
    pub object: usize,
    /// Offset of the legal square inside its cell.
    pub legal_offset: usize,
    pub legal_side: usize,
}

impl Geometry {
    pub fn cell_origin(&self, grid: usize, cell: usize) -> (usize, usize) {
        ((cell % grid) * self.cell, (cell / grid) * self.cell)
    }

    pub fn legal_origin(&self, grid: usize, cell: usize) -> (usize, usize) {
        let (x, y) = self.cell_origin(grid, cell);
        (x + self.legal_offset, y + self.legal_offset)
    }
}

impl MiniLocoSpec {
    /// 64 x 64 canvases for quick runs.
    pub fn fast() -> Self {
        MiniLocoSpec {
            canvas: 64,
            ..Self::default()
        }
    }

    pub fn geometry(&self) -> Geometry {
        let cell = self.canvas / self.grid.max(1);
        Geometry {
            cell,
            object: (cell / 5).max(3),
            legal_offset: cell / 4,
            legal_side: cell / 2,
        }
    }

    fn paired_cells(&self) -> Vec<usize> {
        (0..self.objects)
            .filter(|&k| (k / self.grid) % 2 == 1 && k >= self.grid)
            .collect()
    }

    fn logical_weights(&self) -> [f64; 4] {
        let m = &self.logical_mix;
        let pairing = self.pairing_rule && !self.paired_cells().is_empty();
        [
            if self.count_rule { m.missing } else { 0.0 },
            if self.count_rule { m.extra } else { 0.0 },
            if self.position_rule { m.misplaced } else { 0.0 },
            if pairing { m.mismatched } else { 0.0 },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DatasetError::Unsatisfiable(m).into());
        if self.grid == 0 || self.canvas == 0 || self.canvas % self.grid != 0 {
            return fail(format!("canvas {} is not divisible into a {} grid", self.canvas, self.grid));
        }
        if self.objects == 0 || self.objects > self.grid * self.grid {
            return fail(format!(
                "{} objects need more than the {} available cells",
                self.objects,
                self.grid * self.grid
            ));
        }
        let g = self.geometry();
        if g.cell < 16 || 2 * g.object + 2 > g.legal_side {
            return fail(format!("cells of {} px are too small to render objects", g.cell));
        }
        if !(self.count_rule || self.position_rule || self.pairing_rule) {
            return fail("at least one logical rule must be active".into());
        }
        let lw = self.logical_weights();
        if self.logical > 0 && !(lw.iter().all(|w| *w >= 0.0) && lw.iter().sum::<f64>() > 0.0) {
            return fail("no logical anomaly type is enabled by the active rules and mix".into());
        }
        let sm = &self.structural_mix;
        if self.structural > 0 && !(sm.scratch >= 0.0 && sm.blot >= 0.0 && sm.scratch + sm.blot > 0.0) {
            return fail("structural mix has no positive weight".into());
        }
        if !(self.noise >= 0.0 && self.brightness_jitter >= 0.0) {
            return fail("noise levels must be >= 0".into());
        }
        if self.train == 0 || self.validation == 0 || self.test_good == 0 {
            return fail("train, validation and test_good counts must be >= 1".into());
        }
        self.saturation
            .validate()
            .map_err(|m| DatasetError::Unsatisfiable(m).into())
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    x: usize,
    y: usize,
    color: usize,
}

struct Renderer<'a> {
    spec: &'a MiniLocoSpec,
    geo: Geometry,
}

impl Renderer<'_> {
    fn random_in_legal(&self, rng: &mut ChaCha8Rng, cell: usize) -> (usize, usize) {
        let (lx, ly) = self.geo.legal_origin(self.spec.grid, cell);
        let span = self.geo.legal_side - self.geo.object;
        (lx + rng.random_range(0..=span), ly + rng.random_range(0..=span))
    }

    fn normal_scene(&self, rng: &mut ChaCha8Rng) -> Vec<Option<Object>> {
        let grid = self.spec.grid;
        let mut objects: Vec<Option<Object>> = vec![None; grid * grid];
        for k in 0..self.spec.objects {
            let above = (k >= grid && (k / grid) % 2 == 1).then(|| objects[k - grid]).flatten();
            let color = match above {
                Some(a) if self.spec.pairing_rule => partner(a.color),
                _ => rng.random_range(0..PALETTE.len()),
            };
            let (x, y) = self.random_in_legal(rng, k);
            objects[k] = Some(Object { x, y, color });
        }
        objects
    }

    fn object_mask(&self, o: &Object) -> Vec<bool> {
        let c = self.spec.canvas;
        let s = self.geo.object;
        (0..c * c)
            .map(|i| {
                let (y, x) = (i / c, i % c);
                x >= o.x && x < o.x + s && y >= o.y && y < o.y + s
            })
            .collect()
    }

    fn legal_mask(&self, cell: usize) -> Vec<bool> {
        let c = self.spec.canvas;
        let (lx, ly) = self.geo.legal_origin(self.spec.grid, cell);
        let s = self.geo.legal_side;
        (0..c * c)
            .map(|i| {
                let (y, x) = (i / c, i % c);
                x >= lx && x < lx + s && y >= ly && y < ly + s
            })
            .collect()
    }

    fn paint_board(&self, objects: &[Object]) -> RawImage {
        let c = self.spec.canvas;
        let mut img = RawImage::filled(c, c, BACKGROUND);
        let pitch = (c / 16).max(4);
        let hole = (c / 128).max(1);
        for y in 0..c {
            for x in 0..c {
                if (x + pitch / 2) % pitch < hole && (y + pitch / 2) % pitch < hole {
                    img.set(x, y, HOLE);
                }
            }
        }
        let s = self.geo.object;
        for o in objects {
            for y in o.y..o.y + s {
                for x in o.x..o.x + s {
                    img.set(x, y, PALETTE[o.color]);
                }
            }
        }
        img
    }

    fn logical(&self, rng: &mut ChaCha8Rng, kind: usize) -> (Vec<Object>, &'static str, Vec<bool>) {
        let mut scene = self.normal_scene(rng);
        let occupied: Vec<usize> = (0..self.spec.objects).collect();
        let s = self.geo.object;
        let (mask, name) = match kind {
            0 => {
                let k = occupied[rng.random_range(0..occupied.len())];
                scene[k] = None;
                (self.legal_mask(k), LOGICAL_DEFECTS[0])
            }
            1 => {
                let k = occupied[rng.random_range(0..occupied.len())];
                let existing = scene[k].expect("occupied cell");
                let apart = |a: (usize, usize), b: (usize, usize)| {
                    a.0 + s + 2 <= b.0 || b.0 + s + 2 <= a.0 || a.1 + s + 2 <= b.1 || b.1 + s + 2 <= a.1
                };
                let mut extra = None;
                for _ in 0..256 {
                    let p = self.random_in_legal(rng, k);
                    if apart(p, (existing.x, existing.y)) {
                        extra = Some(p);
                        break;
                    }
                }
                let (ex, ey) = extra.unwrap_or_else(|| {
                    // Opposite corners of the legal square always leave a gap.
                    let (lx, ly) = self.geo.legal_origin(self.spec.grid, k);
                    scene[k] = Some(Object { x: lx, y: ly, ..existing });
                    let far = self.geo.legal_side - s;
                    (lx + far, ly + far)
                });
                let obj = Object { x: ex, y: ey, color: existing.color };
                let mask = self.object_mask(&obj);
                let mut objects: Vec<Object> = scene.iter().flatten().copied().collect();
                objects.push(obj);
                return (objects, LOGICAL_DEFECTS[1], mask);
            }
            2 => {
                let k = occupied[rng.random_range(0..occupied.len())];
                let (cx, cy) = self.geo.cell_origin(self.spec.grid, k);
                let (lx, ly) = self.geo.legal_origin(self.spec.grid, k);
                let ls = self.geo.legal_side;
                let hi = self.geo.cell - s - 1;
                let (x, y) = loop {
                    let (x, y) = (cx + rng.random_range(1..=hi), cy + rng.random_range(1..=hi));
                    let disjoint = x + s <= lx || x >= lx + ls || y + s <= ly || y >= ly + ls;
                    if disjoint {
                        break (x, y);
                    }
                };
                let o = scene[k].as_mut().expect("occupied cell");
                o.x = x;
                o.y = y;
                (self.object_mask(o), LOGICAL_DEFECTS[2])
            }
            _ => {
                let cells = self.spec.paired_cells();
                let k = cells[rng.random_range(0..cells.len())];
                let above = scene[k - self.spec.grid].expect("paired cell").color;
                let wrong: Vec<usize> = (0..PALETTE.len()).filter(|&c| c != partner(above)).collect();
                let o = scene[k].as_mut().expect("occupied cell");
                o.color = wrong[rng.random_range(0..wrong.len())];
                (self.object_mask(o), LOGICAL_DEFECTS[3])
            }
        };
        (scene.into_iter().flatten().collect(), name, mask)
    }

    fn structural(&self, rng: &mut ChaCha8Rng, img: &mut RawImage, kind: usize) -> (&'static str, Vec<bool>) {
        let c = self.spec.canvas as f64;
        let n = self.spec.canvas;
        let mut mask = vec![false; n * n];
        if kind == 0 {
            let half_width = (c / 128.0).max(0.5);
            let len = rng.random_range(0.25 * c..0.5 * c);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (len * angle.cos(), len * angle.sin());
            let x0 = rng.random_range(0.1 * c..0.9 * c);
            let y0 = rng.random_range(0.1 * c..0.9 * c);
            for (i, m) in mask.iter_mut().enumerate() {
                let (px, py) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                let t = (((px - x0) * dx + (py - y0) * dy) / (len * len)).clamp(0.0, 1.0);
                let (qx, qy) = (x0 + t * dx, y0 + t * dy);
                *m = (px - qx).hypot(py - qy) <= half_width;
            }
        } else {
            let cx = rng.random_range(0.15 * c..0.85 * c);
            let cy = rng.random_range(0.15 * c..0.85 * c);
            let rx = rng.random_range(c / 24.0..c / 12.0).max(1.5);
            let ry = rng.random_range(c / 24.0..c / 12.0).max(1.5);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for (i, m) in mask.iter_mut().enumerate() {
                let (px, py) = ((i % n) as f64 + 0.5 - cx, (i / n) as f64 + 0.5 - cy);
                let r = (px / rx).hypot(py / ry);
                let wobble = 1.0 + 0.25 * (3.0 * py.atan2(px) + phase).sin();
                *m = r <= wobble;
            }
        }
        if !mask.iter().any(|&m| m) {
            mask[(n / 2) * n + n / 2] = true;
        }
        let color = if kind == 0 { SCRATCH } else { BLOT };
        for (i, &m) in mask.iter().enumerate() {
            if m {
                img.set(i % n, i / n, color);
            }
        }
        (STRUCTURAL_DEFECTS[kind], mask)
    }

    fn jitter(&self, rng: &mut ChaCha8Rng, img: &mut RawImage) {
        let j = self.spec.brightness_jitter;
        let shift = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let noise = Normal::new(0.0, self.spec.noise).expect("validated noise level");
        for v in img.pixels.iter_mut() {
            let n = if self.spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = (*v as f64 + shift + n).round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn stream_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 32) | index as u64);
    rng
}

/// Renders the whole dataset in memory.
pub fn render_mini_loco(spec: &MiniLocoSpec) -> Result<Dataset> {
    spec.validate()?;
    let r = Renderer {
        spec,
        geo: spec.geometry(),
    };
    let mut samples = Vec::new();
    let good = |split: Split, prefix: &str, code: u64, count: usize, samples: &mut Vec<Sample>| {
        for i in 0..count {
            let mut rng = stream_rng(spec.seed, code, i);
            let scene: Vec<Object> = r.normal_scene(&mut rng).into_iter().flatten().collect();
            let mut image = r.paint_board(&scene);
            r.jitter(&mut rng, &mut image);
            samples.push(Sample {
                id: format!("{prefix}/{i:03}"),
                split,
                label: Label::Good,
                image,
                regions: Vec::new(),
            });
        }
    };
    good(Split::Train, "train/good", 0, spec.train, &mut samples);
    good(Split::Validation, "validation/good", 1, spec.validation, &mut samples);
    good(Split::Test, "test/good", 2, spec.test_good, &mut samples);

    let region = |name: &str, mask: Vec<bool>| {
        let area = mask.iter().filter(|&&m| m).count();
        Region {
            defect_type: name.to_string(),
            annotation: DefectAnnotation {
                mask,
                saturation_area: spec.saturation.area_for(area),
            },
        }
    };
    if spec.logical > 0 {
        let pick = WeightedIndex::new(spec.logical_weights()).expect("validated weights");
        for i in 0..spec.logical {
            let mut rng = stream_rng(spec.seed, 3, i);
            let kind = pick.sample(&mut rng);
            let (objects, name, mask) = r.logical(&mut rng, kind);
            let mut image = r.paint_board(&objects);
            r.jitter(&mut rng, &mut image);
            samples.push(Sample {
                id: format!("test/logical_anomalies/{i:03}"),
                split: Split::Test,
                label: Label::LogicalAnomaly,
                image,
                regions: vec![region(name, mask)],
            });
        }
    }
    if spec.structural > 0 {
        let sm = &spec.structural_mix;
        let pick = WeightedIndex::new([sm.scratch, sm.blot]).expect("validated weights");
        for i in 0..spec.structural {
            let mut rng = stream_rng(spec.seed, 4, i);
            let kind = pick.sample(&mut rng);
            let scene: Vec<Object> = r.normal_scene(&mut rng).into_iter().flatten().collect();
            let mut image = r.paint_board(&scene);
            let (name, mask) = r.structural(&mut rng, &mut image, kind);
            r.jitter(&mut rng, &mut image);
            samples.push(Sample {
                id: format!("test/structural_anomalies/{i:03}"),
                split: Split::Test,
                label: Label::StructuralAnomaly,
                image,
                regions: vec![region(name, mask)],
            });
        }
    }
    let defects: BTreeMap<String, SaturationRule> = LOGICAL_DEFECTS
        .iter()
        .chain(&STRUCTURAL_DEFECTS)
        .map(|n| (n.to_string(), spec.saturation))
        .collect();
    Ok(Dataset {
        category: spec.category.clone(),
        defects,
        samples,
    })
}

/// Renders the dataset and writes it under `out_dir` in the LOCO layout.
pub fn gen_mini_loco(spec: &MiniLocoSpec, out_dir: &Path) -> Result<Dataset> {
    let ds = render_mini_loco(spec)?;
    write_loco_layout(&ds, out_dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MiniLocoSpec {
        MiniLocoSpec {
            train: 3,
            validation: 2,
            test_good: 2,
            logical: 8,
            structural: 4,
            ..MiniLocoSpec::fast()
        }
    }

    #[test]
    fn counts_match_spec() {
        let ds = render_mini_loco(&small()).unwrap();
        assert_eq!(ds.count(Split::Train, Label::Good), 3);
        assert_eq!(ds.count(Split::Validation, Label::Good), 2);
        assert_eq!(ds.count(Split::Test, Label::Good), 2);
        assert_eq!(ds.count(Split::Test, Label::LogicalAnomaly), 8);
        assert_eq!(ds.count(Split::Test, Label::StructuralAnomaly), 4);
        assert!(ds.samples.iter().all(|s| (s.label == Label::Good) == s.regions.is_empty()));
        assert!(ds.split(Split::Train).chain(ds.split(Split::Validation)).all(|s| s.label == Label::Good));
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(render_mini_loco(&small()).unwrap(), render_mini_loco(&small()).unwrap());
        let other = MiniLocoSpec { seed: 1, ..small() };
        assert_ne!(render_mini_loco(&other).unwrap(), render_mini_loco(&small()).unwrap());
    }

    #[test]
    fn unsatisfiable_specs_are_rejected() {
        for spec in [
            MiniLocoSpec { objects: 5, ..small() },
            MiniLocoSpec { grid: 8, ..small() },
            MiniLocoSpec { count_rule: false, position_rule: false, pairing_rule: false, ..small() },
            MiniLocoSpec { canvas: 63, ..small() },
        ] {
            let err = render_mini_loco(&spec).unwrap_err();
            assert!(matches!(err, crate::Error::Dataset(DatasetError::Unsatisfiable(_))), "{err}");
        }
    }

    #[test]
    fn disabled_rules_exclude_their_anomalies() {
        let spec = MiniLocoSpec { count_rule: false, position_rule: false, ..small() };
        let ds = render_mini_loco(&spec).unwrap();
        assert!(ds
            .split(Split::Test)
            .filter(|s| s.label == Label::LogicalAnomaly)
            .all(|s| s.regions[0].defect_type == "mismatched_pair"));
    }
}
