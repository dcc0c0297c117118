//! Image pipeline, LOCO-layout loading and the synthetic pegboard generator.

mod loco;
pub mod pegboard;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};
use crate::metrics::{AnomalyKind, DefectAnnotation};
use crate::numeric::{bilinear_resize, NdArray};

pub use loco::{load_loco_layout, write_loco_layout, DEFECTS_CONFIG};
pub use pegboard::{gen_mini_loco, render_mini_loco, MiniLocoSpec};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// 8-bit interleaved RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for RawImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RawImage({}x{})", self.width, self.height)
    }
}

impl RawImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RawImage {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `3 x H x W` copy scaled to `[0, 1]`.
    pub fn to_unit_planes(&self) -> NdArray<f32> {
        let plane = self.width * self.height;
        NdArray::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.pixels[p * 3 + c] as f32 / 255.0
        })
    }
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let channels = img.color().channel_count();
    if channels != 3 {
        return Err(DatasetError::Image {
            path: path.to_path_buf(),
            msg: format!("expected 3 channels, found {channels}"),
        }
        .into());
    }
    let rgb = img.to_rgb8();
    Ok(RawImage {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        pixels: rgb.into_raw(),
    })
}

pub fn save_image(path: &Path, img: &RawImage) -> Result<()> {
    image::save_buffer(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| image_io_error(path, e))
}

fn image_io_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => DatasetError::Image {
            path: path.to_path_buf(),
            msg: other.to_string(),
        }
        .into(),
    }
}

pub fn save_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| image_io_error(path, e))
}

/// Loads a single-channel mask; any value above 127 is foreground.
pub fn load_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let l = img.to_luma8();
    let (w, h) = (l.width() as usize, l.height() as usize);
    Ok((l.into_raw().into_iter().map(|v| v > 127).collect(), w, h))
}

/// In-place ImageNet standardization of `3 x H x W` planes in `[0, 1]`.
pub fn standardize(planes: &mut NdArray<f32>) -> Result<()> {
    let (c, h, w) = planes.dims3("standardize")?;
    if c != 3 {
        return Err(Error::shape("standardize", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    for (i, v) in planes.data_mut().iter_mut().enumerate() {
        let ch = i / plane;
        *v = (*v - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch];
    }
    Ok(())
}

/// Bilinear resize to `size x size`, scale to `[0, 1]`, ImageNet standardization.
pub fn preprocess(img: &RawImage, size: usize) -> Result<NdArray<f32>> {
    if img.width == 0 || img.height == 0 || img.pixels.len() != img.width * img.height * 3 {
        return Err(Error::shape("preprocess", format!("malformed {img:?}")));
    }
    let mut planes = bilinear_resize(&img.to_unit_planes(), size, size)?;
    standardize(&mut planes)?;
    Ok(planes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Good,
    LogicalAnomaly,
    StructuralAnomaly,
}

impl Label {
    pub fn kind(self) -> Option<AnomalyKind> {
        match self {
            Label::Good => None,
            Label::LogicalAnomaly => Some(AnomalyKind::Logical),
            Label::StructuralAnomaly => Some(AnomalyKind::Structural),
        }
    }

    /// Directory name under `test/` and `ground_truth/`.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Good => "good",
            Label::LogicalAnomaly => "logical_anomalies",
            Label::StructuralAnomaly => "structural_anomalies",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "saturation_mode", content = "saturation_value", rename_all = "snake_case")]
pub enum SaturationRule {
    /// Fixed number of pixels.
    Absolute(f64),
    /// Fraction of the region's area.
    Relative(f64),
}

impl SaturationRule {
    /// Saturation area for a region of `area` pixels, clamped to `[1, area]`.
    pub fn area_for(self, area: usize) -> f64 {
        let a = area as f64;
        let s = match self {
            SaturationRule::Absolute(v) => v,
            SaturationRule::Relative(f) => f * a,
        };
        s.clamp(1.0, a.max(1.0))
    }

    pub fn validate(self) -> std::result::Result<(), String> {
        match self {
            SaturationRule::Absolute(v) if v >= 1.0 && v.is_finite() => Ok(()),
            SaturationRule::Relative(f) if f > 0.0 && f <= 1.0 => Ok(()),
            other => Err(format!("invalid saturation rule {other:?}")),
        }
    }
}

/// One defect region with the defect type that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub defect_type: String,
    pub annotation: DefectAnnotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `<split>/<label dir>/<stem>`, e.g. `test/logical_anomalies/003`.
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub image: RawImage,
    /// Empty for good samples.
    pub regions: Vec<Region>,
}

impl Sample {
    pub fn stem(&self) -> &str {
        self.id.rsplit('/').next().unwrap_or(&self.id)
    }

    /// Region annotations resampled (nearest neighbour) to `size x size`.
    pub fn annotations_at(&self, size: usize, rules: &BTreeMap<String, SaturationRule>) -> Vec<DefectAnnotation> {
        let (w, h) = (self.image.width, self.image.height);
        self.regions
            .iter()
            .filter_map(|r| {
                let mask = if (w, h) == (size, size) {
                    r.annotation.mask.clone()
                } else {
                    (0..size * size)
                        .map(|i| {
                            let (y, x) = (i / size, i % size);
                            let sy = ((y as f64 + 0.5) * h as f64 / size as f64) as usize;
                            let sx = ((x as f64 + 0.5) * w as f64 / size as f64) as usize;
                            r.annotation.mask[sy.min(h - 1) * w + sx.min(w - 1)]
                        })
                        .collect()
                };
                let area = mask.iter().filter(|&&m| m).count();
                if area == 0 {
                    return None;
                }
                let rule = rules.get(&r.defect_type).copied().unwrap_or(SaturationRule::Relative(1.0));
                Some(DefectAnnotation {
                    mask,
                    saturation_area: rule.area_for(area),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub category: String,
    pub defects: BTreeMap<String, SaturationRule>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.split(split).filter(|s| s.label == label).count()
    }

    pub fn preprocessed(&self, split: Split, size: usize) -> Result<Vec<NdArray<f32>>> {
        self.split(split).map(|s| preprocess(&s.image, size)).collect()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: train {} | validation {} | test good {}, logical {}, structural {}",
            self.category,
            self.count(Split::Train, Label::Good),
            self.count(Split::Validation, Label::Good),
            self.count(Split::Test, Label::Good),
            self.count(Split::Test, Label::LogicalAnomaly),
            self.count(Split::Test, Label::StructuralAnomaly),
        )
    }
}
