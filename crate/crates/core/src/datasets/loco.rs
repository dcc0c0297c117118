//! On-disk layout:
//!
//! ```text
//! <root>/train/good/*.png
//! <root>/validation/good/*.png
//! <root>/test/{good,logical_anomalies,structural_anomalies}/*.png
//! <root>/ground_truth/{logical_anomalies,structural_anomalies}/<stem>/NNN.png
//! <root>/ground_truth/.../<stem>/defect_type.txt
//! <root>/defects_config.toml
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_image, load_mask, save_image, save_mask, Dataset, Label, Region, SaturationRule, Sample, Split};
use crate::error::{DatasetError, Error, Result};
use crate::metrics::DefectAnnotation;

pub const DEFECTS_CONFIG: &str = "defects_config.toml";
const DEFECT_TYPE_FILE: &str = "defect_type.txt";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefectsFile {
    category: Option<String>,
    #[serde(default)]
    defect: Vec<DefectEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefectEntry {
    defect_type: String,
    saturation_mode: String,
    saturation_value: f64,
}

const LAYOUT: [(Split, Label, &str); 5] = [
    (Split::Train, Label::Good, "train/good"),
    (Split::Validation, Label::Good, "validation/good"),
    (Split::Test, Label::Good, "test/good"),
    (Split::Test, Label::LogicalAnomaly, "test/logical_anomalies"),
    (Split::Test, Label::StructuralAnomaly, "test/structural_anomalies"),
];

fn split_prefix(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `dataset` in the layout [`load_loco_layout`] reads.
pub fn write_loco_layout(dataset: &Dataset, root: &Path) -> Result<()> {
    for (_, _, dir) in LAYOUT {
        mkdir(&root.join(dir))?;
    }
    for s in &dataset.samples {
        let dir = root.join(split_prefix(s.split)).join(s.label.dir_name());
        save_image(&dir.join(format!("{}.png", s.stem())), &s.image)?;
        if s.regions.is_empty() {
            continue;
        }
        let gt = root.join("ground_truth").join(s.label.dir_name()).join(s.stem());
        mkdir(&gt)?;
        for (k, r) in s.regions.iter().enumerate() {
            save_mask(&gt.join(format!("{k:03}.png")), &r.annotation.mask, s.image.width, s.image.height)?;
        }
        let path = gt.join(DEFECT_TYPE_FILE);
        fs::write(&path, format!("{}\n", s.regions[0].defect_type)).map_err(|e| Error::io(&path, e))?;
    }
    let file = DefectsFile {
        category: Some(dataset.category.clone()),
        defect: dataset
            .defects
            .iter()
            .map(|(name, rule)| {
                let (mode, value) = match *rule {
                    SaturationRule::Absolute(v) => ("absolute", v),
                    SaturationRule::Relative(v) => ("relative", v),
                };
                DefectEntry {
                    defect_type: name.clone(),
                    saturation_mode: mode.into(),
                    saturation_value: value,
                }
            })
            .collect(),
    };
    let path = root.join(DEFECTS_CONFIG);
    let text = toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_defects(path: &Path) -> Result<(Option<String>, BTreeMap<String, SaturationRule>)> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::from(DatasetError::MalformedConfig {
            path: path.to_path_buf(),
            msg: "file is missing".into(),
        }),
        _ => Error::io(path, e),
    })?;
    let malformed = |msg: String| DatasetError::MalformedConfig {
        path: path.to_path_buf(),
        msg,
    };
    let file: DefectsFile = toml::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let mut rules = BTreeMap::new();
    for d in file.defect {
        let rule = match d.saturation_mode.as_str() {
            "absolute" => SaturationRule::Absolute(d.saturation_value),
            "relative" => SaturationRule::Relative(d.saturation_value),
            other => return Err(malformed(format!("unknown saturation_mode `{other}`")).into()),
        };
        rule.validate()
            .map_err(|m| malformed(format!("{}: {m}", d.defect_type)))?;
        if rules.insert(d.defect_type.clone(), rule).is_some() {
            return Err(malformed(format!("duplicate defect_type `{}`", d.defect_type)).into());
        }
    }
    Ok((file.category, rules))
}

/// Sorted `*.png` files of a directory.
fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_regions(
    gt: &Path,
    image_path: &Path,
    dims: (usize, usize),
    rules: &BTreeMap<String, SaturationRule>,
) -> Result<Vec<Region>> {
    let masks = pngs(gt)?;
    if masks.is_empty() {
        return Err(DatasetError::MissingMasks(image_path.to_path_buf()).into());
    }
    let type_path = gt.join(DEFECT_TYPE_FILE);
    let defect_type = fs::read_to_string(&type_path)
        .map_err(|e| Error::io(&type_path, e))?
        .trim()
        .to_string();
    let Some(&rule) = rules.get(&defect_type) else {
        return Err(DatasetError::UnknownDefect {
            path: type_path,
            defect_type,
        }
        .into());
    };
    let mut regions = Vec::new();
    for m in masks {
        let (mask, w, h) = load_mask(&m)?;
        if (w, h) != dims {
            return Err(DatasetError::Image {
                path: m,
                msg: format!("mask is {w}x{h}, image is {}x{}", dims.0, dims.1),
            }
            .into());
        }
        let area = mask.iter().filter(|&&v| v).count();
        if area == 0 {
            continue;
        }
        regions.push(Region {
            defect_type: defect_type.clone(),
            annotation: DefectAnnotation {
                mask,
                saturation_area: rule.area_for(area),
            },
        });
    }
    if regions.is_empty() {
        return Err(DatasetError::MissingMasks(image_path.to_path_buf()).into());
    }
    Ok(regions)
}

/// Indexes and decodes a category directory.
pub fn load_loco_layout(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(DatasetError::MissingDir(root.to_path_buf()).into());
    }
    for (_, _, dir) in LAYOUT {
        if !root.join(dir).is_dir() {
            return Err(DatasetError::MissingDir(root.join(dir)).into());
        }
    }
    let (category, rules) = read_defects(&root.join(DEFECTS_CONFIG))?;
    let category = category.unwrap_or_else(|| stem_of(root));

    let mut samples = Vec::new();
    let mut orphans = Vec::new();
    for (split, label, dir) in LAYOUT {
        let dir_path = root.join(dir);
        let files = pngs(&dir_path)?;
        if files.is_empty() && label == Label::Good {
            return Err(DatasetError::EmptySplit(dir_path).into());
        }
        let gt_root = root.join("ground_truth").join(label.dir_name());
        if label != Label::Good && !files.is_empty() && !gt_root.is_dir() {
            return Err(DatasetError::MissingDir(gt_root).into());
        }
        let mut stems = BTreeSet::new();
        for f in files {
            let stem = stem_of(&f);
            let image = load_image(&f)?;
            let regions = if label == Label::Good {
                Vec::new()
            } else {
                let gt = gt_root.join(&stem);
                if !gt.is_dir() {
                    return Err(DatasetError::MissingMasks(f).into());
                }
                load_regions(&gt, &f, (image.width, image.height), &rules)?
            };
            samples.push(Sample {
                id: format!("{dir}/{stem}"),
                split,
                label,
                image,
                regions,
            });
            stems.insert(stem);
        }
        if label != Label::Good && gt_root.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&gt_root)
                .map_err(|e| Error::io(&gt_root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
                    p.is_dir() && !name.is_some_and(|n| stems.contains(&n))
                })
                .collect();
            entries.sort();
            orphans.extend(entries);
        }
    }
    if !orphans.is_empty() {
        return Err(DatasetError::OrphanMasks(orphans).into());
    }
    Ok(Dataset {
        category,
        defects: rules,
        samples,
    })
}
