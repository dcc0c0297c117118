//! Single-file binary checkpoints.
//!
//! Layout: magic `LGADCKPT`, `u32` format version, a length-prefixed text
//! manifest of `key = value` lines, then a counted list of named arrays
//! (`u32` name length, name, `u32` rank, `u64` dims, raw little-endian `f32`).
//! Everything is little-endian. Arrays round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::nets::{ChannelStats, ModelConfig, ParamStore, PdnConfig, StudentHeads, TripletModel};
use crate::numeric::NdArray;

pub const MAGIC: &[u8; 8] = b"LGADCKPT";
pub const FORMAT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

/// Optimizer moments stored alongside the model for exact resumption.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerState {
    /// Keyed by parameter name, e.g. `student.conv1.weight`.
    pub first_moment: BTreeMap<String, NdArray<f32>>,
    pub second_moment: BTreeMap<String, NdArray<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TripletModel,
    pub optimizer: Option<OptimizerState>,
}

fn manifest(cfg: &ModelConfig, step: u64) -> String {
    let heads = match cfg.student_heads {
        StudentHeads::Shared => "shared",
        StudentHeads::Separate => "separate",
    };
    let w = cfg.pdn.widths;
    format!(
        "format_version = {FORMAT_VERSION}\nstep = {step}\nin_channels = {}\nout_channels = {}\n\
         widths = {},{},{}\nae_width = {}\nimage_size = {}\ninstance_norm = {}\n\
         student_heads = {heads}\nseed = {}\n",
        cfg.pdn.in_channels,
        cfg.pdn.out_channels,
        w[0],
        w[1],
        w[2],
        cfg.ae_width,
        cfg.image_size,
        cfg.instance_norm,
        cfg.seed
    )
}

fn prefixed<'a>(
    prefix: &'a str,
    store: &'a ParamStore,
) -> impl Iterator<Item = (String, &'a NdArray<f32>)> + 'a {
    store.iter().map(move |(n, a)| (format!("{prefix}.{n}"), a))
}

fn named_arrays<'a>(
    model: &'a TripletModel,
    optimizer: Option<&'a OptimizerState>,
) -> Vec<(String, &'a NdArray<f32>)> {
    let mut out: Vec<(String, &NdArray<f32>)> = Vec::new();
    out.extend(prefixed("teacher", &model.teacher));
    out.push(("teacher_norm.mean".into(), &model.teacher_norm.mean));
    out.push(("teacher_norm.std".into(), &model.teacher_norm.std));
    out.extend(prefixed("student", &model.student));
    out.extend(prefixed("student_shadow", &model.student_shadow));
    out.extend(prefixed("autoencoder", &model.autoencoder));
    if let Some(opt) = optimizer {
        out.extend(opt.first_moment.iter().map(|(n, a)| (format!("optim.m.{n}"), a)));
        out.extend(opt.second_moment.iter().map(|(n, a)| (format!("optim.v.{n}"), a)));
    }
    out
}

pub fn encode(model: &TripletModel, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = manifest(&model.config, model.step);
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    let arrays = named_arrays(model, optimizer);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, arr) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(arr.shape().len() as u32).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in arr.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Writes atomically via a sibling temporary file.
pub fn save(path: &Path, model: &TripletModel, optimizer: Option<&OptimizerState>) -> Result<()> {
    let bytes = encode(model, optimizer);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_manifest(text: &str) -> std::result::Result<(ModelConfig, u64), CheckpointError> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Manifest(format!("malformed line {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| {
        kv.get(key)
            .ok_or_else(|| CheckpointError::Manifest(format!("missing key {key}")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, CheckpointError> {
        v.parse()
            .map_err(|_| CheckpointError::Manifest(format!("bad value for {key}: {v:?}")))
    }
    let widths: Vec<usize> = get("widths")?
        .split(',')
        .map(|w| num("widths", w.trim()))
        .collect::<std::result::Result<_, _>>()?;
    let widths: [usize; 3] = widths
        .try_into()
        .map_err(|_| CheckpointError::Manifest("widths needs three values".into()))?;
    let student_heads = match get("student_heads")?.as_str() {
        "shared" => StudentHeads::Shared,
        "separate" => StudentHeads::Separate,
        other => return Err(CheckpointError::Manifest(format!("bad student_heads {other:?}"))),
    };
    let cfg = ModelConfig {
        pdn: PdnConfig {
            in_channels: num("in_channels", get("in_channels")?)?,
            out_channels: num("out_channels", get("out_channels")?)?,
            widths,
        },
        ae_width: num("ae_width", get("ae_width")?)?,
        image_size: num("image_size", get("image_size")?)?,
        instance_norm: num("instance_norm", get("instance_norm")?)?,
        student_heads,
        seed: num("seed", get("seed")?)?,
    };
    Ok((cfg, num("step", get("step")?)?))
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| CheckpointError::Manifest("manifest is not UTF-8".into()))?;
    let (config, step) = parse_manifest(text)?;

    let count = r.u32()? as usize;
    let mut arrays: BTreeMap<String, NdArray<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Manifest("array name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::Manifest(format!("array {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = NdArray::new(shape, data)
            .map_err(|e| CheckpointError::Manifest(format!("array {name}: {e}")))?;
        arrays.insert(name, arr);
    }

    let template = TripletModel::new(config.clone())
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut take = |name: String, like: &NdArray<f32>| {
        let arr = arrays
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingArray(name.clone()))?;
        if arr.shape() != like.shape() {
            return Err(CheckpointError::ArrayShape {
                name,
                found: arr.shape().to_vec(),
                expected: like.shape().to_vec(),
            });
        }
        Ok(arr)
    };
    let mut fill = |prefix: &str, tpl: &ParamStore| -> std::result::Result<ParamStore, CheckpointError> {
        let mut out = ParamStore::default();
        for (n, a) in tpl.iter() {
            out.push(n, take(format!("{prefix}.{n}"), a)?);
        }
        Ok(out)
    };
    let teacher = fill("teacher", &template.teacher)?;
    let student = fill("student", &template.student)?;
    let student_shadow = fill("student_shadow", &template.student)?;
    let autoencoder = fill("autoencoder", &template.autoencoder)?;
    let teacher_norm = ChannelStats {
        mean: take("teacher_norm.mean".into(), &template.teacher_norm.mean)?,
        std: take("teacher_norm.std".into(), &template.teacher_norm.std)?,
    };

    let mut optimizer = OptimizerState::default();
    for (name, arr) in arrays {
        if let Some(rest) = name.strip_prefix("optim.m.") {
            optimizer.first_moment.insert(rest.to_string(), arr);
        } else if let Some(rest) = name.strip_prefix("optim.v.") {
            optimizer.second_moment.insert(rest.to_string(), arr);
        } else {
            return Err(CheckpointError::Manifest(format!("unexpected array {name}")));
        }
    }
    let optimizer = (!optimizer.first_moment.is_empty()).then_some(optimizer);

    Ok(Checkpoint {
        model: TripletModel {
            config,
            teacher,
            teacher_norm,
            student,
            student_shadow,
            autoencoder,
            step,
        },
        optimizer,
    })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    decode_inner(bytes).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn load_model(path: &Path) -> Result<TripletModel> {
    Ok(load(path)?.model)
}

/// Loads a checkpoint and rejects it unless its architecture equals `expected`.
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<TripletModel> {
    let model = load_model(path)?;
    if let Some((field, found, want)) = config_difference(&model.config, expected) {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            kind: CheckpointError::ConfigMismatch {
                field,
                found,
                expected: want,
            },
        });
    }
    Ok(model)
}

/// First architectural field that differs; the seed is not architectural.
pub fn config_difference(
    found: &ModelConfig,
    expected: &ModelConfig,
) -> Option<(String, String, String)> {
    let pairs = [
        ("in_channels", found.pdn.in_channels.to_string(), expected.pdn.in_channels.to_string()),
        ("out_channels", found.pdn.out_channels.to_string(), expected.pdn.out_channels.to_string()),
        ("widths", format!("{:?}", found.pdn.widths), format!("{:?}", expected.pdn.widths)),
        ("ae_width", found.ae_width.to_string(), expected.ae_width.to_string()),
        ("image_size", found.image_size.to_string(), expected.image_size.to_string()),
        ("instance_norm", found.instance_norm.to_string(), expected.instance_norm.to_string()),
        (
            "student_heads",
            format!("{:?}", found.student_heads),
            format!("{:?}", expected.student_heads),
        ),
    ];
    pairs
        .into_iter()
        .find(|(_, a, b)| a != b)
        .map(|(f, a, b)| (f.to_string(), a, b))
}
