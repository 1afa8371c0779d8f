//! File formats: IDX datasets, SAET tensors, checkpoint archives, PPM grids
//! and TOML run configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{from_u8, Dataset};
use crate::ebm_train::EbmTrainConfig;
use crate::models::{ClassifierArch, ClassifierParams, EnergyArch, EnergyNetParams, ModelError, Network, ParamSet, PgdConfig, TrainConfig};
use crate::pipeline::AttackConfig;
use crate::tensor::{DType, Scalar, Tensor};
use crate::warp::TransformFamily;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("truncated data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("dtype mismatch: file holds {found}, requested {expected}")]
    Dtype { expected: String, found: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing parameter `{0}` in checkpoint")]
    MissingKey(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_output(path, bytes)
}

/// Bounds-checked little cursor over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| IoError::Format("length overflow".into()))?;
        if end > self.bytes.len() {
            return Err(IoError::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IoError::BadMagic {
            expected: format!("{IDX_IMAGES_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let need = n * rows * cols;
    if r.remaining() < need {
        return Err(IoError::Truncated {
            expected: 16 + need,
            actual: bytes.len(),
        });
    }
    Ok((n, rows, cols, r.take(need)?.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IoError::BadMagic {
            expected: format!("{IDX_LABELS_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = r.u32_be()? as usize;
    if r.remaining() < n {
        return Err(IoError::Truncated {
            expected: 8 + n,
            actual: bytes.len(),
        });
    }
    Ok(r.take(n)?.to_vec())
}

pub fn encode_idx_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(images_path: &Path, labels_path: &Path, pixels: &[u8], labels: &[u8], rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != labels.len() * rows * cols {
        return Err(IoError::Format(format!(
            "{} pixels for {} images of {rows}x{cols}",
            pixels.len(),
            labels.len()
        )));
    }
    write_file(images_path, &encode_idx_images(pixels, labels.len(), rows, cols))?;
    write_file(labels_path, &encode_idx_labels(labels))
}

/// Loads an IDX image/label pair as `(n, 1, rows, cols)` images in `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if labels.len() != n {
        return Err(IoError::Format(format!("{n} images but {} labels", labels.len())));
    }
    from_u8(&pixels, &labels, rows, cols).map_err(IoError::Format)
}

pub const TENSOR_MAGIC: &[u8; 4] = b"SAET";
pub const TENSOR_VERSION: u32 = 1;

fn dtype_name(code: u8) -> String {
    DType::from_code(code).map(|d| format!("{d:?}")).unwrap_or_else(|| format!("code {code}"))
}

/// SAET encoding: magic, version, dtype, rank, dims, little-endian payload.
pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * t.rank() + t.len() * S::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(S::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn decode_tensor_from<S: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<S>> {
    let magic = r.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(IoError::BadMagic {
            expected: "SAET".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32_le()?;
    if version != TENSOR_VERSION {
        return Err(IoError::Version {
            found: version,
            supported: TENSOR_VERSION,
        });
    }
    let code = r.u8()?;
    if code != S::DTYPE.code() {
        return Err(IoError::Dtype {
            expected: format!("{:?}", S::DTYPE),
            found: dtype_name(code),
        });
    }
    let rank = r.u32_le()? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(usize::try_from(r.u64_le()?).map_err(|_| IoError::Format("dimension overflow".into()))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| IoError::Format("element count overflow".into()))?;
    let size = S::DTYPE.size();
    let need = count.checked_mul(size).ok_or_else(|| IoError::Format("payload overflow".into()))?;
    if r.remaining() < need {
        return Err(IoError::Truncated {
            expected: r.pos + need,
            actual: r.bytes.len(),
        });
    }
    let payload = r.take(need)?;
    let data = payload.chunks_exact(size).map(S::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| IoError::Format(e.to_string()))
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut r = Reader::new(bytes);
    let t = decode_tensor_from(&mut r)?;
    if r.remaining() != 0 {
        return Err(IoError::Trailing(r.remaining()));
    }
    Ok(t)
}

pub fn save_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    write_file(path, &encode_tensor(t))
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    decode_tensor(&read_file(path)?)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAEC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Header of a checkpoint archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `classifier` or `energy`.
    pub kind: String,
    /// Architecture description for the kind.
    pub arch: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

/// Archive layout: `SAEC`, version, manifest length (u64) and JSON manifest,
/// then one SAET record per manifest entry in order.
pub fn encode_checkpoint(kind: &str, arch: serde_json::Value, params: &ParamSet<f32>) -> Vec<u8> {
    let manifest = Manifest {
        kind: kind.to_string(),
        arch,
        params: params
            .entries()
            .iter()
            .map(|(n, t)| ManifestEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        out.extend_from_slice(&encode_tensor(t));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Manifest, ParamSet<f32>)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic {
            expected: "SAEC".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32_le()?;
    if version != TENSOR_VERSION {
        return Err(IoError::Version {
            found: version,
            supported: TENSOR_VERSION,
        });
    }
    let len = r.u64_le()? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(len)?).map_err(|e| IoError::Format(format!("manifest: {e}")))?;
    let mut entries = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        if r.remaining() == 0 {
            return Err(IoError::MissingKey(entry.name.clone()));
        }
        let t = decode_tensor_from::<f32>(&mut r)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(ModelError::ParamShape {
                name: entry.name.clone(),
                expected: entry.shape.clone(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        entries.push((entry.name.clone(), t));
    }
    if r.remaining() != 0 {
        return Err(IoError::Trailing(r.remaining()));
    }
    Ok((manifest, ParamSet::new(entries)))
}

pub fn save_checkpoint(path: &Path, kind: &str, arch: serde_json::Value, params: &ParamSet<f32>) -> Result<()> {
    write_file(path, &encode_checkpoint(kind, arch, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(Manifest, ParamSet<f32>)> {
    decode_checkpoint(&read_file(path)?)
}

pub fn save_classifier(path: &Path, net: &ClassifierParams<f32>) -> Result<()> {
    let arch = serde_json::to_value(net.arch()).expect("arch serializes");
    save_checkpoint(path, "classifier", arch, net.params())
}

/// Loads a classifier; with `expect` set, the stored parameters must fit that architecture.
pub fn load_classifier(path: &Path, expect: Option<ClassifierArch>) -> Result<ClassifierParams<f32>> {
    let (manifest, params) = load_checkpoint(path)?;
    let arch = match expect {
        Some(a) => a,
        None => serde_json::from_value(manifest.arch).map_err(|e| IoError::Format(format!("arch: {e}")))?,
    };
    Ok(ClassifierParams::from_params(arch, params)?)
}

pub fn save_energy(path: &Path, net: &EnergyNetParams<f32>) -> Result<()> {
    let arch = serde_json::to_value(net.arch()).expect("arch serializes");
    save_checkpoint(path, "energy", arch, net.params())
}

pub fn load_energy(path: &Path, expect: Option<EnergyArch>) -> Result<EnergyNetParams<f32>> {
    let (manifest, params) = load_checkpoint(path)?;
    let arch = match expect {
        Some(a) => a,
        None => serde_json::from_value(manifest.arch).map_err(|e| IoError::Format(format!("arch: {e}")))?,
    };
    Ok(EnergyNetParams::from_params(arch, params)?)
}

/// Nearest-neighbour upscale factor for grid tiles.
pub const GRID_SCALE: usize = 4;
pub const GREEN: [u8; 3] = [0, 200, 0];
pub const RED: [u8; 3] = [220, 0, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Tiles `[c, h, w]` images row-major, each upscaled ×4 inside a 1-px border
/// that is green where `flags[i]` is set and red otherwise.
pub fn render_grid(images: &[Tensor<f32>], cols: usize, flags: &[bool]) -> Result<RgbImage> {
    if images.is_empty() || cols == 0 || flags.len() != images.len() {
        return Err(IoError::Format(format!(
            "{} images, {} flags, {cols} columns",
            images.len(),
            flags.len()
        )));
    }
    let shape = images[0].shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(IoError::Format(format!("grid tiles must be [1|3, h, w], got {s:?}"))),
    };
    if images.iter().any(|t| t.shape() != shape.as_slice() || !t.all_within(0.0, 1.0)) {
        return Err(IoError::Format("grid tiles must share a shape and lie in [0, 1]".into()));
    }
    let (th, tw) = (h * GRID_SCALE + 2, w * GRID_SCALE + 2);
    let rows = images.len().div_ceil(cols);
    let (width, height) = (cols * tw, rows * th);
    let mut pixels = vec![0u8; width * height * 3];
    for (k, (img, &flag)) in images.iter().zip(flags).enumerate() {
        let (ox, oy) = ((k % cols) * tw, (k / cols) * th);
        let border = if flag { GREEN } else { RED };
        for y in 0..th {
            for x in 0..tw {
                let rgb = if x == 0 || y == 0 || x == tw - 1 || y == th - 1 {
                    border
                } else {
                    let (sx, sy) = ((x - 1) / GRID_SCALE, (y - 1) / GRID_SCALE);
                    let at = |ch: usize| (img.data()[ch * h * w + sy * w + sx] * 255.0).round() as u8;
                    if c == 1 {
                        [at(0); 3]
                    } else {
                        [at(0), at(1), at(2)]
                    }
                };
                let i = 3 * ((oy + y) * width + ox + x);
                pixels[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }
    Ok(RgbImage { width, height, pixels })
}

/// Writes [`render_grid`] as a binary PPM.
pub fn emit_grid(images: &[Tensor<f32>], cols: usize, flags: &[bool], path: &Path) -> Result<RgbImage> {
    let img = render_grid(images, cols, flags)?;
    write_file(path, &img.to_ppm())?;
    Ok(img)
}

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// IDX image/label files; when empty, procedural digits are generated.
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
            synthetic_train: 2000,
            synthetic_test: 500,
            synthetic_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub arch: ClassifierArch,
    pub train: TrainConfig,
    /// Inner maximization used by `adv-train`.
    pub pgd: PgdConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::madry(),
            train: TrainConfig::default(),
            pgd: PgdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub linf: PgdConfig,
    pub l2: PgdConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        use crate::models::Norm;
        Self {
            linf: PgdConfig {
                norm: Norm::Linf,
                eps: 0.3,
                alpha: 0.04,
                steps: 100,
            },
            l2: PgdConfig {
                norm: Norm::L2,
                eps: 3.0,
                alpha: 0.2,
                steps: 100,
            },
        }
    }
}

/// Every tunable of a run, as one TOML document with one table per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub family: TransformFamily,
    pub ebm: EbmTrainConfig,
    pub attack: AttackConfig,
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| IoError::Config(e.to_string()))?;
        Self::from_toml(&text)
    }
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut f = fs::File::create(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}
