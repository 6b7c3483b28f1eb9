//! On-disk tensors and the JSON manifests that index them.
//!
//! Tensor file layout, all little-endian:
//!
//! ```text
//! 0..8    magic "UVADTNSR"
//! 8..12   version (u32, = 1)
//! 12..16  dtype code (u32, 0 = f32, 1 = u8)
//! 16..20  ndim (u32, 1..=4)
//! 20..    ndim × u64 dims, then the row-major payload
//! ```
//!
//! Manifest paths are resolved relative to the directory of the manifest that
//! names them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Mask, RgbImage};
use crate::structural::TextFeaturePair;

pub const MAGIC: [u8; 8] = *b"UVADTNSR";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// Dense tensor as stored in a tensor file.
///
/// A zero-length leading dimension is allowed so that an empty mask stack
/// (`0 × H × W`) can be stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::InvalidTensor(format!("ndim {} outside [1, 4]", dims.len())));
        }
        let n: usize = dims.iter().product();
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        };
        if n != len {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} hold {n} elements but payload has {len}"
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Little-endian payload bytes exactly as written to disk.
    pub fn payload_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload_bytes();
        let mut out = Vec::with_capacity(HEADER_LEN + self.dims.len() * 8 + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.dtype().code().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a full tensor file image; `path` is only used in diagnostics.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: usize, found: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: found as u64,
        };
        if bytes.len() < 8 {
            return Err(truncated(HEADER_LEN, bytes.len()));
        }
        let magic: [u8; 8] = bytes[0..8].try_into().expect("8 bytes");
        if magic != MAGIC {
            return Err(Error::WrongMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN, bytes.len()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(8);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let code = word(12);
        let dtype = DType::from_code(code).ok_or_else(|| Error::UnsupportedDtype {
            path: path.to_path_buf(),
            code,
        })?;
        let ndim = word(16);
        if !(1..=4).contains(&ndim) {
            return Err(Error::BadRank {
                path: path.to_path_buf(),
                ndim,
            });
        }
        let dims_end = HEADER_LEN + ndim as usize * 8;
        if bytes.len() < dims_end {
            return Err(truncated(dims_end - HEADER_LEN, bytes.len() - HEADER_LEN));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        let mut count: u64 = 1;
        for i in 0..ndim as usize {
            let at = HEADER_LEN + i * 8;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::InvalidTensor(format!("{}: element count overflows", path.display())))?;
            dims.push(d as usize);
        }
        let expected = count
            .checked_mul(dtype.size() as u64)
            .ok_or_else(|| Error::InvalidTensor(format!("{}: payload size overflows", path.display())))?;
        let payload = &bytes[dims_end..];
        if payload.len() as u64 != expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                found: payload.len() as u64,
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }

    /// SHA-256 over dtype code, dims and payload, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dtype().code().to_le_bytes());
        for &d in &self.dims {
            h.update((d as u64).to_le_bytes());
        }
        h.update(self.payload_bytes());
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        matches!(self, Label::Anomalous)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLevelEntry {
    pub level_tag: String,
    pub path: PathBuf,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub sample_id: String,
    pub image_height: usize,
    pub image_width: usize,
    pub image_path: PathBuf,
    pub feature_levels: Vec<FeatureLevelEntry>,
    pub cluster_feature_path: PathBuf,
    pub candidate_masks_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_features_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
}

/// A bank entry is either a path to a sample manifest or the manifest inline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleEntry {
    Path(PathBuf),
    Inline(Box<SampleManifest>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceBankManifest {
    pub category: String,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_overrides: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub tag: String,
    pub features: FeatureMap,
}

/// A fully loaded, shape-validated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub levels: Vec<FeatureLevel>,
    pub cluster_features: FeatureMap,
    pub candidates: Vec<Mask>,
    pub text: Option<TextFeaturePair>,
    pub label: Option<Label>,
    pub gt_mask: Option<Mask>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn level(&self, tag: &str) -> Option<&FeatureMap> {
        self.levels.iter().find(|l| l.tag == tag).map(|l| &l.features)
    }

    /// Checks the invariants that `load_sample` enforces, for samples built in memory.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Manifest {
            manifest: self.id.clone(),
            field: field.to_string(),
            message,
        };
        let (h, w) = (self.height(), self.width());
        if h == 0 || w == 0 {
            return Err(bad("image_path", "image has zero extent".into()));
        }
        if self.levels.is_empty() {
            return Err(bad("feature_levels", "no feature levels".into()));
        }
        for (i, m) in self.candidates.iter().enumerate() {
            if m.height() != h || m.width() != w {
                return Err(bad(
                    "candidate_masks_path",
                    format!("mask {i} is {}x{}, image is {h}x{w}", m.height(), m.width()),
                ));
            }
        }
        if let Some(gt) = &self.gt_mask {
            if gt.height() != h || gt.width() != w {
                return Err(bad(
                    "gt_mask_path",
                    format!("gt mask is {}x{}, image is {h}x{w}", gt.height(), gt.width()),
                ));
            }
        }
        Ok(())
    }

    /// Converts the sample into tensors keyed by manifest role.
    pub fn to_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let (h, w) = (self.height(), self.width());
        let mut out = BTreeMap::new();
        out.insert(
            "image".to_string(),
            Tensor::u8(vec![h, w, 3], self.image.as_slice().to_vec())?,
        );
        for level in &self.levels {
            out.insert(format!("level:{}", level.tag), feature_tensor(&level.features)?);
        }
        out.insert("cluster".to_string(), feature_tensor(&self.cluster_features)?);
        let mut masks = Vec::with_capacity(self.candidates.len() * h * w);
        for m in &self.candidates {
            masks.extend(m.as_slice().iter().map(|&b| b as u8));
        }
        out.insert(
            "masks".to_string(),
            Tensor::u8(vec![self.candidates.len(), h, w], masks)?,
        );
        if let Some(text) = &self.text {
            let c = text.dim();
            let mut data = text.normal().to_vec();
            data.extend_from_slice(text.anomalous());
            out.insert("text".to_string(), Tensor::f32(vec![2, c], data)?);
        }
        if let Some(gt) = &self.gt_mask {
            out.insert(
                "gt".to_string(),
                Tensor::u8(vec![h, w], gt.as_slice().iter().map(|&b| b as u8).collect())?,
            );
        }
        Ok(out)
    }

    /// Per-tensor checksums, keyed like [`Sample::to_tensors`].
    pub fn checksums(&self) -> Result<BTreeMap<String, String>> {
        Ok(self.to_tensors()?.into_iter().map(|(k, t)| (k, t.checksum())).collect())
    }
}

fn feature_tensor(f: &FeatureMap) -> Result<Tensor> {
    Tensor::f32(vec![f.height(), f.width(), f.channels()], f.as_slice().to_vec())
}

/// Writes every tensor of `sample` next to a manifest `{id}.json` in `dir`
/// and returns the manifest path.
pub fn write_sample(sample: &Sample, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &sample.id;
    let tensors = sample.to_tensors()?;
    let file = |suffix: &str| PathBuf::from(format!("{id}.{suffix}.tnsr"));
    let put = |key: &str, name: &PathBuf| write_tensor(&tensors[key], dir.join(name));

    let image_path = file("image");
    put("image", &image_path)?;
    let mut feature_levels = Vec::new();
    for level in &sample.levels {
        let p = file(&level.tag);
        put(&format!("level:{}", level.tag), &p)?;
        feature_levels.push(FeatureLevelEntry {
            level_tag: level.tag.clone(),
            path: p,
            grid_h: level.features.height(),
            grid_w: level.features.width(),
            channels: level.features.channels(),
        });
    }
    let cluster_feature_path = file("cluster");
    put("cluster", &cluster_feature_path)?;
    let candidate_masks_path = file("masks");
    put("masks", &candidate_masks_path)?;
    let text_features_path = match sample.text {
        Some(_) => {
            let p = file("text");
            put("text", &p)?;
            Some(p)
        }
        None => None,
    };
    let gt_mask_path = match sample.gt_mask {
        Some(_) => {
            let p = file("gt");
            put("gt", &p)?;
            Some(p)
        }
        None => None,
    };
    let manifest = SampleManifest {
        sample_id: id.clone(),
        image_height: sample.height(),
        image_width: sample.width(),
        image_path,
        feature_levels,
        cluster_feature_path,
        candidate_masks_path,
        text_features_path,
        label: sample.label,
        gt_mask_path,
    };
    let path = dir.join(format!("{id}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_sample_manifest(path: impl AsRef<Path>) -> Result<SampleManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::ManifestParse {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the sample manifest at `path` and every tensor it references.
pub fn load_sample(path: impl AsRef<Path>) -> Result<Sample> {
    let path = path.as_ref();
    let manifest = read_sample_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    load_sample_manifest(&manifest, base, &path.display().to_string())
}

/// Loads a parsed manifest; relative paths resolve against `base`.
/// `origin` names the manifest in diagnostics.
pub fn load_sample_manifest(m: &SampleManifest, base: &Path, origin: &str) -> Result<Sample> {
    let bad = |field: &str, message: String| Error::Manifest {
        manifest: origin.to_string(),
        field: field.to_string(),
        message,
    };
    let open = |field: &str, rel: &Path| -> Result<Tensor> {
        let p = base.join(rel);
        if !p.is_file() {
            return Err(bad(field, format!("missing tensor file {}", p.display())));
        }
        read_tensor(&p).map_err(|e| bad(field, e.to_string()))
    };
    let (h, w) = (m.image_height, m.image_width);
    if h == 0 || w == 0 {
        return Err(bad("image_height", "image dims must be positive".into()));
    }

    let image_t = open("image_path", &m.image_path)?;
    let image = match image_t.as_u8() {
        Some(px) if image_t.dims() == [h, w, 3] => RgbImage::new(h, w, px.to_vec())?,
        Some(_) => {
            return Err(bad(
                "image_path",
                format!("declared {h}x{w}x3 but file has {:?}", image_t.dims()),
            ))
        }
        None => return Err(bad("image_path", "image must be uint8".into())),
    };

    if m.feature_levels.is_empty() {
        return Err(bad("feature_levels", "at least one feature level is required".into()));
    }
    let mut levels = Vec::with_capacity(m.feature_levels.len());
    for (i, entry) in m.feature_levels.iter().enumerate() {
        let field = format!("feature_levels[{i}]");
        if levels.iter().any(|l: &FeatureLevel| l.tag == entry.level_tag) {
            return Err(bad(&field, format!("duplicate level tag '{}'", entry.level_tag)));
        }
        let t = open(&field, &entry.path)?;
        let declared = [entry.grid_h, entry.grid_w, entry.channels];
        if t.dims() != declared {
            return Err(bad(
                &field,
                format!(
                    "level '{}' declared {}x{}x{} but file has {:?}",
                    entry.level_tag,
                    entry.grid_h,
                    entry.grid_w,
                    entry.channels,
                    t.dims()
                ),
            ));
        }
        let data = t
            .as_f32()
            .ok_or_else(|| bad(&field, format!("level '{}' must be float32", entry.level_tag)))?;
        levels.push(FeatureLevel {
            tag: entry.level_tag.clone(),
            features: FeatureMap::new(entry.grid_h, entry.grid_w, entry.channels, data.to_vec())
                .map_err(|e| bad(&field, e.to_string()))?,
        });
    }

    let ct = open("cluster_feature_path", &m.cluster_feature_path)?;
    let cluster_features = match (ct.as_f32(), ct.dims()) {
        (Some(data), &[ch, cw, cc]) => {
            FeatureMap::new(ch, cw, cc, data.to_vec()).map_err(|e| bad("cluster_feature_path", e.to_string()))?
        }
        _ => {
            return Err(bad(
                "cluster_feature_path",
                format!("expected float32 H1xW1xC, got {:?} {:?}", ct.dtype(), ct.dims()),
            ))
        }
    };

    let mt = open("candidate_masks_path", &m.candidate_masks_path)?;
    let candidates = match (mt.as_u8(), mt.dims()) {
        (Some(bytes), &[n, mh, mw]) if mh == h && mw == w => {
            if bytes.iter().any(|&b| b > 1) {
                return Err(bad("candidate_masks_path", "masks must be binary (0/1)".into()));
            }
            bytes
                .chunks_exact(h * w)
                .take(n)
                .map(|c| Mask::new(h, w, c.iter().map(|&b| b == 1).collect()))
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            return Err(bad(
                "candidate_masks_path",
                format!("expected uint8 Mx{h}x{w}, got {:?} {:?}", mt.dtype(), mt.dims()),
            ))
        }
    };

    let text = match &m.text_features_path {
        Some(p) => {
            let t = open("text_features_path", p)?;
            match (t.as_f32(), t.dims()) {
                (Some(data), &[2, c]) => Some(
                    TextFeaturePair::new(data[..c].to_vec(), data[c..].to_vec())
                        .map_err(|e| bad("text_features_path", e.to_string()))?,
                ),
                _ => {
                    return Err(bad(
                        "text_features_path",
                        format!("expected float32 2xC, got {:?} {:?}", t.dtype(), t.dims()),
                    ))
                }
            }
        }
        None => None,
    };

    let gt_mask = match &m.gt_mask_path {
        Some(p) => {
            let t = open("gt_mask_path", p)?;
            match (t.as_u8(), t.dims()) {
                (Some(bytes), &[gh, gw]) if gh == h && gw == w => {
                    if bytes.iter().any(|&b| b > 1) {
                        return Err(bad("gt_mask_path", "mask must be binary (0/1)".into()));
                    }
                    Some(Mask::new(h, w, bytes.iter().map(|&b| b == 1).collect())?)
                }
                _ => {
                    return Err(bad(
                        "gt_mask_path",
                        format!("expected uint8 {h}x{w}, got {:?} {:?}", t.dtype(), t.dims()),
                    ))
                }
            }
        }
        None => None,
    };

    Ok(Sample {
        id: m.sample_id.clone(),
        image,
        levels,
        cluster_features,
        candidates,
        text,
        label: m.label,
        gt_mask,
    })
}

/// A reference bank manifest with all K samples loaded.
#[derive(Debug, Clone)]
pub struct LoadedBank {
    pub category: String,
    pub samples: Vec<Sample>,
    pub config_overrides: Option<serde_json::Value>,
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<LoadedBank> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: ReferenceBankManifest = serde_json::from_str(&text).map_err(|source| Error::ManifestParse {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let origin = path.display().to_string();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        samples.push(match entry {
            SampleEntry::Path(p) => load_sample(base.join(p))?,
            SampleEntry::Inline(m) => load_sample_manifest(m, base, &origin)?,
        });
    }
    check_bank_schema(&samples, &origin)?;
    Ok(LoadedBank {
        category: manifest.category,
        samples,
        config_overrides: manifest.config_overrides,
    })
}

/// K ≥ 1 and every sample shares image dims and the feature-level schema.
pub fn check_bank_schema(samples: &[Sample], origin: &str) -> Result<()> {
    let bad = |field: &str, message: String| Error::Manifest {
        manifest: origin.to_string(),
        field: field.to_string(),
        message,
    };
    let Some(first) = samples.first() else {
        return Err(bad("samples", "reference bank needs at least one sample".into()));
    };
    let schema = |s: &Sample| -> Vec<(String, usize, usize, usize)> {
        s.levels
            .iter()
            .map(|l| {
                (
                    l.tag.clone(),
                    l.features.height(),
                    l.features.width(),
                    l.features.channels(),
                )
            })
            .collect()
    };
    let want = schema(first);
    let want_cluster = (
        first.cluster_features.height(),
        first.cluster_features.width(),
        first.cluster_features.channels(),
    );
    for (i, s) in samples.iter().enumerate().skip(1) {
        if (s.height(), s.width()) != (first.height(), first.width()) {
            return Err(bad(
                &format!("samples[{i}]"),
                format!(
                    "image {}x{} differs from {}x{}",
                    s.height(),
                    s.width(),
                    first.height(),
                    first.width()
                ),
            ));
        }
        if schema(s) != want {
            return Err(bad(
                &format!("samples[{i}]"),
                "feature-level schema differs from samples[0]".into(),
            ));
        }
        let c = &s.cluster_features;
        if (c.height(), c.width(), c.channels()) != want_cluster {
            return Err(bad(
                &format!("samples[{i}]"),
                "cluster feature dims differ from samples[0]".into(),
            ));
        }
    }
    Ok(())
}
