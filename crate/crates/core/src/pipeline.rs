//! End-to-end detection: reference bank construction, per-level structural
//! scoring, component-level logical scoring, map fusion and image scoring.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Matrix, ScoreMap};
use crate::logical::{
    component_embeddings, component_features, component_geometry, score_deep, score_geo, score_logical, LogicalConfig,
    LogicalScoreMap,
};
use crate::numerics::{bilinear_resize, gaussian_blur, NeighborIndex};
use crate::segmenter::{
    fit_centroids, segment, CentroidSource, Centroids, ComponentKey, ComponentMaskSet, SegmenterConfig,
};
use crate::structural::{
    partition_patches, score_aware, score_pm, score_structural, score_vl, to_patch_grid, NormalPatchPool, ScorerConfig,
    StructuralScoreMap, TextFeaturePair,
};
use crate::tensor_store::{check_bank_schema, hex, read_tensor, write_json, write_tensor, Sample, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapNormalization {
    /// Rescale each map of each image to `[0, 1]`; constant maps become 0.
    MinMax,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageScoreMode {
    #[default]
    Max,
    Mean,
}

fn default_level_tags() -> Vec<String> {
    ["layer6", "layer12", "layer18", "layer24"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub segmenter: SegmenterConfig,
    pub scorer: ScorerConfig,
    pub logical: LogicalConfig,
    /// Weight of the structural map in the final map.
    pub delta: f64,
    /// Weight of the logical map in the final map.
    pub eta: f64,
    /// Encoder levels used for patch matching; their structural maps are averaged.
    pub level_tags: Vec<String>,
    pub map_normalization: MapNormalization,
    /// Gaussian smoothing of the upsampled maps in pixels; 0 disables.
    pub smoothing_sigma: f64,
    pub image_score_mode: ImageScoreMode,
    pub adapter_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            segmenter: SegmenterConfig::default(),
            scorer: ScorerConfig::default(),
            logical: LogicalConfig::default(),
            delta: 0.5,
            eta: 0.5,
            level_tags: default_level_tags(),
            map_normalization: MapNormalization::None,
            smoothing_sigma: 4.0,
            image_score_mode: ImageScoreMode::Max,
            adapter_path: None,
            seed: 0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        self.segmenter.validate()?;
        self.scorer.validate()?;
        self.logical.validate()?;
        for (name, w) in [("delta", self.delta), ("eta", self.eta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {w}"
                )));
            }
        }
        if self.level_tags.is_empty() {
            return Err(Error::Config("level_tags must not be empty".into()));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing_sigma must be >= 0, got {}",
                self.smoothing_sigma
            )));
        }
        Ok(())
    }

    /// SHA-256 of the fully materialized configuration as JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    /// Deep-merges a JSON object of overrides (e.g. per-category settings) into this config.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge_json(&mut base, overrides);
        let merged: Self =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("bad config override: {e}")))?;
        merged.validate()?;
        Ok(merged)
    }

    /// Settings that shape the reference bank; these must match between build and detect.
    fn bank_shape(&self) -> serde_json::Value {
        serde_json::json!({
            "segmenter": self.segmenter,
            "metric": self.scorer.metric,
            "patch_size": self.scorer.patch_size,
            "logical_metric": self.logical.metric,
            "aggregation_mode": self.logical.aggregation_mode,
            "level_tags": self.level_tags,
            "adapter_path": self.adapter_path,
            "seed": self.seed,
        })
    }
}

fn merge_json(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Bottleneck adapter `y = SiLU(ReLU(x·W1 + b1)·W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    w1: Matrix,
    b1: Vec<f32>,
    w2: Matrix,
    b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterIndex {
    w1: PathBuf,
    b1: PathBuf,
    w2: PathBuf,
    b2: PathBuf,
}

const ADAPTER_INDEX: &str = "index.json";

impl AdapterWeights {
    /// `w1`: `C × C_h`, `b1`: `C_h`, `w2`: `C_h × C`, `b2`: `C`.
    pub fn new(w1: Matrix, b1: Vec<f32>, w2: Matrix, b2: Vec<f32>) -> Result<Self> {
        let (c, ch) = (w1.rows(), w1.cols());
        if b1.len() != ch || w2.rows() != ch || w2.cols() != c || b2.len() != c {
            return Err(Error::dims(format!(
                "adapter shapes w1 {c}x{ch}, b1 {}, w2 {}x{}, b2 {} do not chain",
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn channels(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.channels() {
            return Err(Error::dims(format!(
                "adapter expects {} channels, got {}",
                self.channels(),
                x.len()
            )));
        }
        let mut h = vec![0.0f64; self.hidden()];
        for (i, &xi) in x.iter().enumerate() {
            for (hj, &w) in h.iter_mut().zip(self.w1.row(i)) {
                *hj += xi as f64 * w as f64;
            }
        }
        for (hj, &b) in h.iter_mut().zip(&self.b1) {
            *hj = (*hj + b as f64).max(0.0);
        }
        let mut y = vec![0.0f64; self.channels()];
        for (j, &hj) in h.iter().enumerate() {
            if hj == 0.0 {
                continue;
            }
            for (yk, &w) in y.iter_mut().zip(self.w2.row(j)) {
                *yk += hj * w as f64;
            }
        }
        Ok(y.iter()
            .zip(&self.b2)
            .map(|(&z, &b)| {
                let z = z + b as f64;
                (z / (1.0 + (-z).exp())) as f32
            })
            .collect())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index = AdapterIndex {
            w1: "w1.tnsr".into(),
            b1: "b1.tnsr".into(),
            w2: "w2.tnsr".into(),
            b2: "b2.tnsr".into(),
        };
        write_tensor(
            &Tensor::f32(vec![self.w1.rows(), self.w1.cols()], self.w1.as_slice().to_vec())?,
            dir.join(&index.w1),
        )?;
        write_tensor(&Tensor::f32(vec![self.b1.len()], self.b1.clone())?, dir.join(&index.b1))?;
        write_tensor(
            &Tensor::f32(vec![self.w2.rows(), self.w2.cols()], self.w2.as_slice().to_vec())?,
            dir.join(&index.w2),
        )?;
        write_tensor(&Tensor::f32(vec![self.b2.len()], self.b2.clone())?, dir.join(&index.b2))?;
        write_json(&dir.join(ADAPTER_INDEX), &index)
    }

    /// Reads `index.json` in `dir` and the four tensors it names.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join(ADAPTER_INDEX);
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: AdapterIndex = serde_json::from_str(&text).map_err(|source| Error::ManifestParse {
            path: index_path.clone(),
            source,
        })?;
        let matrix = |p: &Path| -> Result<Matrix> {
            let t = read_tensor(dir.join(p))?;
            match (t.as_f32(), t.dims()) {
                (Some(d), &[r, c]) => Matrix::new(r, c, d.to_vec()),
                _ => Err(Error::InvalidTensor(format!(
                    "{}: expected a float32 matrix",
                    p.display()
                ))),
            }
        };
        let vector = |p: &Path| -> Result<Vec<f32>> {
            let t = read_tensor(dir.join(p))?;
            match (t.as_f32(), t.dims()) {
                (Some(d), &[_]) => Ok(d.to_vec()),
                _ => Err(Error::InvalidTensor(format!(
                    "{}: expected a float32 vector",
                    p.display()
                ))),
            }
        };
        Self::new(
            matrix(&index.w1)?,
            vector(&index.b1)?,
            matrix(&index.w2)?,
            vector(&index.b2)?,
        )
    }
}

/// Row-wise adapter forward pass.
pub fn apply_adapter(features: &Matrix, weights: &AdapterWeights) -> Result<Matrix> {
    let rows = features
        .iter_rows()
        .map(|r| weights.forward(r))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(features.cols(), rows)
}

fn adapt_map(map: &FeatureMap, weights: &AdapterWeights) -> Result<FeatureMap> {
    FeatureMap::from_matrix(map.height(), map.width(), apply_adapter(&map.to_matrix(), weights)?)
}

/// Applies the adapter to every patch-matching level; the clustering map is
/// adapted only when its width matches the adapter.
fn adapt_sample(sample: &Sample, weights: &AdapterWeights) -> Result<Sample> {
    let mut out = sample.clone();
    for level in &mut out.levels {
        level.features = adapt_map(&level.features, weights)?;
    }
    if out.cluster_features.channels() == weights.channels() {
        out.cluster_features = adapt_map(&out.cluster_features, weights)?;
    }
    Ok(out)
}

/// k-means centroids fitted on first use.
#[derive(Debug)]
struct LazyCentroids {
    features: Vec<FeatureMap>,
    config: SegmenterConfig,
    seed: u64,
    cell: OnceLock<std::result::Result<Centroids, String>>,
}

impl CentroidSource for LazyCentroids {
    fn centroids(&self) -> Result<&Centroids> {
        self.cell
            .get_or_init(|| {
                let refs: Vec<&FeatureMap> = self.features.iter().collect();
                fit_centroids(&refs, &self.config, self.seed).map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::Clustering(e.clone()))
    }
}

#[derive(Debug)]
struct LevelBank {
    tag: String,
    pool: NormalPatchPool,
}

/// Immutable collection of everything the normal references contribute.
#[derive(Debug)]
pub struct ReferenceBank {
    category: String,
    shape: serde_json::Value,
    sample_ids: Vec<String>,
    height: usize,
    width: usize,
    grid: (usize, usize),
    cluster_dims: (usize, usize, usize),
    adapter: Option<AdapterWeights>,
    centroids: LazyCentroids,
    components: Vec<ComponentMaskSet>,
    levels: Vec<LevelBank>,
    embeddings: NeighborIndex,
    geometry: NeighborIndex,
    fallback_text: Option<TextFeaturePair>,
}

impl ReferenceBank {
    /// Segments every reference and builds the per-level patch pools and the
    /// component embedding / geometry pools.
    pub fn build(category: &str, samples: &[Sample], config: &DetectionConfig) -> Result<Self> {
        config.validate()?;
        check_bank_schema(samples, category)?;
        let first = &samples[0];
        for tag in &config.level_tags {
            if first.level(tag).is_none() {
                return Err(Error::Config(format!(
                    "level tag '{tag}' not present in reference samples"
                )));
            }
        }
        let adapter = config.adapter_path.as_deref().map(AdapterWeights::load).transpose()?;
        let samples: Vec<Sample> = match &adapter {
            Some(w) => samples.iter().map(|s| adapt_sample(s, w)).collect::<Result<_>>()?,
            None => samples.to_vec(),
        };

        let centroids = LazyCentroids {
            features: samples.iter().map(|s| s.cluster_features.clone()).collect(),
            config: config.segmenter.clone(),
            seed: config.seed,
            cell: OnceLock::new(),
        };
        let components = samples
            .iter()
            .map(|s| segment(s, &centroids, &config.segmenter))
            .collect::<Result<Vec<_>>>()?;

        let (h, w) = (first.height(), first.width());
        let grid = config.scorer.patch_grid_dims(h, w);
        let mut levels = Vec::with_capacity(config.level_tags.len());
        for tag in &config.level_tags {
            let grids: Vec<_> = samples
                .iter()
                .map(|s| to_patch_grid(s.level(tag).expect("schema checked"), grid.0, grid.1, tag))
                .collect();
            let parts: Vec<_> = components
                .iter()
                .map(|c| (partition_patches(grid.0, grid.1, c), c.keys()))
                .collect();
            levels.push(LevelBank {
                tag: tag.clone(),
                pool: NormalPatchPool::new(&grids, &parts, config.scorer.metric)?,
            });
        }

        let c = first.cluster_features.channels();
        let mut emb = Matrix::zeros(0, c);
        let mut geo = Matrix::zeros(0, crate::logical::GEOMETRIC_DIM);
        for (s, comps) in samples.iter().zip(&components) {
            let deep = component_features(&s.cluster_features, comps)?;
            emb.extend_rows(&component_embeddings(&deep, config.logical.aggregation_mode)?)?;
            geo.extend_rows(&component_geometry(comps, &s.image)?)?;
        }

        Ok(Self {
            category: category.to_string(),
            shape: config.bank_shape(),
            sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
            height: h,
            width: w,
            grid,
            cluster_dims: (
                first.cluster_features.height(),
                first.cluster_features.width(),
                first.cluster_features.channels(),
            ),
            adapter,
            components,
            levels,
            embeddings: NeighborIndex::new(&emb, config.logical.metric)?,
            geometry: NeighborIndex::new(&geo, config.logical.metric)?,
            fallback_text: samples.iter().find_map(|s| s.text.clone()),
            centroids,
        })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Component masks of each reference, in sample order.
    pub fn reference_components(&self) -> &[ComponentMaskSet] {
        &self.components
    }

    /// Rows in the normal patch pool of `level_tag`.
    pub fn patch_pool_len(&self, level_tag: &str) -> Option<usize> {
        self.levels.iter().find(|l| l.tag == level_tag).map(|l| l.pool.len())
    }

    pub fn embedding_pool_len(&self) -> usize {
        self.embeddings.len()
    }

    /// Whether k-means centroids have been fitted (only happens when some image needs fusion).
    pub fn clustering_used(&self) -> bool {
        self.centroids.cell.get().is_some()
    }

    pub fn centroids(&self) -> Result<&Centroids> {
        self.centroids.centroids()
    }

    /// Segments a sample against the bank's shared centroids.
    pub fn segment(&self, sample: &Sample, config: &SegmenterConfig) -> Result<ComponentMaskSet> {
        segment(sample, &self.centroids, config)
    }

    fn check_query(&self, query: &Sample, config: &DetectionConfig) -> Result<()> {
        if config.bank_shape() != self.shape {
            return Err(Error::Config(
                "detection config differs from the one the reference bank was built with".into(),
            ));
        }
        if (query.height(), query.width()) != (self.height, self.width) {
            return Err(Error::dims(format!(
                "query {} is {}x{}, bank images are {}x{}",
                query.id,
                query.height(),
                query.width(),
                self.height,
                self.width
            )));
        }
        let cf = &query.cluster_features;
        if (cf.height(), cf.width(), cf.channels()) != self.cluster_dims {
            return Err(Error::dims(format!(
                "query {} cluster features differ from the bank's",
                query.id
            )));
        }
        for tag in &config.level_tags {
            if query.level(tag).is_none() {
                return Err(Error::Config(format!("query {} lacks level '{tag}'", query.id)));
            }
        }
        query.validate()
    }
}

/// Wall time spent per stage of one detection.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub segment: Duration,
    pub capm: Vec<(String, Duration)>,
    pub gecm: Duration,
    pub fusion: Duration,
}

#[cfg(not(target_arch = "wasm32"))]
struct Stopwatch(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Stopwatch {
    fn start() -> Self {
        Self(std::time::Instant::now())
    }

    fn lap(&mut self) -> Duration {
        let now = std::time::Instant::now();
        let d = now - self.0;
        self.0 = now;
        d
    }
}

// no monotonic clock on bare wasm
#[cfg(target_arch = "wasm32")]
struct Stopwatch;

#[cfg(target_arch = "wasm32")]
impl Stopwatch {
    fn start() -> Self {
        Self
    }

    fn lap(&mut self) -> Duration {
        Duration::ZERO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub key: ComponentKey,
    pub area: usize,
    pub deep: f64,
    pub geo: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub sample_id: String,
    /// Fused map at image resolution.
    pub final_map: ScoreMap,
    /// Structural map as fed into fusion (upsampled, smoothed, normalized).
    pub structural_map: ScoreMap,
    /// Logical map as fed into fusion.
    pub logical_map: ScoreMap,
    /// Per-level patch-grid maps before averaging.
    pub structural_levels: Vec<(String, StructuralScoreMap)>,
    /// Level-averaged patch-grid maps.
    pub structural_grid: StructuralScoreMap,
    pub logical: LogicalScoreMap,
    pub components: ComponentMaskSet,
    pub component_scores: Vec<ComponentScore>,
    pub image_score: f64,
    pub timings: StageTimings,
}

/// Max or mean over every pixel.
pub fn image_score(map: &ScoreMap, mode: ImageScoreMode) -> f64 {
    let v = map.as_slice();
    match mode {
        ImageScoreMode::Max => v.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max),
        ImageScoreMode::Mean => v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64,
    }
}

/// Per-map min-max rescale to `[0, 1]`; constant maps become all-zero.
pub fn normalize_map(map: &ScoreMap, mode: MapNormalization) -> ScoreMap {
    match mode {
        MapNormalization::None => map.clone(),
        MapNormalization::MinMax => {
            let (lo, hi) = (map.min(), map.max());
            let span = hi - lo;
            let data = if span > 0.0 {
                map.as_slice().iter().map(|&v| (v - lo) / span).collect()
            } else {
                vec![0.0; map.as_slice().len()]
            };
            ScoreMap::new(map.height(), map.width(), data).expect("same dims")
        }
    }
}

fn mean_maps(maps: &[&ScoreMap]) -> Result<ScoreMap> {
    let w = 1.0 / maps.len() as f32;
    let terms: Vec<(f32, &ScoreMap)> = maps.iter().map(|m| (w, *m)).collect();
    ScoreMap::weighted_sum(&terms)
}

/// Scores one query against the bank.
pub fn detect(query: &Sample, bank: &ReferenceBank, config: &DetectionConfig) -> Result<DetectionResult> {
    config.validate()?;
    bank.check_query(query, config)?;
    let adapted;
    let query = match &bank.adapter {
        Some(w) => {
            adapted = adapt_sample(query, w)?;
            &adapted
        }
        None => query,
    };
    let mut timings = StageTimings::default();
    let mut clock = Stopwatch::start();

    let components = segment(query, &bank.centroids, &config.segmenter)?;
    timings.segment = clock.lap();

    let (gh, gw) = bank.grid;
    let parts = partition_patches(gh, gw, &components);
    let keys = components.keys();
    let text = query.text.as_ref().or(bank.fallback_text.as_ref());
    let mut per_level = Vec::with_capacity(bank.levels.len());
    for level in &bank.levels {
        let grid = to_patch_grid(query.level(&level.tag).expect("checked"), gh, gw, &level.tag);
        let pm = score_pm(&grid, &level.pool)?;
        let aware = score_aware(
            &grid,
            &parts,
            &keys,
            &level.pool,
            config.scorer.empty_component_fallback,
        )?;
        let vl = match text {
            Some(t) => score_vl(&grid, t, config.scorer.temperature)?,
            None => ScoreMap::zeros(gh, gw),
        };
        per_level.push((level.tag.clone(), score_structural(pm, aware, vl, &config.scorer)?));
        timings.capm.push((level.tag.clone(), clock.lap()));
    }
    let pick = |f: fn(&StructuralScoreMap) -> &ScoreMap| -> Result<ScoreMap> {
        mean_maps(&per_level.iter().map(|(_, s)| f(s)).collect::<Vec<_>>())
    };
    let structural_grid = StructuralScoreMap {
        pm: pick(|s| &s.pm)?,
        aware: pick(|s| &s.aware)?,
        vl: pick(|s| &s.vl)?,
        total: pick(|s| &s.total)?,
    };

    let deep_features = component_features(&query.cluster_features, &components)?;
    let embeddings = component_embeddings(&deep_features, config.logical.aggregation_mode)?;
    let deep = score_deep(&embeddings, &bank.embeddings)?;
    let geo = score_geo(&component_geometry(&components, &query.image)?, &bank.geometry)?;
    let logical = score_logical(deep, geo, config.logical.phi, config.logical.psi, &components)?;
    timings.gecm = clock.lap();

    let (h, w) = (query.height(), query.width());
    let post = |m: &ScoreMap| normalize_map(&gaussian_blur(m, config.smoothing_sigma), config.map_normalization);
    let structural_map = post(&bilinear_resize(&structural_grid.total, h, w));
    let logical_map = post(&logical.map);
    let final_map = ScoreMap::weighted_sum(&[
        (config.delta as f32, &structural_map),
        (config.eta as f32, &logical_map),
    ])?;
    let score = image_score(&final_map, config.image_score_mode);
    timings.fusion = clock.lap();

    let component_scores = components
        .components()
        .iter()
        .enumerate()
        .map(|(i, c)| ComponentScore {
            key: c.key,
            area: c.mask.count(),
            deep: logical.deep[i],
            geo: logical.geo[i],
            combined: logical.combined[i],
        })
        .collect();

    Ok(DetectionResult {
        sample_id: query.id.clone(),
        final_map,
        structural_map,
        logical_map,
        structural_levels: per_level,
        structural_grid,
        logical,
        components,
        component_scores,
        image_score: score,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_weights() {
        let c = DetectionConfig::default();
        assert_eq!(c.scorer.weight_pm, 1.0 / 3.0);
        assert_eq!(c.scorer.weight_aware, 1.0 / 3.0);
        assert_eq!(c.scorer.weight_vl, 1.0 / 3.0);
        assert_eq!((c.logical.phi, c.logical.psi), (0.5, 0.5));
        assert_eq!((c.delta, c.eta), (0.5, 0.5));
        assert_eq!(c.level_tags.len(), 4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn overrides_merge_and_reject_unknown_keys() {
        let c = DetectionConfig::default();
        let o = serde_json::json!({"segmenter": {"n_clusters": 4}, "eta": 0.0});
        let m = c.with_overrides(&o).unwrap();
        assert_eq!(m.segmenter.n_clusters, 4);
        assert_eq!(m.segmenter.area_ratio_threshold, 0.9);
        assert_eq!(m.eta, 0.0);
        assert_ne!(m.fingerprint(), c.fingerprint());
        assert!(c.with_overrides(&serde_json::json!({"bogus": 1})).is_err());
        assert!(c.with_overrides(&serde_json::json!({"scorer": {"bogus": 1}})).is_err());
    }

    #[test]
    fn image_score_modes() {
        let m = ScoreMap::new(1, 3, vec![0.1, 0.8, 0.3]).unwrap();
        assert_eq!(image_score(&m, ImageScoreMode::Max), 0.800000011920929);
        let c = ScoreMap::constant(4, 4, 0.3);
        assert!((image_score(&c, ImageScoreMode::Mean) - 0.3).abs() < 1e-7);
    }

    #[test]
    fn minmax_normalization() {
        let m = ScoreMap::new(1, 3, vec![2.0, 4.0, 3.0]).unwrap();
        assert_eq!(normalize_map(&m, MapNormalization::MinMax).as_slice(), &[0.0, 1.0, 0.5]);
        let c = ScoreMap::constant(2, 2, 7.0);
        assert!(normalize_map(&c, MapNormalization::MinMax)
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(normalize_map(&m, MapNormalization::None), m);
    }

    #[test]
    fn adapter_zero_weights_give_zero() {
        let w = AdapterWeights::new(Matrix::zeros(3, 2), vec![0.0; 2], Matrix::zeros(2, 3), vec![0.0; 3]).unwrap();
        assert_eq!(w.forward(&[1.0, -5.0, 2.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert!(w.forward(&[1.0]).is_err());
        assert!(AdapterWeights::new(Matrix::zeros(3, 2), vec![0.0; 3], Matrix::zeros(2, 3), vec![0.0; 3]).is_err());
    }

    #[test]
    fn adapter_identity_is_silu_on_positive_inputs() {
        let eye = |n: usize| {
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                m.row_mut(i)[i] = 1.0;
            }
            m
        };
        let w = AdapterWeights::new(eye(3), vec![0.0; 3], eye(3), vec![0.0; 3]).unwrap();
        let x = [0.5f32, 1.0, 3.0];
        let y = w.forward(&x).unwrap();
        for (yi, &xi) in y.iter().zip(&x) {
            let silu = xi as f64 / (1.0 + (-(xi as f64)).exp());
            assert!((*yi as f64 - silu).abs() < 1e-6);
        }
    }

    #[test]
    fn adapter_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let w = AdapterWeights::new(
            Matrix::new(2, 1, vec![0.5, -1.0]).unwrap(),
            vec![0.25],
            Matrix::new(1, 2, vec![2.0, 3.0]).unwrap(),
            vec![0.0, -0.5],
        )
        .unwrap();
        w.write(dir.path()).unwrap();
        assert_eq!(AdapterWeights::load(dir.path()).unwrap(), w);
        assert!(AdapterWeights::load(dir.path().join("missing")).is_err());
    }
}
