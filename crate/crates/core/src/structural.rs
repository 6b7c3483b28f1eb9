//! Component-aware patch matching: per-patch structural anomaly scores from
//! global nearest-neighbour matching, matching restricted to the patch's own
//! component, and image-text similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Matrix, ScoreMap};
use crate::numerics::{bilinear_resize_channels, cosine_similarity, softmax_pair, DistanceMetric, NeighborIndex};
use crate::segmenter::{ComponentKey, ComponentMaskSet};

const UNIT_TOLERANCE: f64 = 1e-4;

/// Normal / anomalous text embeddings, both unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeaturePair {
    normal: Vec<f32>,
    anomalous: Vec<f32>,
}

impl TextFeaturePair {
    pub fn new(normal: Vec<f32>, anomalous: Vec<f32>) -> Result<Self> {
        if normal.len() != anomalous.len() || normal.is_empty() {
            return Err(Error::dims(format!(
                "text embeddings of length {} and {}",
                normal.len(),
                anomalous.len()
            )));
        }
        for (name, v) in [("normal", &normal), ("anomalous", &anomalous)] {
            let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidTensor(format!(
                    "{name} text embedding has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { normal, anomalous })
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn normal(&self) -> &[f32] {
        &self.normal
    }

    pub fn anomalous(&self) -> &[f32] {
        &self.anomalous
    }

    pub fn swapped(&self) -> Self {
        Self {
            normal: self.anomalous.clone(),
            anomalous: self.normal.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyComponentFallback {
    /// Match against every normal patch.
    #[default]
    Global,
    /// Use the largest component-restricted score of the image.
    MaxPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub weight_pm: f64,
    pub weight_aware: f64,
    pub weight_vl: f64,
    pub metric: DistanceMetric,
    pub temperature: f64,
    pub empty_component_fallback: EmptyComponentFallback,
    /// Patch grid is `image / patch_size` per side.
    pub patch_size: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            weight_pm: 1.0 / 3.0,
            weight_aware: 1.0 / 3.0,
            weight_vl: 1.0 / 3.0,
            metric: DistanceMetric::Cosine,
            temperature: 1.0,
            empty_component_fallback: EmptyComponentFallback::Global,
            patch_size: 14,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("weight_pm", self.weight_pm),
            ("weight_aware", self.weight_aware),
            ("weight_vl", self.weight_vl),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "scorer.{name} must be a finite non-negative number, got {w}"
                )));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "scorer.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("scorer.patch_size must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid dims for an image of the given size (at least 1×1).
    pub fn patch_grid_dims(&self, height: usize, width: usize) -> (usize, usize) {
        ((height / self.patch_size).max(1), (width / self.patch_size).max(1))
    }
}

/// Interpolated patch-level features of one encoder level.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub features: FeatureMap,
    pub level_tag: String,
}

impl PatchGrid {
    pub fn height(&self) -> usize {
        self.features.height()
    }

    pub fn width(&self) -> usize {
        self.features.width()
    }
}

/// Channelwise corner-aligned bilinear resampling of a feature map.
pub fn to_patch_grid(featmap: &FeatureMap, out_h: usize, out_w: usize, level_tag: &str) -> PatchGrid {
    let data = bilinear_resize_channels(
        featmap.as_slice(),
        featmap.height(),
        featmap.width(),
        featmap.channels(),
        out_h,
        out_w,
    );
    PatchGrid {
        features: FeatureMap::new(out_h, out_w, featmap.channels(), data).expect("resize output sized correctly"),
        level_tag: level_tag.to_string(),
    }
}

/// Patch indices (row-major) owned by each component, plus the leftovers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPartition {
    pub subsets: Vec<Vec<usize>>,
    pub residual: Vec<usize>,
}

impl PatchPartition {
    /// Component id owning each patch, `None` for residual patches.
    pub fn owner(&self, n_patches: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_patches];
        for (c, subset) in self.subsets.iter().enumerate() {
            for &p in subset {
                out[p] = Some(c);
            }
        }
        out
    }
}

/// Image pixel sampled for patch `(i, j)` of a `grid_h × grid_w` grid.
pub fn patch_center(i: usize, j: usize, grid_h: usize, grid_w: usize, height: usize, width: usize) -> (usize, usize) {
    let y = ((i as f64 + 0.5) * height as f64 / grid_h as f64) as usize;
    let x = ((j as f64 + 0.5) * width as f64 / grid_w as f64) as usize;
    (y.min(height - 1), x.min(width - 1))
}

/// A patch belongs to the lowest-id component whose mask covers its center pixel.
pub fn partition_patches(grid_h: usize, grid_w: usize, components: &ComponentMaskSet) -> PatchPartition {
    let mut subsets = vec![Vec::new(); components.len()];
    let mut residual = Vec::new();
    for i in 0..grid_h {
        for j in 0..grid_w {
            let (y, x) = patch_center(i, j, grid_h, grid_w, components.height(), components.width());
            let idx = i * grid_w + j;
            match components.masks().position(|m| m.get(y, x)) {
                Some(c) => subsets[c].push(idx),
                None => residual.push(idx),
            }
        }
    }
    PatchPartition { subsets, residual }
}

/// Every normal patch of one level across the K references, indexed by component key.
#[derive(Debug, Clone)]
pub struct NormalPatchPool {
    index: NeighborIndex,
    by_key: BTreeMap<ComponentKey, Vec<usize>>,
}

impl NormalPatchPool {
    /// `grids[k]` is reference k's patch grid; `parts[k]` its partition and component keys.
    pub fn new(
        grids: &[PatchGrid],
        parts: &[(PatchPartition, Vec<ComponentKey>)],
        metric: DistanceMetric,
    ) -> Result<Self> {
        if grids.len() != parts.len() {
            return Err(Error::dims(format!(
                "{} grids but {} partitions",
                grids.len(),
                parts.len()
            )));
        }
        let first = grids.first().ok_or(Error::EmptyReference)?;
        let mut rows = Matrix::zeros(0, first.features.channels());
        let mut by_key: BTreeMap<ComponentKey, Vec<usize>> = BTreeMap::new();
        for (grid, (part, keys)) in grids.iter().zip(parts) {
            let offset = rows.rows();
            rows.extend_rows(&grid.features.to_matrix())?;
            for (subset, key) in part.subsets.iter().zip(keys) {
                by_key
                    .entry(*key)
                    .or_default()
                    .extend(subset.iter().map(|&p| p + offset));
            }
        }
        Ok(Self {
            index: NeighborIndex::new(&rows, metric)?,
            by_key,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    pub fn component_rows(&self, key: ComponentKey) -> &[usize] {
        self.by_key.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn to_map(h: usize, w: usize, v: Vec<f64>) -> ScoreMap {
    ScoreMap::new(h, w, v.into_iter().map(|x| x as f32).collect()).expect("one score per patch")
}

/// Minimum distance of each query patch to all normal patches.
pub fn score_pm(query: &PatchGrid, pool: &NormalPatchPool) -> Result<ScoreMap> {
    let scores = pool.index.min_distances(&query.features.to_matrix())?;
    Ok(to_map(query.height(), query.width(), scores))
}

/// Minimum distance of each query patch to the normal patches of its own component.
///
/// Residual patches and patches whose component has no normal counterpart follow `fallback`.
pub fn score_aware(
    query: &PatchGrid,
    query_parts: &PatchPartition,
    query_keys: &[ComponentKey],
    pool: &NormalPatchPool,
    fallback: EmptyComponentFallback,
) -> Result<ScoreMap> {
    if query_keys.len() != query_parts.subsets.len() {
        return Err(Error::dims(format!(
            "{} component keys for {} patch subsets",
            query_keys.len(),
            query_parts.subsets.len()
        )));
    }
    let n = query.height() * query.width();
    let mut scores: Vec<Option<f64>> = vec![None; n];
    for (subset, key) in query_parts.subsets.iter().zip(query_keys) {
        let rows = pool.component_rows(*key);
        for &p in subset {
            scores[p] = pool.index.min_distance_among(query.features.cell_at(p), rows)?;
        }
    }
    let restricted_max = scores.iter().flatten().copied().reduce(f64::max);
    let mut out = Vec::with_capacity(n);
    for (p, s) in scores.into_iter().enumerate() {
        out.push(match (s, fallback, restricted_max) {
            (Some(v), _, _) => v,
            (None, EmptyComponentFallback::MaxPenalty, Some(m)) => m,
            // nothing restricted to compare against: match globally
            (None, _, _) => pool.index.min_distance(query.features.cell_at(p))?,
        });
    }
    Ok(to_map(query.height(), query.width(), out))
}

/// Anomaly-class probability of each patch from its cosine similarity to the two text embeddings.
pub fn score_vl(query: &PatchGrid, text: &TextFeaturePair, temperature: f64) -> Result<ScoreMap> {
    if query.features.channels() != text.dim() {
        return Err(Error::dims(format!(
            "patch features have {} channels, text embeddings {}",
            query.features.channels(),
            text.dim()
        )));
    }
    let mut out = Vec::with_capacity(query.features.cells());
    for p in 0..query.features.cells() {
        let cell = query.features.cell_at(p);
        let s_n = cosine_similarity(cell, text.normal());
        let s_a = cosine_similarity(cell, text.anomalous());
        out.push(softmax_pair(s_n, s_a, temperature)?);
    }
    Ok(to_map(query.height(), query.width(), out))
}

/// The three constituent maps and their weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralScoreMap {
    pub pm: ScoreMap,
    pub aware: ScoreMap,
    pub vl: ScoreMap,
    pub total: ScoreMap,
}

pub fn score_structural(
    pm: ScoreMap,
    aware: ScoreMap,
    vl: ScoreMap,
    config: &ScorerConfig,
) -> Result<StructuralScoreMap> {
    let total = ScoreMap::weighted_sum(&[
        (config.weight_pm as f32, &pm),
        (config.weight_aware as f32, &aware),
        (config.weight_vl as f32, &vl),
    ])?;
    Ok(StructuralScoreMap { pm, aware, vl, total })
}
