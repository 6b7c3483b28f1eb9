//! Graph-enhanced component modeling: component-level deep and geometric
//! anomaly scores.
//!
//! Each component is a graph node carrying its pooled deep feature. A
//! training-free attention pass mixes node features with row-normalized
//! weights, and each query component is scored by its distance to the nearest
//! normal component embedding. Geometry (area, mean colour, centroid) is
//! scored the same way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Mask, Matrix, RgbImage, ScoreMap};
use crate::numerics::{cosine_similarity, group_average_pool, DistanceMetric, NeighborIndex};
use crate::segmenter::ComponentMaskSet;
use crate::structural::patch_center;

/// Length of a geometric feature vector: area, mean R, G, B, centroid x, centroid y.
pub const GEOMETRIC_DIM: usize = 6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Scaled dot-product weights `QKᵀ/√C` with `Q = K = V` = node features.
    #[default]
    Attention,
    /// Row-normalized cosine-similarity adjacency.
    Adjacency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogicalConfig {
    /// Weight of the deep score.
    pub phi: f64,
    /// Weight of the geometric score.
    pub psi: f64,
    pub aggregation_mode: AggregationMode,
    pub metric: DistanceMetric,
}

impl Default for LogicalConfig {
    fn default() -> Self {
        Self {
            phi: 0.5,
            psi: 0.5,
            aggregation_mode: AggregationMode::Attention,
            metric: DistanceMetric::Cosine,
        }
    }
}

impl LogicalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("phi", self.phi), ("psi", self.psi)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "logical.{name} must be a finite non-negative number, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Square, row-stochastic, non-negative weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    weights: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    /// Clamps negatives to zero and divides each row by its sum; a row that
    /// sums to zero becomes uniform.
    pub fn normalize_rows(n: usize, mut raw: Vec<f64>) -> Self {
        assert_eq!(raw.len(), n * n);
        for row in raw.chunks_mut(n.max(1)) {
            for v in row.iter_mut() {
                *v = if *v > 0.0 { *v } else { 0.0 };
            }
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / n as f64);
            }
        }
        Self { n, weights: raw }
    }
}

/// Cosine-similarity adjacency, row-normalized.
pub fn adjacency(deep: &Matrix) -> Result<AdjacencyMatrix> {
    let n = deep.rows();
    if n == 0 {
        return Err(Error::EmptyReference);
    }
    if deep.iter_rows().any(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::ZeroNorm);
    }
    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            raw[i * n + j] = cosine_similarity(deep.row(i), deep.row(j));
        }
    }
    Ok(AdjacencyMatrix::normalize_rows(n, raw))
}

/// Scaled dot-product attention weights `norm(QKᵀ/√C)` with `Q = K = deep`.
pub fn attention_weights(deep: &Matrix) -> Result<AdjacencyMatrix> {
    let n = deep.rows();
    if n == 0 {
        return Err(Error::EmptyReference);
    }
    let scale = (deep.cols() as f64).sqrt();
    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = deep
                .row(i)
                .iter()
                .zip(deep.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            raw[i * n + j] = dot / scale;
        }
    }
    Ok(AdjacencyMatrix::normalize_rows(n, raw))
}

/// `E = weights · deep`.
pub fn aggregate(weights: &AdjacencyMatrix, deep: &Matrix) -> Result<Matrix> {
    if weights.len() != deep.rows() {
        return Err(Error::dims(format!(
            "{}x{} weights for {} nodes",
            weights.len(),
            weights.len(),
            deep.rows()
        )));
    }
    let c = deep.cols();
    let mut out = Matrix::zeros(deep.rows(), c);
    for i in 0..deep.rows() {
        let mut acc = vec![0.0f64; c];
        for (j, &w) in weights.row(i).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(deep.row(j)) {
                *a += w * v as f64;
            }
        }
        for (dst, a) in out.row_mut(i).iter_mut().zip(acc) {
            *dst = a as f32;
        }
    }
    Ok(out)
}

/// Graph-aggregated component embeddings for one image.
pub fn component_embeddings(deep: &Matrix, mode: AggregationMode) -> Result<Matrix> {
    let weights = match mode {
        AggregationMode::Attention => attention_weights(deep)?,
        AggregationMode::Adjacency => adjacency(deep)?,
    };
    aggregate(&weights, deep)
}

/// Component mask sampled at feature resolution (cell active iff its center pixel is).
/// An empty result falls back to the cell under the mask's centroid.
pub fn mask_to_feature_grid(mask: &Mask, grid_h: usize, grid_w: usize) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let mut cells = Mask::from_fn(grid_h, grid_w, |i, j| {
        let (y, x) = patch_center(i, j, grid_h, grid_w, h, w);
        mask.get(y, x)
    });
    if !cells.any() {
        if let Some((cx, cy)) = mask.centroid() {
            let i = ((cy * grid_h as f64 / h as f64) as usize).min(grid_h - 1);
            let j = ((cx * grid_w as f64 / w as f64) as usize).min(grid_w - 1);
            cells.set(i, j, true);
        }
    }
    cells
}

/// Group-average-pooled deep feature of each component (`N × C`).
pub fn component_features(featmap: &FeatureMap, components: &ComponentMaskSet) -> Result<Matrix> {
    let rows = components
        .masks()
        .map(|m| group_average_pool(featmap, &mask_to_feature_grid(m, featmap.height(), featmap.width())))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(featmap.channels(), rows)
}

/// `[area, mean R, mean G, mean B, centroid x, centroid y]`, all in `[0, 1]`.
pub fn geometric_features(mask: &Mask, image: &RgbImage) -> Result<[f32; GEOMETRIC_DIM]> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::dims(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    let (h, w) = (mask.height(), mask.width());
    let mut rgb = [0.0f64; 3];
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let px = image.pixel(y, x);
                for (acc, &v) in rgb.iter_mut().zip(&px) {
                    *acc += v as f64;
                }
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok([
        (nf / (h * w) as f64) as f32,
        (rgb[0] / nf / 255.0) as f32,
        (rgb[1] / nf / 255.0) as f32,
        (rgb[2] / nf / 255.0) as f32,
        (sx / nf / w as f64) as f32,
        (sy / nf / h as f64) as f32,
    ])
}

/// Geometric vectors of all components (`N × 6`).
pub fn component_geometry(components: &ComponentMaskSet, image: &RgbImage) -> Result<Matrix> {
    let rows = components
        .masks()
        .map(|m| geometric_features(m, image))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(GEOMETRIC_DIM, rows)
}

/// Minimum distance of each query component embedding to the pooled normal embeddings.
pub fn score_deep(query_emb: &Matrix, normal_pool: &NeighborIndex) -> Result<Vec<f64>> {
    normal_pool.min_distances(query_emb)
}

/// Minimum distance of each query geometric vector to the pooled normal geometry.
pub fn score_geo(query_geo: &Matrix, normal_pool: &NeighborIndex) -> Result<Vec<f64>> {
    normal_pool.min_distances(query_geo)
}

/// Per-component scores and their rasterization.
#[derive(Debug, Clone, PartialEq)]
pub struct LogicalScoreMap {
    pub deep: Vec<f64>,
    pub geo: Vec<f64>,
    pub combined: Vec<f64>,
    pub map: ScoreMap,
}

/// Pixel value = score of the covering component; max over overlaps; 0 elsewhere.
pub fn rasterize(components: &ComponentMaskSet, scores: &[f64]) -> Result<ScoreMap> {
    if scores.len() != components.len() {
        return Err(Error::dims(format!(
            "{} scores for {} components",
            scores.len(),
            components.len()
        )));
    }
    let (h, w) = (components.height(), components.width());
    let mut data = vec![0.0f32; h * w];
    let mut covered = vec![false; h * w];
    for (mask, &s) in components.masks().zip(scores) {
        for (i, &on) in mask.as_slice().iter().enumerate() {
            if on {
                data[i] = if covered[i] { data[i].max(s as f32) } else { s as f32 };
                covered[i] = true;
            }
        }
    }
    ScoreMap::new(h, w, data)
}

/// `combined = φ·deep + ψ·geo`, rasterized over `components`.
pub fn score_logical(
    deep: Vec<f64>,
    geo: Vec<f64>,
    phi: f64,
    psi: f64,
    components: &ComponentMaskSet,
) -> Result<LogicalScoreMap> {
    if deep.len() != geo.len() {
        return Err(Error::dims(format!(
            "{} deep scores vs {} geometric scores",
            deep.len(),
            geo.len()
        )));
    }
    let combined: Vec<f64> = deep.iter().zip(&geo).map(|(d, g)| phi * d + psi * g).collect();
    let map = rasterize(components, &combined)?;
    Ok(LogicalScoreMap {
        deep,
        geo,
        combined,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{Component, ComponentKey, SegmentBranch};

    fn two_halves(h: usize, w: usize) -> ComponentMaskSet {
        ComponentMaskSet::new(
            h,
            w,
            vec![
                Component {
                    key: ComponentKey::Cluster(0),
                    mask: Mask::from_fn(h, w, |_, x| x < w / 2),
                },
                Component {
                    key: ComponentKey::Cluster(1),
                    mask: Mask::from_fn(h, w, |_, x| x >= w / 2),
                },
            ],
            SegmentBranch::Fused,
        )
        .unwrap()
    }

    #[test]
    fn adjacency_examples() {
        let same = Matrix::from_rows(2, [[1.0, 2.0], [1.0, 2.0]]).unwrap();
        let a = adjacency(&same).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.get(i, j) - 0.5).abs() < 1e-12);
            }
        }
        let one = Matrix::from_rows(3, [[0.2, -1.0, 4.0]]).unwrap();
        assert_eq!(adjacency(&one).unwrap().get(0, 0), 1.0);
        assert!(matches!(
            adjacency(&Matrix::from_rows(2, [[0.0, 0.0], [1.0, 0.0]]).unwrap()),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn negative_rows_become_uniform_or_clamped() {
        // node 1 is anti-parallel to node 0: only self-similarity survives the clamp
        let m = Matrix::from_rows(2, [[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let a = adjacency(&m).unwrap();
        assert_eq!(a.row(0), &[1.0, 0.0]);
        assert_eq!(a.row(1), &[0.0, 1.0]);
        let all_neg = AdjacencyMatrix::normalize_rows(2, vec![-1.0, -2.0, 0.0, 0.0]);
        assert_eq!(all_neg.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn aggregate_examples() {
        let v = [0.3f32, -0.7, 2.0];
        let same = Matrix::from_rows(3, [v, v, v]).unwrap();
        let e = component_embeddings(&same, AggregationMode::Attention).unwrap();
        for r in e.iter_rows() {
            for (a, b) in r.iter().zip(&v) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let one = Matrix::from_rows(3, [v]).unwrap();
        assert_eq!(component_embeddings(&one, AggregationMode::Attention).unwrap(), one);
        assert_eq!(component_embeddings(&one, AggregationMode::Adjacency).unwrap(), one);
    }

    #[test]
    fn component_features_examples() {
        let fm = FeatureMap::filled(4, 4, &[2.0, 3.0]).unwrap();
        let comps = two_halves(16, 16);
        let f = component_features(&fm, &comps).unwrap();
        assert!(f.iter_rows().all(|r| r == [2.0, 3.0]));

        let mut data = Vec::new();
        for _y in 0..4 {
            for x in 0..4 {
                data.extend_from_slice(if x < 2 { &[1.0, 0.0] } else { &[0.0, 5.0] });
            }
        }
        let fm = FeatureMap::new(4, 4, 2, data).unwrap();
        let f = component_features(&fm, &comps).unwrap();
        assert_eq!(f.row(0), &[1.0, 0.0]);
        assert_eq!(f.row(1), &[0.0, 5.0]);
    }

    #[test]
    fn tiny_component_uses_centroid_cell() {
        let mask = Mask::from_fn(16, 16, |y, x| y == 13 && x == 1);
        let cells = mask_to_feature_grid(&mask, 4, 4);
        assert_eq!(cells.count(), 1);
        assert!(cells.get(3, 0));
    }

    #[test]
    fn geometric_examples() {
        let img = RgbImage::filled(10, 20, [128, 128, 128]);
        let g = geometric_features(&Mask::full(10, 20), &img).unwrap();
        let gray = 128.0f32 / 255.0;
        assert_eq!(g[0], 1.0);
        for v in &g[1..4] {
            assert!((v - gray).abs() < 1e-6);
        }
        assert!((g[4] - 0.5).abs() < 1e-6 && (g[5] - 0.5).abs() < 1e-6);

        let mut img = RgbImage::filled(10, 20, [0, 0, 0]);
        img.set_pixel(0, 0, [255, 255, 255]);
        let g = geometric_features(&Mask::from_fn(10, 20, |y, x| y == 0 && x == 0), &img).unwrap();
        assert!((g[0] - 1.0 / 200.0).abs() < 1e-9);
        assert_eq!(&g[1..4], &[1.0, 1.0, 1.0]);
        assert!((g[4] - 0.5 / 20.0).abs() < 1e-7 && (g[5] - 0.5 / 10.0).abs() < 1e-7);
        assert!(matches!(
            geometric_features(&Mask::empty(10, 20), &img),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn geo_score_detects_doubled_area() {
        let img = RgbImage::filled(8, 8, [200, 10, 10]);
        let small = Mask::from_fn(8, 8, |y, x| (2..4).contains(&y) && (2..6).contains(&x));
        let big = Mask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let n = Matrix::from_rows(GEOMETRIC_DIM, [geometric_features(&small, &img).unwrap()]).unwrap();
        let q = Matrix::from_rows(GEOMETRIC_DIM, [geometric_features(&big, &img).unwrap()]).unwrap();
        let idx = NeighborIndex::new(&n, DistanceMetric::Cosine).unwrap();
        assert_eq!(score_geo(&n, &idx).unwrap(), vec![0.0]);
        assert!(score_geo(&q, &idx).unwrap()[0] > 0.0);
    }

    #[test]
    fn deep_score_examples() {
        let normal = Matrix::from_rows(2, [[1.0, 0.0]]).unwrap();
        let idx = NeighborIndex::new(&normal, DistanceMetric::Cosine).unwrap();
        assert_eq!(score_deep(&normal, &idx).unwrap(), vec![0.0]);
        let orth = Matrix::from_rows(2, [[0.0, 3.0]]).unwrap();
        assert!((score_deep(&orth, &idx).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logical_combination_and_raster() {
        let comps = two_halves(2, 4);
        let l = score_logical(vec![0.4, 0.0], vec![0.2, 0.0], 0.5, 0.5, &comps).unwrap();
        assert!((l.combined[0] - 0.3).abs() < 1e-12);
        let l = score_logical(vec![0.4, 0.8], vec![0.2, 0.6], 0.5, 0.0, &comps).unwrap();
        assert_eq!(l.combined, vec![0.2, 0.4]);
        assert!(score_logical(vec![0.1], vec![0.1, 0.2], 0.5, 0.5, &comps).is_err());

        let overlapping = ComponentMaskSet::new(
            2,
            4,
            vec![
                Component {
                    key: ComponentKey::Cluster(0),
                    mask: Mask::from_fn(2, 4, |_, x| x < 3),
                },
                Component {
                    key: ComponentKey::Cluster(1),
                    mask: Mask::from_fn(2, 4, |y, x| x >= 2 && y == 0),
                },
            ],
            SegmentBranch::Fused,
        )
        .unwrap();
        let map = rasterize(&overlapping, &[0.2, 0.7]).unwrap();
        assert_eq!(map.as_slice(), &[0.2, 0.2, 0.7, 0.7, 0.2, 0.2, 0.2, 0.0]);
    }
}
