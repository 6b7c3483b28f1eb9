//! Shared numeric kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Mask, Matrix, ScoreMap};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// `1 − a·b / (‖a‖‖b‖)`, in `[0, 2]`.
    #[default]
    Cosine,
    L1,
    L2,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Unit-normalizes `v`; `None` for a zero (or non-finite) norm.
fn unit(v: &[f32]) -> Option<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Cosine distance between unit vectors as `½‖â − b̂‖²`, which equals
/// `1 − â·b̂` for unit inputs and is exactly zero when `â == b̂`.
fn unit_cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    (0.5 * s).clamp(0.0, 2.0)
}

fn raw_distance(a: &[f32], b: &[f32], metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::L1 => a.iter().zip(b).map(|(&x, &y)| ((x as f64) - (y as f64)).abs()).sum(),
        DistanceMetric::L2 => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = (x as f64) - (y as f64);
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        DistanceMetric::Cosine => unit_cosine_distance(a, b),
    }
}

pub fn distance(a: &[f32], b: &[f32], metric: DistanceMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(format!("vector lengths {} and {}", a.len(), b.len())));
    }
    match metric {
        DistanceMetric::Cosine => {
            let ua = unit(a).ok_or(Error::ZeroNorm)?;
            let ub = unit(b).ok_or(Error::ZeroNorm)?;
            Ok(unit_cosine_distance(&ua, &ub))
        }
        _ => Ok(raw_distance(a, b, metric)),
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`; zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (na * nb)
}

/// Exact nearest-neighbour index over a fixed reference set. Rows are
/// pre-normalized once under the cosine metric.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    rows: Matrix,
    metric: DistanceMetric,
}

impl NeighborIndex {
    pub fn new(refs: &Matrix, metric: DistanceMetric) -> Result<Self> {
        if refs.rows() == 0 {
            return Err(Error::EmptyReference);
        }
        let rows = match metric {
            DistanceMetric::Cosine => {
                let mut out = Matrix::zeros(refs.rows(), refs.cols());
                for (i, r) in refs.iter_rows().enumerate() {
                    out.row_mut(i).copy_from_slice(&unit(r).ok_or(Error::ZeroNorm)?);
                }
                out
            }
            _ => refs.clone(),
        };
        Ok(Self { rows, metric })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn min_distance(&self, query: &[f32]) -> Result<f64> {
        if query.len() != self.dim() {
            return Err(Error::dims(format!(
                "query has {} channels, index has {}",
                query.len(),
                self.dim()
            )));
        }
        let q = match self.metric {
            DistanceMetric::Cosine => unit(query).ok_or(Error::ZeroNorm)?,
            _ => query.to_vec(),
        };
        Ok(self.min_prepared(&q))
    }

    /// Minimum over a subset of reference rows; `None` for an empty subset.
    pub fn min_distance_among(&self, query: &[f32], subset: &[usize]) -> Result<Option<f64>> {
        if subset.is_empty() {
            return Ok(None);
        }
        let q = match self.metric {
            DistanceMetric::Cosine => unit(query).ok_or(Error::ZeroNorm)?,
            _ => query.to_vec(),
        };
        Ok(subset
            .iter()
            .map(|&j| raw_distance(&q, self.rows.row(j), self.metric))
            .reduce(f64::min))
    }

    fn min_prepared(&self, q: &[f32]) -> f64 {
        self.rows
            .iter_rows()
            .map(|r| raw_distance(q, r, self.metric))
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum distance of every query row.
    pub fn min_distances(&self, queries: &Matrix) -> Result<Vec<f64>> {
        if queries.cols() != self.dim() {
            return Err(Error::dims(format!(
                "queries have {} channels, index has {}",
                queries.cols(),
                self.dim()
            )));
        }
        let one = |row: &[f32]| -> Result<f64> {
            let q = match self.metric {
                DistanceMetric::Cosine => unit(row).ok_or(Error::ZeroNorm)?,
                _ => row.to_vec(),
            };
            Ok(self.min_prepared(&q))
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..queries.rows())
                .into_par_iter()
                .map(|i| one(queries.row(i)))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            queries.iter_rows().map(one).collect()
        }
    }
}

/// `score[i] = min_j distance(queries[i], refs[j])`, exact.
pub fn min_distance_search(queries: &Matrix, refs: &Matrix, metric: DistanceMetric) -> Result<Vec<f64>> {
    if refs.cols() != queries.cols() {
        return Err(Error::dims(format!(
            "queries have {} channels, refs have {}",
            queries.cols(),
            refs.cols()
        )));
    }
    NeighborIndex::new(refs, metric)?.min_distances(queries)
}

/// Probability of the second logit under a two-way softmax at `temperature`.
pub fn softmax_pair(s_first: f64, s_second: f64, temperature: f64) -> Result<f64> {
    if !s_first.is_finite() || !s_second.is_finite() || !temperature.is_finite() {
        return Err(Error::NonFinite(format!(
            "softmax_pair({s_first}, {s_second}, {temperature})"
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (a, b) = (s_first / temperature, s_second / temperature);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    Ok(eb / (ea + eb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding, squared Euclidean distance.
///
/// Points are visited in a canonical (lexicographic) order so that the result
/// does not depend on input order; assignments are reported in input order.
/// Stops after `max_iter` iterations or once no centroid moves more than `tol`.
pub fn kmeans(points: &Matrix, n_clusters: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let p = points.rows();
    if n_clusters == 0 {
        return Err(Error::KMeans("n_clusters must be at least 1".into()));
    }
    if n_clusters > p {
        return Err(Error::KMeans(format!("n_clusters {n_clusters} exceeds {p} points")));
    }
    if points.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let sorted = Matrix::from_rows(points.cols(), order.iter().map(|&i| points.row(i)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Matrix::zeros(n_clusters, points.cols());
    let first = rng.random_range(0..p);
    centroids.row_mut(0).copy_from_slice(sorted.row(first));
    let mut chosen = vec![false; p];
    chosen[first] = true;
    let mut d2: Vec<f64> = sorted.iter_rows().map(|r| sq_dist(r, sorted.row(first))).collect();
    for k in 1..n_clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    target -= d;
                    pick = Some(i);
                    if target <= 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a centroid already
            chosen.iter().position(|&c| !c).expect("n_clusters <= points")
        };
        chosen[pick] = true;
        centroids.row_mut(k).copy_from_slice(sorted.row(pick));
        for (i, r) in sorted.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, sorted.row(pick)));
        }
    }

    let mut assignments = vec![0usize; p];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut objective = 0.0;
        for (i, r) in sorted.iter_rows().enumerate() {
            let (j, d) = nearest(r, &centroids);
            assignments[i] = j;
            objective += d;
        }
        history.push(objective);
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let c = points.cols();
        let mut sums = vec![0.0f64; n_clusters * c];
        let mut counts = vec![0usize; n_clusters];
        for (i, r) in sorted.iter_rows().enumerate() {
            let j = assignments[i];
            counts[j] += 1;
            for (s, &v) in sums[j * c..(j + 1) * c].iter_mut().zip(r) {
                *s += v as f64;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..n_clusters {
            // an empty cluster keeps its centroid
            if counts[j] == 0 {
                continue;
            }
            let row = centroids.row_mut(j);
            let mut moved = 0.0;
            for (dst, s) in row.iter_mut().zip(&sums[j * c..(j + 1) * c]) {
                let v = (s / counts[j] as f64) as f32;
                moved += (v as f64 - *dst as f64).powi(2);
                *dst = v;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < tol {
            let mut objective = 0.0;
            for (i, r) in sorted.iter_rows().enumerate() {
                let (j, d) = nearest(r, &centroids);
                assignments[i] = j;
                objective += d;
            }
            history.push(objective);
            break;
        }
    }

    let mut original = vec![0usize; p];
    for (sorted_pos, &orig) in order.iter().enumerate() {
        original[orig] = assignments[sorted_pos];
    }
    Ok(KMeansResult {
        centroids,
        assignments: original,
        objective_history: history,
        iterations,
    })
}

/// Corner-aligned bilinear resampling of a multi-channel map.
pub fn bilinear_resize_channels(
    data: &[f32],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    assert!(
        h >= 1 && w >= 1 && out_h >= 1 && out_w >= 1,
        "resize dims must be positive"
    );
    assert_eq!(data.len(), h * w * channels);
    if h == out_h && w == out_w {
        return data.to_vec();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut out = vec![0.0f32; out_h * out_w * channels];
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let base = (oy * out_w + ox) * channels;
            for c in 0..channels {
                let at = |y: usize, x: usize| data[(y * w + x) * channels + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[base + c] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    out
}

pub fn bilinear_resize(map: &ScoreMap, out_h: usize, out_w: usize) -> ScoreMap {
    let data = bilinear_resize_channels(map.as_slice(), map.height(), map.width(), 1, out_h, out_w);
    ScoreMap::new(out_h, out_w, data).expect("resize output sized correctly")
}

/// Mean feature vector over the active cells of `mask`.
pub fn group_average_pool(featmap: &FeatureMap, mask: &Mask) -> Result<Vec<f32>> {
    if mask.height() != featmap.height() || mask.width() != featmap.width() {
        return Err(Error::dims(format!(
            "mask {}x{} vs feature map {}x{}",
            mask.height(),
            mask.width(),
            featmap.height(),
            featmap.width()
        )));
    }
    let c = featmap.channels();
    let mut acc = vec![0.0f64; c];
    let mut n = 0usize;
    for (idx, &on) in mask.as_slice().iter().enumerate() {
        if on {
            n += 1;
            for (a, &v) in acc.iter_mut().zip(featmap.cell_at(idx)) {
                *a += v as f64;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(acc.into_iter().map(|s| (s / n as f64) as f32).collect())
}

/// Intersection over union; 0 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dims(format!(
            "masks {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Separable Gaussian blur with reflected borders, kernel truncated at 4σ.
/// `sigma <= 0` returns the map unchanged.
pub fn gaussian_blur(map: &ScoreMap, sigma: f64) -> ScoreMap {
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * n;
        let mut m = i.rem_euclid(period);
        if m >= n {
            m = period - 1 - m;
        }
        m as usize
    };
    let (h, w) = (map.height(), map.width());
    let src = map.as_slice();
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = reflect(x as isize + k as isize - radius, w);
                s += kv * src[y * w + xx] as f64;
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - radius, h);
                s += kv * tmp[yy * w + x];
            }
            out[y * w + x] = s as f32;
        }
    }
    ScoreMap::new(h, w, out).expect("same dims")
}
