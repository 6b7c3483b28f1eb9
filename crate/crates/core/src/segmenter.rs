//! Contextual component clustering: turns the candidate masks supplied by an
//! open-vocabulary segmenter into a consistent set of component masks.
//!
//! Candidates are grouped by the feature-space cluster they overlap most, and
//! each group's union becomes one component. Cluster centroids are fitted on
//! the normal references only and shared by every image of a category, so a
//! component's [`ComponentKey`] identifies the same part across images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Mask, Matrix};
use crate::numerics::{cosine_similarity, iou, kmeans};
use crate::tensor_store::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    /// Number of k-means clusters fitted on reference features.
    pub n_clusters: usize,
    /// A lone candidate covering more than this fraction of the image marks a texture.
    pub area_ratio_threshold: f64,
    /// Cluster masks active on at least this many of the 4 grid corners are background.
    pub background_corner_rule: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            n_clusters: 6,
            area_ratio_threshold: 0.9,
            background_corner_rule: 3,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-4,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::Config("segmenter.n_clusters must be positive".into()));
        }
        if !(self.area_ratio_threshold > 0.0 && self.area_ratio_threshold < 1.0) {
            return Err(Error::Config(format!(
                "segmenter.area_ratio_threshold must lie in (0, 1), got {}",
                self.area_ratio_threshold
            )));
        }
        if self.background_corner_rule > 4 {
            return Err(Error::Config(format!(
                "segmenter.background_corner_rule must be in 0..=4, got {}",
                self.background_corner_rule
            )));
        }
        Ok(())
    }
}

/// Identity of a component across images of one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKey {
    /// The single component produced without clustering.
    Whole,
    /// Component grouped under this cluster centroid.
    Cluster(usize),
}

/// Which decision path produced a [`ComponentMaskSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentBranch {
    /// One candidate covering most of the image: the whole frame is one component.
    Texture,
    /// One smaller candidate, used as is.
    SingleObject,
    /// No usable candidates: the whole frame is one component.
    NoCandidates,
    /// Two or more candidates fused through the cluster masks.
    Fused,
}

impl SegmentBranch {
    pub fn uses_clustering(self) -> bool {
        matches!(self, SegmentBranch::Fused)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub key: ComponentKey,
    pub mask: Mask,
}

/// Final component masks at image resolution; component id = index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMaskSet {
    height: usize,
    width: usize,
    components: Vec<Component>,
    branch: SegmentBranch,
}

impl ComponentMaskSet {
    pub fn new(height: usize, width: usize, components: Vec<Component>, branch: SegmentBranch) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyMask);
        }
        for c in &components {
            if c.mask.height() != height || c.mask.width() != width {
                return Err(Error::dims(format!(
                    "component mask {}x{} in a {height}x{width} set",
                    c.mask.height(),
                    c.mask.width()
                )));
            }
            if !c.mask.any() {
                return Err(Error::EmptyMask);
            }
        }
        Ok(Self {
            height,
            width,
            components,
            branch,
        })
    }

    pub fn whole(height: usize, width: usize, branch: SegmentBranch) -> Self {
        Self {
            height,
            width,
            components: vec![Component {
                key: ComponentKey::Whole,
                mask: Mask::full(height, width),
            }],
            branch,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn branch(&self) -> SegmentBranch {
        self.branch
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn masks(&self) -> impl Iterator<Item = &Mask> {
        self.components.iter().map(|c| &c.mask)
    }

    pub fn keys(&self) -> Vec<ComponentKey> {
        self.components.iter().map(|c| c.key).collect()
    }
}

/// Cluster centroids fitted on reference features.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids(pub Matrix);

impl Centroids {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Something that can hand out the category's centroids, possibly fitting them on demand.
pub trait CentroidSource {
    fn centroids(&self) -> Result<&Centroids>;
}

impl CentroidSource for Centroids {
    fn centroids(&self) -> Result<&Centroids> {
        Ok(self)
    }
}

/// Per-centroid masks; `keys[i]` is the centroid behind `masks[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMaskSet {
    pub masks: Vec<Mask>,
    pub keys: Vec<usize>,
}

impl ClusterMaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Fits `n_clusters` k-means centroids on every cell of the reference maps.
pub fn fit_centroids(reference_features: &[&FeatureMap], config: &SegmenterConfig, seed: u64) -> Result<Centroids> {
    let first = reference_features.first().ok_or(Error::EmptyReference)?;
    let mut points = Matrix::zeros(0, first.channels());
    for f in reference_features {
        points.extend_rows(&f.to_matrix())?;
    }
    let fit = kmeans(
        &points,
        config.n_clusters,
        seed,
        config.kmeans_max_iter,
        config.kmeans_tol,
    )?;
    Ok(Centroids(fit.centroids))
}

/// Assigns every cell to its most cosine-similar centroid (ties to the lowest id)
/// and returns one mask per centroid at feature resolution.
pub fn assign_cluster_masks(centroids: &Centroids, target: &FeatureMap) -> Result<ClusterMaskSet> {
    if centroids.0.cols() != target.channels() {
        return Err(Error::dims(format!(
            "centroids have {} channels, features have {}",
            centroids.0.cols(),
            target.channels()
        )));
    }
    let n = centroids.len();
    let (h, w) = (target.height(), target.width());
    let mut masks = vec![Mask::empty(h, w); n];
    for y in 0..h {
        for x in 0..w {
            let cell = target.cell(y, x);
            let mut best = (0, f64::NEG_INFINITY);
            for (j, c) in centroids.0.iter_rows().enumerate() {
                let s = cosine_similarity(cell, c);
                if s > best.1 {
                    best = (j, s);
                }
            }
            masks[best.0].set(y, x, true);
        }
    }
    Ok(ClusterMaskSet {
        masks,
        keys: (0..n).collect(),
    })
}

/// Fits centroids on the references, then assigns the target's cells.
pub fn build_cluster_masks(
    reference_features: &[&FeatureMap],
    target_features: &FeatureMap,
    config: &SegmenterConfig,
    seed: u64,
) -> Result<ClusterMaskSet> {
    let centroids = fit_centroids(reference_features, config, seed)?;
    assign_cluster_masks(&centroids, target_features)
}

fn corner_hits(m: &Mask) -> usize {
    let (h, w) = (m.height(), m.width());
    [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
        .iter()
        .filter(|&&(y, x)| m.get(y, x))
        .count()
}

/// Drops background cluster masks and resizes the survivors to `out_h × out_w`.
///
/// Empty masks are discarded first. A mask is background when it is active on
/// at least `corner_rule` of the four grid corners. If every mask is
/// background, the one with the fewest corner hits survives (largest area on ties).
pub fn filter_background(
    clusters: &ClusterMaskSet,
    corner_rule: usize,
    out_h: usize,
    out_w: usize,
) -> Result<ClusterMaskSet> {
    let live: Vec<usize> = (0..clusters.len()).filter(|&i| clusters.masks[i].any()).collect();
    if live.is_empty() {
        return Err(Error::Clustering("no non-empty cluster masks to filter".into()));
    }
    let mut kept: Vec<usize> = live
        .iter()
        .copied()
        .filter(|&i| corner_hits(&clusters.masks[i]) < corner_rule)
        .collect();
    if kept.is_empty() {
        let best = live
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let (ma, mb) = (&clusters.masks[a], &clusters.masks[b]);
                corner_hits(ma)
                    .cmp(&corner_hits(mb))
                    .then(mb.count().cmp(&ma.count()))
                    .then(a.cmp(&b))
            })
            .expect("live is non-empty");
        kept.push(best);
    }
    Ok(ClusterMaskSet {
        masks: kept
            .iter()
            .map(|&i| clusters.masks[i].resize_nearest(out_h, out_w))
            .collect(),
        keys: kept.iter().map(|&i| clusters.keys[i]).collect(),
    })
}

/// `label[i] = argmax_j IoU(candidate_i, valid_j)`, ties to the lowest j.
pub fn assign_labels(candidates: &[Mask], valid: &ClusterMaskSet) -> Result<Vec<usize>> {
    if valid.is_empty() {
        return Err(Error::Clustering("no valid cluster masks".into()));
    }
    candidates
        .iter()
        .map(|c| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, v) in valid.masks.iter().enumerate() {
                let s = iou(c, v)?;
                if s > best.1 {
                    best = (j, s);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Component j is the union of the candidates labelled j. Labels with no
/// (non-empty) candidates produce no component; the rest keep label order.
pub fn fuse_masks(candidates: &[Mask], labels: &[usize], keys: &[usize]) -> Result<ComponentMaskSet> {
    if candidates.len() != labels.len() {
        return Err(Error::dims(format!(
            "{} candidates but {} labels",
            candidates.len(),
            labels.len()
        )));
    }
    let first = candidates
        .first()
        .ok_or_else(|| Error::Clustering("no candidates to fuse".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut unions: Vec<Option<Mask>> = vec![None; keys.len()];
    for (c, &l) in candidates.iter().zip(labels) {
        if l >= keys.len() {
            return Err(Error::Clustering(format!(
                "label {l} out of range for {} valid masks",
                keys.len()
            )));
        }
        if !c.same_shape(first) {
            return Err(Error::dims("candidate masks differ in size"));
        }
        unions[l].get_or_insert_with(|| Mask::empty(h, w)).union_with(c);
    }
    let components = unions
        .into_iter()
        .zip(keys)
        .filter_map(|(m, &k)| {
            m.filter(Mask::any).map(|mask| Component {
                key: ComponentKey::Cluster(k),
                mask,
            })
        })
        .collect();
    ComponentMaskSet::new(h, w, components, SegmentBranch::Fused)
}

/// Runs the full decision tree on raw inputs.
pub fn segment_masks(
    candidates: &[Mask],
    cluster_features: &FeatureMap,
    height: usize,
    width: usize,
    centroids: &dyn CentroidSource,
    config: &SegmenterConfig,
) -> Result<ComponentMaskSet> {
    let usable: Vec<&Mask> = candidates.iter().filter(|m| m.any()).collect();
    for m in &usable {
        if m.height() != height || m.width() != width {
            return Err(Error::dims(format!(
                "candidate mask {}x{} for a {height}x{width} image",
                m.height(),
                m.width()
            )));
        }
    }
    match usable.as_slice() {
        [] => Ok(ComponentMaskSet::whole(height, width, SegmentBranch::NoCandidates)),
        [only] => {
            let ratio = only.count() as f64 / (height * width) as f64;
            if ratio > config.area_ratio_threshold {
                Ok(ComponentMaskSet::whole(height, width, SegmentBranch::Texture))
            } else {
                ComponentMaskSet::new(
                    height,
                    width,
                    vec![Component {
                        key: ComponentKey::Whole,
                        mask: (*only).clone(),
                    }],
                    SegmentBranch::SingleObject,
                )
            }
        }
        many => {
            let clusters = assign_cluster_masks(centroids.centroids()?, cluster_features)?;
            let valid = filter_background(&clusters, config.background_corner_rule, height, width)?;
            let owned: Vec<Mask> = many.iter().map(|m| (*m).clone()).collect();
            let labels = assign_labels(&owned, &valid)?;
            fuse_masks(&owned, &labels, &valid.keys)
        }
    }
}

pub fn segment(sample: &Sample, centroids: &dyn CentroidSource, config: &SegmenterConfig) -> Result<ComponentMaskSet> {
    segment_masks(
        &sample.candidates,
        &sample.cluster_features,
        sample.height(),
        sample.width(),
        centroids,
        config,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Unreachable;

    impl CentroidSource for Unreachable {
        fn centroids(&self) -> Result<&Centroids> {
            panic!("clustering must not run on this branch")
        }
    }

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
    }

    fn dummy_features() -> FeatureMap {
        FeatureMap::filled(2, 2, &[1.0]).unwrap()
    }

    #[test]
    fn texture_branch_returns_full_mask() {
        let cand = rect(448, 448, 0, 448, 0, 426); // 95% coverage
        let cfg = SegmenterConfig::default();
        let out = segment_masks(&[cand], &dummy_features(), 448, 448, &Unreachable, &cfg).unwrap();
        assert_eq!(out.branch(), SegmentBranch::Texture);
        assert_eq!(out.len(), 1);
        assert_eq!(out.components()[0].mask, Mask::full(448, 448));
    }

    #[test]
    fn single_object_branch_returns_candidate() {
        let cand = rect(100, 100, 10, 30, 0, 100); // 20% coverage
        let cfg = SegmenterConfig::default();
        let out = segment_masks(
            std::slice::from_ref(&cand),
            &dummy_features(),
            100,
            100,
            &Unreachable,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.branch(), SegmentBranch::SingleObject);
        assert_eq!(out.components()[0].mask, cand);
        assert_eq!(out.components()[0].key, ComponentKey::Whole);
    }

    #[test]
    fn zero_candidates_fall_back_to_full_frame() {
        let cfg = SegmenterConfig::default();
        let out = segment_masks(&[], &dummy_features(), 8, 6, &Unreachable, &cfg).unwrap();
        assert_eq!(out.branch(), SegmentBranch::NoCandidates);
        assert_eq!(out.components()[0].mask, Mask::full(8, 6));
        // an all-zero candidate counts as no candidate
        let out = segment_masks(&[Mask::empty(8, 6)], &dummy_features(), 8, 6, &Unreachable, &cfg).unwrap();
        assert_eq!(out.branch(), SegmentBranch::NoCandidates);
    }

    #[test]
    fn corner_rule() {
        let all = Mask::full(4, 4);
        let none = rect(4, 4, 1, 3, 1, 3);
        let set = ClusterMaskSet {
            masks: vec![all, none.clone()],
            keys: vec![0, 1],
        };
        let out = filter_background(&set, 3, 4, 4).unwrap();
        assert_eq!(out.keys, vec![1]);
        assert_eq!(out.masks, vec![none]);
    }

    #[test]
    fn all_background_keeps_fewest_corners_then_largest() {
        // corner hits: a = 4, b = 3 (area 3), c = 3 (area 7)
        let a = Mask::full(4, 4);
        let b = Mask::from_fn(4, 4, |y, x| matches!((y, x), (0, 0) | (0, 3) | (3, 0)));
        let c = Mask::from_fn(4, 4, |y, x| y == 0 || (x == 0 && y < 4));
        assert_eq!((corner_hits(&a), corner_hits(&b), corner_hits(&c)), (4, 3, 3));
        assert_eq!((b.count(), c.count()), (3, 7));
        let set = ClusterMaskSet {
            masks: vec![a, b, c.clone()],
            keys: vec![5, 6, 7],
        };
        let out = filter_background(&set, 3, 8, 8).unwrap();
        assert_eq!(out.keys, vec![7]);
        assert_eq!(out.masks[0], c.resize_nearest(8, 8));
    }

    #[test]
    fn filter_rejects_empty_input() {
        let set = ClusterMaskSet {
            masks: vec![Mask::empty(3, 3)],
            keys: vec![0],
        };
        assert!(filter_background(&set, 3, 3, 3).is_err());
    }

    #[test]
    fn labels_follow_iou() {
        let v0 = rect(6, 6, 0, 3, 0, 6);
        let v1 = rect(6, 6, 3, 6, 0, 3);
        let v2 = rect(6, 6, 3, 6, 3, 6);
        let valid = ClusterMaskSet {
            masks: vec![v0, v1, v2.clone()],
            keys: vec![0, 1, 2],
        };
        assert_eq!(assign_labels(&[v2], &valid).unwrap(), vec![2]);
        let disjoint = ClusterMaskSet {
            masks: vec![rect(6, 6, 0, 1, 0, 1), rect(6, 6, 0, 1, 5, 6)],
            keys: vec![3, 4],
        };
        assert_eq!(assign_labels(&[rect(6, 6, 3, 4, 3, 4)], &disjoint).unwrap(), vec![0]);
    }

    #[test]
    fn fusion_is_union() {
        let a = rect(5, 5, 0, 2, 0, 2);
        let b = rect(5, 5, 3, 5, 3, 5);
        let out = fuse_masks(&[a.clone(), b.clone()], &[0, 0], &[4]).unwrap();
        let mut u = a.clone();
        u.union_with(&b);
        assert_eq!(out.len(), 1);
        assert_eq!(out.components()[0].mask, u);
        assert_eq!(out.components()[0].key, ComponentKey::Cluster(4));

        let out = fuse_masks(&[a.clone(), b.clone()], &[1, 0], &[8, 9]).unwrap();
        assert_eq!(out.components()[0].mask, b);
        assert_eq!(out.components()[1].mask, a);
        assert_eq!(out.keys(), vec![ComponentKey::Cluster(8), ComponentKey::Cluster(9)]);
    }

    #[test]
    fn unused_labels_are_dropped() {
        let a = rect(4, 4, 0, 2, 0, 2);
        let out = fuse_masks(std::slice::from_ref(&a), &[2], &[0, 1, 2]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.components()[0].key, ComponentKey::Cluster(2));
    }

    #[test]
    fn two_region_clusters() {
        // left half value (1, 0), right half (0, 1)
        let mut data = Vec::new();
        for _y in 0..4 {
            for x in 0..6 {
                data.extend_from_slice(if x < 3 { &[1.0, 0.0] } else { &[0.0, 1.0] });
            }
        }
        let fm = FeatureMap::new(4, 6, 2, data).unwrap();
        let cfg = SegmenterConfig {
            n_clusters: 2,
            ..Default::default()
        };
        let out = build_cluster_masks(&[&fm], &fm, &cfg, 3).unwrap();
        let left = Mask::from_fn(4, 6, |_, x| x < 3);
        let right = Mask::from_fn(4, 6, |_, x| x >= 3);
        assert!(out.masks.contains(&left) && out.masks.contains(&right));
    }

    #[test]
    fn config_validation() {
        assert!(SegmenterConfig::default().validate().is_ok());
        let bad = SegmenterConfig {
            area_ratio_threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SegmenterConfig {
            background_corner_rule: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
