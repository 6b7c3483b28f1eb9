//! Synthetic categories with known anomalies, for tests, demos and benchmarks.
//!
//! Each image is a grid of `cell`-pixel squares. Every region type owns a
//! unit vector per feature space; cells carry their type's vector plus small
//! Gaussian noise. Text embeddings are orthogonal to every region type.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::grid::{FeatureMap, Mask, RgbImage};
use crate::pipeline::DetectionConfig;
use crate::structural::TextFeaturePair;
use crate::tensor_store::{write_json, write_sample, FeatureLevel, Label, ReferenceBankManifest, Sample, SampleEntry};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub grid: usize,
    pub cell: usize,
    pub channels: usize,
    pub cluster_channels: usize,
    pub level_tags: Vec<String>,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid: 16,
            cell: 8,
            channels: 32,
            cluster_channels: 16,
            level_tags: vec!["layer_a".into(), "layer_b".into()],
            noise: 0.01,
        }
    }
}

impl SynthSpec {
    pub fn image_size(&self) -> usize {
        self.grid * self.cell
    }

    /// Detection settings matched to this layout.
    pub fn config(&self, n_clusters: usize) -> DetectionConfig {
        let mut c = DetectionConfig {
            level_tags: self.level_tags.clone(),
            ..DetectionConfig::default()
        };
        c.scorer.patch_size = self.cell;
        c.segmenter.n_clusters = n_clusters;
        c
    }
}

/// Rectangle in cell units, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl CellRect {
    pub const fn new(r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        Self {
            rows: (r0, r1),
            cols: (c0, c1),
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.rows.0..self.rows.1).contains(&r) && (self.cols.0..self.cols.1).contains(&c)
    }

    pub fn pixel_mask(&self, spec: &SynthSpec) -> Mask {
        let s = spec.image_size();
        Mask::from_fn(s, s, |y, x| self.contains(y / spec.cell, x / spec.cell))
    }
}

#[derive(Debug, Clone)]
struct Bases {
    level_types: Vec<Vec<f32>>,
    cluster_types: Vec<Vec<f32>>,
    text: TextFeaturePair,
}

/// Gram-Schmidt over Gaussian draws; `n <= dim`.
fn orthonormal(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &out {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n2 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n2 > 1e-6 {
            out.push(v.into_iter().map(|x| x / n2).collect());
        }
    }
    out
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// `correlation` > 0 mixes a shared direction into the object types (index ≥ 1).
fn bases(rng: &mut ChaCha8Rng, spec: &SynthSpec, n_types: usize, correlation: f64) -> Bases {
    let mix = |basis: &[Vec<f64>]| -> Vec<Vec<f32>> {
        let shared = &basis[n_types];
        (0..n_types)
            .map(|t| {
                if t == 0 || correlation == 0.0 {
                    to_f32(&basis[t])
                } else {
                    let w = (1.0 - correlation * correlation).sqrt();
                    to_f32(
                        &basis[t]
                            .iter()
                            .zip(shared)
                            .map(|(u, s)| w * u + correlation * s)
                            .collect::<Vec<_>>(),
                    )
                }
            })
            .collect()
    };
    let lv = orthonormal(rng, n_types + 3, spec.channels);
    let cl = orthonormal(rng, n_types + 1, spec.cluster_channels);
    Bases {
        level_types: mix(&lv),
        cluster_types: mix(&cl),
        text: TextFeaturePair::new(to_f32(&lv[n_types + 1]), to_f32(&lv[n_types + 2])).expect("unit vectors"),
    }
}

struct Scene<'a> {
    spec: &'a SynthSpec,
    objects: &'a [CellRect],
    colors: &'a [[u8; 3]],
    present: Vec<bool>,
}

impl Scene<'_> {
    /// Region type of a cell: 0 background, `i + 1` for object `i`.
    fn cell_type(&self, r: usize, c: usize) -> usize {
        self.objects
            .iter()
            .enumerate()
            .find(|(i, o)| self.present[*i] && o.contains(r, c))
            .map_or(0, |(i, _)| i + 1)
    }
}

fn noisy_map(rng: &mut ChaCha8Rng, scene: &Scene, types: &[Vec<f32>], noise: f64) -> FeatureMap {
    let g = scene.spec.grid;
    let c = types[0].len();
    let normal = Normal::new(0.0, noise).expect("finite sigma");
    let mut data = Vec::with_capacity(g * g * c);
    for r in 0..g {
        for col in 0..g {
            let t = &types[scene.cell_type(r, col)];
            data.extend(t.iter().map(|&v| v + normal.sample(rng) as f32));
        }
    }
    FeatureMap::new(g, g, c, data).expect("consistent dims")
}

fn render(scene: &Scene) -> RgbImage {
    let s = scene.spec.image_size();
    let mut img = RgbImage::filled(s, s, scene.colors[0]);
    for y in 0..s {
        for x in 0..s {
            img.set_pixel(
                y,
                x,
                scene.colors[scene.cell_type(y / scene.spec.cell, x / scene.spec.cell)],
            );
        }
    }
    img
}

fn make_sample(rng: &mut ChaCha8Rng, id: String, scene: &Scene, b: &Bases, label: Option<Label>) -> Sample {
    let levels = scene
        .spec
        .level_tags
        .iter()
        .map(|tag| FeatureLevel {
            tag: tag.clone(),
            features: noisy_map(rng, scene, &b.level_types, scene.spec.noise),
        })
        .collect();
    let s = scene.spec.image_size();
    Sample {
        id,
        image: render(scene),
        levels,
        cluster_features: noisy_map(rng, scene, &b.cluster_types, scene.spec.noise),
        candidates: scene
            .objects
            .iter()
            .zip(&scene.present)
            .filter(|(_, &p)| p)
            .map(|(o, _)| o.pixel_mask(scene.spec))
            .collect(),
        text: Some(b.text.clone()),
        label,
        gt_mask: label.map(|_| Mask::empty(s, s)),
    }
}

/// Normal references plus labelled queries of one synthetic category.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub category: String,
    pub spec: SynthSpec,
    pub bank: Vec<Sample>,
    pub queries: Vec<Sample>,
    /// Cell index of each anomalous query's defect, when it is a single cell.
    pub injected: Vec<Option<(usize, usize)>>,
}

impl Fixture {
    pub fn labels(&self) -> Vec<bool> {
        self.queries
            .iter()
            .map(|q| q.label.is_some_and(Label::is_anomalous))
            .collect()
    }
}

const BACKGROUND: [u8; 3] = [40, 40, 40];

/// Pixels whose corner-aligned position on the `grid`-cell patch grid rounds to `(r, c)`.
pub fn cell_footprint(spec: &SynthSpec, r: usize, c: usize) -> Mask {
    let s = spec.image_size();
    let g = spec.grid;
    let to_cell = |p: usize| {
        if s == 1 {
            0
        } else {
            (p as f64 * (g - 1) as f64 / (s - 1) as f64).round() as usize
        }
    };
    Mask::from_fn(s, s, |y, x| to_cell(y) == r && to_cell(x) == c)
}

/// Two objects on a background; each anomalous query has one cell whose
/// encoder features are replaced by the anomalous text direction.
pub fn structural_suite(n_refs: usize, n_normal: usize, n_anomalous: usize, seed: u64) -> Fixture {
    let spec = SynthSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = [CellRect::new(3, 7, 2, 14), CellRect::new(9, 13, 2, 14)];
    let colors = [BACKGROUND, [200, 60, 60], [60, 60, 200]];
    let b = bases(&mut rng, &spec, 3, 0.0);
    let scene = Scene {
        spec: &spec,
        objects: &objects,
        colors: &colors,
        present: vec![true; 2],
    };
    let bank = (0..n_refs)
        .map(|k| make_sample(&mut rng, format!("ref_{k:03}"), &scene, &b, None))
        .collect();
    let mut queries = Vec::new();
    let mut injected = Vec::new();
    for q in 0..n_normal + n_anomalous {
        let anomalous = q >= n_normal;
        let label = if anomalous { Label::Anomalous } else { Label::Normal };
        let mut s = make_sample(&mut rng, format!("query_{q:03}"), &scene, &b, Some(label));
        if anomalous {
            let (r, c) = (rng.random_range(2..spec.grid - 2), rng.random_range(2..spec.grid - 2));
            for level in &mut s.levels {
                level.features.cell_mut(r, c).copy_from_slice(b.text.anomalous());
            }
            s.gt_mask = Some(cell_footprint(&spec, r, c));
            injected.push(Some((r, c)));
        } else {
            injected.push(None);
        }
        queries.push(s);
    }
    Fixture {
        category: "synthetic_structural".into(),
        spec,
        bank,
        queries,
        injected,
    }
}

/// Three correlated objects; each anomalous query is missing one of them
/// (its area shows background in every modality and its candidate is gone).
pub fn logical_suite(n_refs: usize, n_normal: usize, n_anomalous: usize, seed: u64) -> Fixture {
    let spec = SynthSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = [
        CellRect::new(2, 6, 2, 7),
        CellRect::new(2, 6, 9, 14),
        CellRect::new(9, 14, 4, 12),
    ];
    let colors = [BACKGROUND, [200, 60, 60], [60, 200, 60], [60, 60, 200]];
    let b = bases(&mut rng, &spec, 4, 0.6);
    let full = Scene {
        spec: &spec,
        objects: &objects,
        colors: &colors,
        present: vec![true; 3],
    };
    let bank = (0..n_refs)
        .map(|k| make_sample(&mut rng, format!("ref_{k:03}"), &full, &b, None))
        .collect();
    let s = spec.image_size();
    let mut queries = Vec::new();
    for q in 0..n_normal + n_anomalous {
        let sample = if q >= n_normal {
            let dropped = (q - n_normal) % objects.len();
            let mut present = vec![true; 3];
            present[dropped] = false;
            let scene = Scene {
                spec: &spec,
                objects: &objects,
                colors: &colors,
                present,
            };
            let mut smp = make_sample(&mut rng, format!("query_{q:03}"), &scene, &b, Some(Label::Anomalous));
            smp.gt_mask = Some(objects[dropped].pixel_mask(&spec));
            smp
        } else {
            make_sample(&mut rng, format!("query_{q:03}"), &full, &b, Some(Label::Normal))
        };
        debug_assert_eq!(sample.height(), s);
        queries.push(sample);
    }
    let injected = vec![None; queries.len()];
    Fixture {
        category: "synthetic_logical".into(),
        spec,
        bank,
        queries,
        injected,
    }
}

/// Paths produced by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct WrittenFixture {
    pub bank_manifest: PathBuf,
    pub query_manifests: Vec<PathBuf>,
}

/// Writes references under `dir/bank`, queries under `dir/queries`, and `dir/bank.json`.
pub fn write_fixture(fixture: &Fixture, dir: &Path) -> Result<WrittenFixture> {
    let bank_dir = dir.join("bank");
    let entries = fixture
        .bank
        .iter()
        .map(|s| {
            let p = write_sample(s, &bank_dir)?;
            Ok(SampleEntry::Path(
                Path::new("bank").join(p.file_name().expect("file name")),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = ReferenceBankManifest {
        category: fixture.category.clone(),
        samples: entries,
        config_overrides: None,
    };
    let bank_manifest = dir.join("bank.json");
    write_json(&bank_manifest, &manifest)?;
    let query_dir = dir.join("queries");
    let query_manifests = fixture
        .queries
        .iter()
        .map(|s| write_sample(s, &query_dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(WrittenFixture {
        bank_manifest,
        query_manifests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_are_reproducible() {
        let a = structural_suite(2, 2, 2, 7);
        let b = structural_suite(2, 2, 2, 7);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.bank, b.bank);
        assert_ne!(structural_suite(2, 2, 2, 8).bank, a.bank);
    }

    #[test]
    fn samples_validate() {
        for f in [structural_suite(1, 1, 1, 0), logical_suite(1, 1, 3, 0)] {
            for s in f.bank.iter().chain(&f.queries) {
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn footprints_tile_the_image() {
        let spec = SynthSpec::default();
        let total: usize = (0..spec.grid)
            .flat_map(|r| (0..spec.grid).map(move |c| (r, c)))
            .map(|(r, c)| cell_footprint(&spec, r, c).count())
            .sum();
        assert_eq!(total, spec.image_size() * spec.image_size());
    }

    #[test]
    fn missing_component_queries_drop_one_candidate() {
        let f = logical_suite(1, 1, 3, 3);
        assert_eq!(f.queries[0].candidates.len(), 3);
        for q in &f.queries[1..] {
            assert_eq!(q.candidates.len(), 2);
            assert!(q.gt_mask.as_ref().unwrap().any());
        }
    }
}
