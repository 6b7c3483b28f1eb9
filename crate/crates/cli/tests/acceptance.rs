#![allow(clippy::needless_range_loop, clippy::nonminimal_bool, clippy::type_complexity, clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use compad::evaluation::roc_auc;
use compad::grid::{FeatureMap, Mask, Matrix, RgbImage};
use compad::logical::{adjacency, aggregate, geometric_features};
use compad::numerics::{group_average_pool, min_distance_search, DistanceMetric};
use compad::pipeline::{detect, image_score, DetectionConfig, ImageScoreMode, MapNormalization, ReferenceBank};
use compad::segmenter::{
    segment_masks, Centroids, Component, ComponentKey, ComponentMaskSet, SegmentBranch, SegmenterConfig,
};
use compad::synth::{logical_suite, structural_suite, Fixture};
use compad_cli::{cmd_detect, cmd_synth, Common, SynthArgs, SynthKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const INSTANCES: usize = 200;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let mut m = Mask::from_fn(h, w, |_, _| rng.random_bool(0.4));
    if !m.any() {
        m.set(rng.random_range(0..h), rng.random_range(0..w), true);
    }
    m
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn oracle_distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::Cosine => 1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()),
        DistanceMetric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        DistanceMetric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let tol = 1e-6;
    let mut worst = 0.0f64;
    let mut track = |got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        worst = worst.max(err);
        if err <= tol {
            Ok(())
        } else {
            Err(format!("got {got}, oracle {want}"))
        }
    };

    for k in 0..INSTANCES {
        let metric = [DistanceMetric::Cosine, DistanceMetric::L1, DistanceMetric::L2][k % 3];
        let c = rng.random_range(1..8);
        let (nq, nr) = (rng.random_range(1..6), rng.random_range(1..10));
        let q = random_matrix(&mut rng, nq, c);
        let r = random_matrix(&mut rng, nr, c);
        let got = min_distance_search(&q, &r, metric).map_err(|e| e.to_string())?;
        for (i, g) in got.iter().enumerate() {
            let want = r
                .iter_rows()
                .map(|row| oracle_distance(&f64s(q.row(i)), &f64s(row), metric))
                .fold(f64::INFINITY, f64::min);
            track(*g, want.max(0.0)).map_err(|e| format!("min_distance_search {metric:?}: {e}"))?;
        }
    }

    for _ in 0..INSTANCES {
        let (h, w, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
        let fm = FeatureMap::from_matrix(h, w, random_matrix(&mut rng, h * w, c)).unwrap();
        let mask = random_mask(&mut rng, h, w);
        let got = group_average_pool(&fm, &mask).map_err(|e| e.to_string())?;
        for (ch, g) in got.iter().enumerate() {
            let vals: Vec<f64> = (0..h * w)
                .filter(|&i| mask.as_slice()[i])
                .map(|i| fm.cell_at(i)[ch] as f64)
                .collect();
            track(*g as f64, vals.iter().sum::<f64>() / vals.len() as f64)
                .map_err(|e| format!("group_average_pool: {e}"))?;
        }
    }

    for _ in 0..INSTANCES {
        let n = rng.random_range(1..7);
        let c = rng.random_range(1..6);
        let deep = random_matrix(&mut rng, n, c);
        let a = adjacency(&deep).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = deep.iter_rows().map(f64s).collect();
        for i in 0..n {
            let raw: Vec<f64> = (0..n)
                .map(|j| {
                    (dot(&rows[i], &rows[j]) / (dot(&rows[i], &rows[i]) * dot(&rows[j], &rows[j])).sqrt()).max(0.0)
                })
                .collect();
            let sum: f64 = raw.iter().sum();
            for j in 0..n {
                track(a.get(i, j), raw[j] / sum).map_err(|e| format!("adjacency: {e}"))?;
            }
        }

        let agg = aggregate(&a, &deep).map_err(|e| e.to_string())?;
        for i in 0..n {
            for k in 0..deep.cols() {
                let want: f64 = (0..n).map(|j| a.get(i, j) * rows[j][k]).sum();
                track(agg.row(i)[k] as f64, want).map_err(|e| format!("aggregate: {e}"))?;
            }
        }
    }

    for _ in 0..INSTANCES {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let data = (0..h * w * 3).map(|_| rng.random::<u8>()).collect();
        let image = RgbImage::new(h, w, data).unwrap();
        let mask = random_mask(&mut rng, h, w);
        let got = geometric_features(&mask, &image).map_err(|e| e.to_string())?;
        let on: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| mask.get(y, x))
            .collect();
        let n = on.len() as f64;
        let mean = |f: &dyn Fn(usize, usize) -> f64| on.iter().map(|&(y, x)| f(y, x)).sum::<f64>() / n;
        let want = [
            n / (h * w) as f64,
            mean(&|y, x| image.pixel(y, x)[0] as f64) / 255.0,
            mean(&|y, x| image.pixel(y, x)[1] as f64) / 255.0,
            mean(&|y, x| image.pixel(y, x)[2] as f64) / 255.0,
            mean(&|_, x| x as f64 + 0.5) / w as f64,
            mean(&|y, _| y as f64 + 0.5) / h as f64,
        ];
        for (g, wv) in got.iter().zip(want) {
            track(*g as f64, wv).map_err(|e| format!("geometric_features: {e}"))?;
        }
    }

    let mut auc_worst = 0.0f64;
    let mut done = 0;
    while done < INSTANCES {
        let n = rng.random_range(2..30);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..6) as f64 / 5.0 + rng.random_range(0.0..0.01) * rng.random_range(0..2) as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if !(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
            continue;
        }
        let err = (roc_auc(&scores, &labels).map_err(|e| e.to_string())? - pair_auc(&scores, &labels)).abs();
        auc_worst = auc_worst.max(err);
        ensure!(err <= 1e-9, "roc_auc differs from pair counting by {err}");
        done += 1;
    }

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "6 functions x {INSTANCES} instances, max error {worst:.1e} (auc {auc_worst:.1e}), {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn self_detection_floor() -> Check {
    let mut checked = 0;
    for (f, k) in [(structural_suite(3, 0, 0, 101), 3), (logical_suite(3, 0, 0, 102), 4)] {
        let cfg = f.spec.config(k);
        let bank = ReferenceBank::build(&f.category, &f.bank, &cfg).map_err(|e| e.to_string())?;
        for r in &f.bank {
            let res = detect(r, &bank, &cfg).map_err(|e| e.to_string())?;
            for (tag, lv) in &res.structural_levels {
                ensure!(
                    lv.pm.as_slice().iter().all(|&v| v == 0.0),
                    "{}: pm nonzero at {tag} (max {})",
                    r.id,
                    lv.pm.max()
                );
                ensure!(
                    lv.aware.as_slice().iter().all(|&v| v == 0.0),
                    "{}: aware nonzero at {tag} (max {})",
                    r.id,
                    lv.aware.max()
                );
            }
            ensure!(
                res.logical.deep.iter().all(|&v| v == 0.0),
                "{}: deep {:?}",
                r.id,
                res.logical.deep
            );
            ensure!(
                res.logical.geo.iter().all(|&v| v == 0.0),
                "{}: geo {:?}",
                r.id,
                res.logical.geo
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} references, all four scores exactly 0"))
}

fn run(f: &Fixture, cfg: &DetectionConfig) -> Result<Vec<compad::DetectionResult>, String> {
    let bank = ReferenceBank::build(&f.category, &f.bank, cfg).map_err(|e| e.to_string())?;
    f.queries
        .iter()
        .map(|q| detect(q, &bank, cfg).map_err(|e| e.to_string()))
        .collect()
}

fn injected_structural() -> Check {
    let start = Instant::now();
    let f = structural_suite(2, 10, 10, 7);
    let res = run(&f, &f.spec.config(3))?;
    let elapsed = start.elapsed();
    let img: Vec<f64> = res.iter().map(|r| r.image_score).collect();
    let image_auc = roc_auc(&img, &f.labels()).map_err(|e| e.to_string())?;
    let mut px = Vec::new();
    let mut gt = Vec::new();
    for (r, q) in res.iter().zip(&f.queries) {
        px.extend(r.final_map.as_slice().iter().map(|&v| v as f64));
        gt.extend_from_slice(q.gt_mask.as_ref().ok_or("query without ground truth")?.as_slice());
    }
    let pixel_auc = roc_auc(&px, &gt).map_err(|e| e.to_string())?;
    let detail = format!(
        "image AUC {image_auc}, pixel AUC {pixel_auc:.5}, {:.2}s",
        elapsed.as_secs_f64()
    );
    ensure!(res.len() == 20, "{} queries", res.len());
    ensure!(
        image_auc == 1.0 && pixel_auc >= 0.99 && elapsed < Duration::from_secs(30),
        "{detail}"
    );
    Ok(detail)
}

fn missing_component() -> Check {
    let f = logical_suite(2, 10, 10, 8);
    let res = run(&f, &f.spec.config(4))?;
    let labels = f.labels();
    let auc = |pick: &dyn Fn(&compad::DetectionResult) -> f64| {
        let s: Vec<f64> = res.iter().map(pick).collect();
        roc_auc(&s, &labels).map_err(|e| e.to_string())
    };
    let logical = auc(&|r| image_score(&r.logical_map, ImageScoreMode::Max))?;
    let capm = auc(&|r| image_score(&r.structural_map, ImageScoreMode::Max))?;
    let detail = format!("logical-only AUC {logical}, structural-only AUC {capm:.3}");
    ensure!(logical == 1.0 && capm < logical, "{detail}");
    Ok(detail)
}

fn rect(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mask {
    Mask::from_fn(h, w, |y, x| rows.contains(&y) && cols.contains(&x))
}

fn branch_coverage() -> Check {
    let (h, w) = (8, 8);
    let cfg = SegmenterConfig::default();
    let cluster_features = FeatureMap::new(
        4,
        4,
        3,
        (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .flat_map(|(i, j)| match (i, j) {
                (1..=2, 1) => [0.0, 1.0, 0.0],
                (1..=2, 2) => [0.0, 0.0, 1.0],
                _ => [1.0, 0.0, 0.0],
            })
            .collect(),
    )
    .unwrap();
    let centroids = Centroids(Matrix::from_rows(3, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap());
    let seg =
        |cands: &[Mask]| segment_masks(cands, &cluster_features, h, w, &centroids, &cfg).map_err(|e| e.to_string());

    let mut near_full = Mask::full(h, w);
    near_full.set(0, 0, false);
    near_full.set(7, 7, false);
    ensure!(
        seg(&[near_full])? == ComponentMaskSet::whole(h, w, SegmentBranch::Texture),
        "texture"
    );

    let a = rect(h, w, 2..6, 2..4);
    let single = ComponentMaskSet::new(
        h,
        w,
        vec![Component {
            key: ComponentKey::Whole,
            mask: a.clone(),
        }],
        SegmentBranch::SingleObject,
    )
    .map_err(|e| e.to_string())?;
    ensure!(seg(&[a.clone(), Mask::empty(h, w)])? == single, "single object");

    let none = ComponentMaskSet::whole(h, w, SegmentBranch::NoCandidates);
    ensure!(seg(&[])? == none, "zero candidates");
    ensure!(seg(&[Mask::empty(h, w)])? == none, "only empty candidates");

    let b = rect(h, w, 2..6, 4..7);
    let c = rect(h, w, 2..4, 2..4);
    let fused = ComponentMaskSet::new(
        h,
        w,
        vec![
            Component {
                key: ComponentKey::Cluster(1),
                mask: a.clone(),
            },
            Component {
                key: ComponentKey::Cluster(2),
                mask: b.clone(),
            },
        ],
        SegmentBranch::Fused,
    )
    .map_err(|e| e.to_string())?;
    ensure!(seg(&[c, b, Mask::empty(h, w), a])? == fused, "fused");
    Ok("texture, single object, zero candidates, fused".into())
}

fn fusion_algebra() -> Check {
    let f = structural_suite(2, 2, 2, 9);
    for (wp, wa, wv) in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)] {
        let mut cfg = f.spec.config(3);
        (cfg.scorer.weight_pm, cfg.scorer.weight_aware, cfg.scorer.weight_vl) = (wp, wa, wv);
        for r in run(&f, &cfg)? {
            for (tag, lv) in &r.structural_levels {
                let want = if wp == 1.0 {
                    &lv.pm
                } else if wa == 1.0 {
                    &lv.aware
                } else {
                    &lv.vl
                };
                ensure!(
                    &lv.total == want,
                    "weights ({wp},{wa},{wv}) at {tag} differ from the constituent map"
                );
            }
        }
    }

    let mut cfg = f.spec.config(3);
    cfg.eta = 0.0;
    cfg.delta = 1.0;
    cfg.map_normalization = MapNormalization::MinMax;
    for r in run(&f, &cfg)? {
        ensure!(r.final_map == r.structural_map, "eta=0 changed the structural map");
        ensure!(
            r.structural_map.max() == 1.0 && r.structural_map.min() == 0.0,
            "structural map not normalized"
        );
    }

    let d = DetectionConfig::default();
    let v = serde_json::to_value(&d).map_err(|e| e.to_string())?;
    let third = 1.0 / 3.0;
    for (path, want) in [
        ("/scorer/weight_pm", third),
        ("/scorer/weight_aware", third),
        ("/scorer/weight_vl", third),
        ("/logical/phi", 0.5),
        ("/logical/psi", 0.5),
        ("/delta", 0.5),
        ("/eta", 0.5),
    ] {
        let got = v.pointer(path).and_then(|x| x.as_f64());
        ensure!(got == Some(want), "{path} is {got:?}, expected {want}");
    }
    let mut explicit = d.clone();
    (
        explicit.scorer.weight_pm,
        explicit.scorer.weight_aware,
        explicit.scorer.weight_vl,
    ) = (third, third, third);
    (explicit.logical.phi, explicit.logical.psi, explicit.delta, explicit.eta) = (0.5, 0.5, 0.5, 0.5);
    ensure!(
        explicit.fingerprint() == d.fingerprint(),
        "default fingerprint differs from the stated values"
    );
    Ok(format!(
        "weight triples, eta=0, defaults (fingerprint {})",
        &d.fingerprint()[..12]
    ))
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (name, kind) in [("structural", SynthKind::Structural), ("logical", SynthKind::Logical)] {
        let fixture = root.path().join(name);
        let args = SynthArgs {
            kind,
            refs: 2,
            normal: 5,
            anomalous: 5,
            seed: 3,
        };
        let config = cmd_synth(&fixture, &args).map_err(|e| e.to_string())?;
        let outs: Vec<PathBuf> = ["a", "b"].iter().map(|r| fixture.join(format!("out_{r}"))).collect();
        for out in &outs {
            let common = Common {
                config: Some(config.clone()),
                out: Some(out.clone()),
                seed: Some(5),
                ..Common::default()
            };
            cmd_detect(&common, None, &[]).map_err(|e| e.to_string())?;
        }
        let (a, b) = (files(&outs[0]), files(&outs[1]));
        ensure!(
            a.len() == b.len() && !a.is_empty(),
            "{name}: {} vs {} files",
            a.len(),
            b.len()
        );
        for (x, y) in a.iter().zip(&b) {
            ensure!(x.file_name() == y.file_name(), "{name}: {x:?} vs {y:?}");
            ensure!(
                std::fs::read(x).unwrap() == std::fs::read(y).unwrap(),
                "{name}: {x:?} differs"
            );
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across two runs"))
}

fn auc_validation() -> Check {
    let derived = roc_auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).map_err(|e| e.to_string())?;
    ensure!(derived == 0.75, "derived example gave {derived}");
    let tied = roc_auc(&[0.4; 6], &[true, false, true, false, false, true]).map_err(|e| e.to_string())?;
    ensure!(tied == 0.5, "all-tied gave {tied}");
    Ok("0.75 exact, all-tied 0.5".into())
}

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("self-detection floor", self_detection_floor),
        ("injected structural anomaly", injected_structural),
        ("missing-component logical anomaly", missing_component),
        ("segmentation branch coverage", branch_coverage),
        ("fusion algebra", fusion_algebra),
        ("determinism", determinism),
        ("AUC metric validation", auc_validation),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
