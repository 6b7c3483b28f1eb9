//! Image- and pixel-level ROC-AUC plus report and map emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Mask, ScoreMap};
use crate::pipeline::DetectionResult;
use crate::tensor_store::{write_json, write_tensor, Tensor};

/// Area under the ROC curve as the Mann-Whitney statistic with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score[{i}] = {}", scores[i])));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps tie midranks integral
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j) as u128;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_pos += mid2 * tied_pos;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Final map and ground truth of one scored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelRecord {
    pub map: ScoreMap,
    pub gt: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: String,
    pub category: String,
    pub image_score: f64,
    pub anomalous: bool,
    /// Present exactly when a ground-truth mask exists.
    pub pixels: Option<PixelRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub dataset: String,
    pub category: String,
    /// `None` when the rows hold a single class.
    pub image_auc: Option<f64>,
    pub pixel_auc: Option<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub n_samples: usize,
    pub n_anomalous: usize,
    pub n_with_ground_truth: usize,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub config_fingerprint: String,
    pub overall: AucRow,
    pub categories: Vec<AucRow>,
    /// Why `overall.pixel_auc` is missing, if it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_auc_absent: Option<String>,
    pub stats: RunStats,
}

pub const CSV_HEADER: &str = "dataset,category,image_auc,pixel_auc,n_samples";

const NO_GT: &str = "no ground-truth masks in the evaluated samples";

impl EvalReport {
    /// Overall row first, then categories in sorted order.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in std::iter::once(&self.overall).chain(&self.categories) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&r.dataset),
                csv_field(&r.category),
                opt(r.image_auc),
                opt(r.pixel_auc),
                r.n_samples
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn pixel_auc(records: &[&EvalRecord]) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        if let Some(p) = &r.pixels {
            if (p.map.height(), p.map.width()) != (p.gt.height(), p.gt.width()) {
                return Err(Error::dims(format!(
                    "{}: map and ground truth sizes differ",
                    r.sample_id
                )));
            }
            scores.extend(p.map.as_slice().iter().map(|&v| v as f64));
            labels.extend_from_slice(p.gt.as_slice());
        }
    }
    if scores.is_empty() {
        return Ok(None);
    }
    match roc_auc(&scores, &labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedAuc(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn row(dataset: &str, category: &str, records: &[&EvalRecord]) -> Result<AucRow> {
    let scores: Vec<f64> = records.iter().map(|r| r.image_score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.anomalous).collect();
    let image_auc = match roc_auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedAuc(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(AucRow {
        dataset: dataset.to_string(),
        category: category.to_string(),
        image_auc,
        pixel_auc: pixel_auc(records)?,
        n_samples: records.len(),
    })
}

/// Pools every record for the overall row; pixel AUC pools all pixels of all
/// samples that carry ground truth.
pub fn evaluate_dataset(dataset: &str, records: &[EvalRecord], config_fingerprint: &str) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::UndefinedAuc("no records to evaluate".into()));
    }
    let all: Vec<&EvalRecord> = records.iter().collect();
    let overall = row(dataset, "all", &all)?;
    if overall.image_auc.is_none() {
        let pos = records.iter().filter(|r| r.anomalous).count();
        return Err(Error::UndefinedAuc(format!(
            "image labels hold a single class ({pos} anomalous of {})",
            records.len()
        )));
    }
    let mut cats: Vec<&str> = records.iter().map(|r| r.category.as_str()).collect();
    cats.sort_unstable();
    cats.dedup();
    let categories = cats
        .iter()
        .map(|c| {
            let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.category == *c).collect();
            row(dataset, c, &rs)
        })
        .collect::<Result<Vec<_>>>()?;
    let with_gt: Vec<&EvalRecord> = records.iter().filter(|r| r.pixels.is_some()).collect();
    let pixel_auc_absent = match (overall.pixel_auc, with_gt.is_empty()) {
        (Some(_), _) => None,
        (None, true) => Some(NO_GT.to_string()),
        (None, false) => Some("ground-truth pixels hold a single class".to_string()),
    };
    Ok(EvalReport {
        dataset: dataset.to_string(),
        config_fingerprint: config_fingerprint.to_string(),
        overall,
        categories,
        pixel_auc_absent,
        stats: RunStats {
            n_samples: records.len(),
            n_anomalous: records.iter().filter(|r| r.anomalous).count(),
            n_with_ground_truth: with_gt.len(),
            n_pixels: with_gt
                .iter()
                .map(|r| r.pixels.as_ref().map_or(0, |p| p.gt.len()))
                .sum(),
        },
    })
}

/// Linear `[0, 1] → [0, 255]`, clamped and rounded.
pub fn map_to_gray(map: &ScoreMap) -> Vec<u8> {
    map.as_slice()
        .iter()
        .map(|&v| {
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (v * 255.0).round() as u8
        })
        .collect()
}

pub fn write_gray_png(map: &ScoreMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width() as u32, map.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&map_to_gray(map)).map_err(png_err)?;
    w.finish().map_err(png_err)
}

pub fn score_map_tensor(map: &ScoreMap) -> Tensor {
    Tensor::f32(vec![map.height(), map.width()], map.as_slice().to_vec()).expect("dims match data")
}

pub fn read_score_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    let path = path.as_ref();
    let t = crate::tensor_store::read_tensor(path)?;
    match (t.as_f32(), t.dims()) {
        (Some(d), &[h, w]) => ScoreMap::new(h, w, d.to_vec()),
        _ => Err(Error::InvalidTensor(format!(
            "{}: expected a float32 H×W map",
            path.display()
        ))),
    }
}

/// Rejects ids that would escape the output directory.
pub fn check_sample_id(id: &str) -> Result<()> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
        return Err(Error::Config(format!("sample id '{id}' is not usable as a file name")));
    }
    Ok(())
}

/// Writes `{id}.map.png` and `{id}.map.tnsr` per result and, when given,
/// `report.json` and `report.csv`. Returns the written paths in order.
pub fn emit_outputs(results: &[DetectionResult], report: Option<&EvalReport>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for r in results {
        check_sample_id(&r.sample_id)?;
        let png_path = out_dir.join(format!("{}.map.png", r.sample_id));
        write_gray_png(&r.final_map, &png_path)?;
        let raw_path = out_dir.join(format!("{}.map.tnsr", r.sample_id));
        write_tensor(&score_map_tensor(&r.final_map), &raw_path)?;
        written.extend([png_path, raw_path]);
    }
    if let Some(report) = report {
        let json_path = out_dir.join("report.json");
        write_json(&json_path, report)?;
        let csv_path = out_dir.join("report.csv");
        let mut f = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        f.write_all(report.to_csv().as_bytes())
            .map_err(|e| Error::io(&csv_path, e))?;
        written.extend([json_path, csv_path]);
    }
    Ok(written)
}
