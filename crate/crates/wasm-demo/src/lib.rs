//! Browser bindings for the synthetic demo page in `www/`.
//!
//! Three operations are exposed: scoring a query under adjustable fusion
//! weights, viewing its component segmentation, and measuring image AUC over
//! the whole query set for the current weights.

use compad::evaluation::roc_auc;
use compad::pipeline::{detect, DetectionConfig, DetectionResult, ReferenceBank};
use compad::synth::{logical_suite, structural_suite, Fixture};
use compad::Error;
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Fusion and scorer weights set from the page sliders.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct Weights {
    pub pm: f64,
    pub aware: f64,
    pub vl: f64,
    pub delta: f64,
    pub eta: f64,
}

#[wasm_bindgen]
impl Weights {
    #[wasm_bindgen(constructor)]
    pub fn new(pm: f64, aware: f64, vl: f64, delta: f64, eta: f64) -> Weights {
        Weights {
            pm,
            aware,
            vl,
            delta,
            eta,
        }
    }
}

/// A generated category with its reference bank already built.
#[wasm_bindgen]
pub struct Explorer {
    fixture: Fixture,
    base: DetectionConfig,
    bank: ReferenceBank,
}

#[wasm_bindgen]
impl Explorer {
    /// `kind` is `"structural"` or `"logical"`.
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, n_normal: usize, n_anomalous: usize, seed: u64) -> Result<Explorer, JsError> {
        let (fixture, clusters) = match kind {
            "structural" => (structural_suite(2, n_normal, n_anomalous, seed), 3),
            "logical" => (logical_suite(2, n_normal, n_anomalous, seed), 4),
            other => return Err(JsError::new(&format!("unknown fixture kind {other:?}"))),
        };
        let base = fixture.spec.config(clusters);
        let bank = ReferenceBank::build(&fixture.category, &fixture.bank, &base).map_err(js)?;
        Ok(Explorer { fixture, base, bank })
    }

    pub fn size(&self) -> usize {
        self.fixture.spec.image_size()
    }

    pub fn query_count(&self) -> usize {
        self.fixture.queries.len()
    }

    pub fn is_anomalous(&self, index: usize) -> bool {
        self.fixture.labels().get(index).copied().unwrap_or(false)
    }

    /// Query image as RGBA bytes.
    pub fn image(&self, index: usize) -> Result<Vec<u8>, JsError> {
        let q = self.query(index)?;
        Ok(q.image
            .as_slice()
            .chunks(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect())
    }

    /// Ground-truth mask as 0/1 bytes; all zero for normal queries.
    pub fn ground_truth(&self, index: usize) -> Result<Vec<u8>, JsError> {
        let q = self.query(index)?;
        let n = self.size() * self.size();
        Ok(match &q.gt_mask {
            Some(m) => m.as_slice().iter().map(|&b| b as u8).collect(),
            None => vec![0; n],
        })
    }

    /// Final anomaly map (row-major, `size × size`).
    pub fn detect(&self, index: usize, w: &Weights) -> Result<Vec<f32>, JsError> {
        Ok(self.run(index, w)?.final_map.into_vec())
    }

    pub fn image_score(&self, index: usize, w: &Weights) -> Result<f64, JsError> {
        Ok(self.run(index, w)?.image_score)
    }

    /// Per-pixel component label (0 = unassigned, k = k-th component) for the query.
    pub fn segment(&self, index: usize) -> Result<Vec<u8>, JsError> {
        let comps = self
            .bank
            .segment(self.query(index)?, &self.base.segmenter)
            .map_err(js)?;
        let mut labels = vec![0u8; comps.height() * comps.width()];
        for (k, m) in comps.masks().enumerate() {
            for (dst, &on) in labels.iter_mut().zip(m.as_slice()) {
                if on {
                    *dst = (k + 1).min(255) as u8;
                }
            }
        }
        Ok(labels)
    }

    pub fn segment_branch(&self, index: usize) -> Result<String, JsError> {
        let comps = self
            .bank
            .segment(self.query(index)?, &self.base.segmenter)
            .map_err(js)?;
        Ok(format!("{:?}", comps.branch()))
    }

    /// Image-level AUC over every query under the given weights.
    pub fn image_auc(&self, w: &Weights) -> Result<f64, JsError> {
        let scores = (0..self.query_count())
            .map(|i| self.run(i, w).map(|r| r.image_score))
            .collect::<Result<Vec<_>, _>>()?;
        roc_auc(&scores, &self.fixture.labels()).map_err(js)
    }
}

impl Explorer {
    fn query(&self, index: usize) -> Result<&compad::Sample, JsError> {
        self.fixture
            .queries
            .get(index)
            .ok_or_else(|| JsError::new(&format!("no query {index}")))
    }

    fn run(&self, index: usize, w: &Weights) -> Result<DetectionResult, JsError> {
        let mut cfg = self.base.clone();
        cfg.scorer.weight_pm = w.pm;
        cfg.scorer.weight_aware = w.aware;
        cfg.scorer.weight_vl = w.vl;
        cfg.delta = w.delta;
        cfg.eta = w.eta;
        detect(self.query(index)?, &self.bank, &cfg).map_err(js)
    }
}

/// AUC of arbitrary scores; `labels` holds 0/1 bytes.
#[wasm_bindgen]
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, JsError> {
    let labels: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    roc_auc(scores, &labels).map_err(js)
}
