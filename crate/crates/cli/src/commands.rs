use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use compad::evaluation::{check_sample_id, emit_outputs, evaluate_dataset, read_score_map, EvalRecord, PixelRecord};
use compad::pipeline::{detect, ComponentScore, DetectionConfig, ReferenceBank};
use compad::segmenter::{ComponentKey, SegmentBranch};
use compad::synth::{logical_suite, structural_suite, write_fixture};
use compad::tensor_store::{
    load_bank, load_sample, read_sample_manifest, read_tensor, write_json, write_tensor, Label, Sample, Tensor,
};
use compad::{Error, Mask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input: config, manifests, tensors or arguments. Exit code 1.
    Invalid(anyhow::Error),
    /// Failure while computing or writing results. Exit code 2.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Invalid(e) | Failure::Runtime(e) => f.write_str(&chain(e)),
        }
    }
}

/// Joins the error chain, skipping causes already quoted by their wrapper.
fn chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

pub type CmdResult<T> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Errors raised by detection that trace back to inconsistent inputs.
fn classify(e: Error) -> Failure {
    match e {
        Error::Manifest { .. }
        | Error::ManifestParse { .. }
        | Error::Config(_)
        | Error::DimMismatch(_)
        | Error::InvalidTensor(_)
        | Error::EmptyReference => Failure::Invalid(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub shots: Option<usize>,
}

impl Common {
    fn resolve(&self) -> CmdResult<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref()).invalid()?;
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
            cfg.detection.seed = s;
        }
        if self.out.is_some() {
            cfg.out_dir = self.out.clone();
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if self.shots.is_some() {
            cfg.shots = self.shots;
        }
        if cfg.threads == Some(0) {
            return Err(Failure::Invalid(anyhow!("--threads must be at least 1")));
        }
        Ok(cfg)
    }
}

fn pool(threads: Option<usize>) -> CmdResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().runtime()
}

/// Expands glob patterns into a sorted, de-duplicated list of files.
pub fn expand_globs(patterns: &[String]) -> CmdResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        let mut matched = false;
        for entry in glob::glob(p).with_context(|| format!("bad pattern '{p}'")).invalid()? {
            let path = entry.invalid()?;
            if path.is_file() {
                out.push(path);
                matched = true;
            }
        }
        if !matched {
            return Err(Failure::Invalid(anyhow!("'{p}' matches no files")));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn query_paths(args: &[String], cfg: &RunConfig) -> CmdResult<Vec<PathBuf>> {
    let patterns = if args.is_empty() { &cfg.queries } else { args };
    if patterns.is_empty() {
        return Err(Failure::Invalid(anyhow!("no query manifests given")));
    }
    expand_globs(patterns)
}

fn load_queries(paths: &[PathBuf]) -> CmdResult<Vec<Sample>> {
    let samples = paths
        .iter()
        .map(|p| load_sample(p).with_context(|| format!("query {}", p.display())))
        .collect::<Result<Vec<_>, _>>()
        .invalid()?;
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Failure::Invalid(anyhow!("duplicate query sample id '{}'", w[0])));
    }
    Ok(samples)
}

/// A loaded bank with shot selection and per-category overrides applied.
pub struct PreparedBank {
    pub category: String,
    pub samples: Vec<Sample>,
    pub config: DetectionConfig,
}

pub fn prepare_bank(bank_path: Option<&Path>, cfg: &RunConfig) -> CmdResult<PreparedBank> {
    let path = bank_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.bank.clone())
        .ok_or_else(|| Failure::Invalid(anyhow!("no reference bank given (--bank or \"bank\" in config)")))?;
    let bank = load_bank(&path).invalid()?;
    let mut samples = bank.samples;
    if let Some(k) = cfg.shots {
        if k == 0 || k > samples.len() {
            return Err(Failure::Invalid(anyhow!(
                "--shots {k} is out of range for a bank of {} samples",
                samples.len()
            )));
        }
        samples.truncate(k);
    }
    let config = match &bank.config_overrides {
        Some(o) => cfg.detection.with_overrides(o).invalid()?,
        None => cfg.detection.clone(),
    };
    Ok(PreparedBank {
        category: bank.category,
        samples,
        config,
    })
}

pub fn cmd_validate(paths: &[String], config: Option<&Path>) -> CmdResult<Vec<String>> {
    let mut diagnostics = Vec::new();
    if let Some(c) = config {
        if let Err(e) = RunConfig::load(c) {
            diagnostics.push(format!("FAIL {}: {}", c.display(), chain(&e)));
        }
    }
    let mut files = Vec::new();
    for pattern in paths {
        match expand_globs(std::slice::from_ref(pattern)) {
            Ok(found) => files.extend(found),
            Err(e) => diagnostics.push(format!("FAIL {pattern}: {e}")),
        }
    }
    files.sort();
    files.dedup();
    for p in &files {
        let outcome = std::fs::read_to_string(p)
            .map_err(anyhow::Error::from)
            .and_then(|t| Ok(serde_json::from_str::<serde_json::Value>(&t)?))
            .and_then(|v| {
                if v.get("category").is_some() {
                    load_bank(p).map(|_| ()).map_err(Into::into)
                } else {
                    load_sample(p).map(|_| ()).map_err(Into::into)
                }
            });
        match outcome {
            Ok(()) => log::info!("ok {}", p.display()),
            Err(e) => diagnostics.push(format!("FAIL {}: {}", p.display(), chain(&e))),
        }
    }
    if diagnostics.is_empty() {
        Ok(diagnostics)
    } else {
        Err(Failure::Invalid(anyhow!(diagnostics.join("\n"))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub sample_id: String,
    pub manifest: PathBuf,
    pub image_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub branch: SegmentBranch,
    pub components: Vec<ComponentScore>,
}

/// `summary.json` written by `detect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    /// Fingerprint of the run config before per-category overrides.
    pub run_fingerprint: String,
    /// Fingerprint of the config actually used.
    pub config_fingerprint: String,
    pub config: DetectionConfig,
    pub category: String,
    pub bank_samples: Vec<String>,
    pub queries: Vec<QuerySummary>,
}

pub const SUMMARY_FILE: &str = "summary.json";

pub fn cmd_detect(common: &Common, bank: Option<&Path>, queries: &[String]) -> CmdResult<DetectSummary> {
    let cfg = common.resolve()?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Invalid(anyhow!("no output directory given (--out)")))?;
    let prepared = prepare_bank(bank, &cfg)?;
    let paths = query_paths(queries, &cfg)?;
    let samples = load_queries(&paths)?;
    for s in &samples {
        check_sample_id(&s.id).invalid()?;
    }
    log::info!(
        "category {}: {} references, {} queries",
        prepared.category,
        prepared.samples.len(),
        samples.len()
    );
    let pool = pool(cfg.threads)?;
    let dc = &prepared.config;
    let results = pool.install(|| -> CmdResult<Vec<_>> {
        let bank = ReferenceBank::build(&prepared.category, &prepared.samples, dc).map_err(classify)?;
        samples
            .par_iter()
            .map(|q| detect(q, &bank, dc).map_err(classify))
            .collect()
    })?;
    emit_outputs(&results, None, &out).runtime()?;
    let summary = DetectSummary {
        run_fingerprint: cfg.detection.fingerprint(),
        config_fingerprint: dc.fingerprint(),
        config: dc.clone(),
        category: prepared.category.clone(),
        bank_samples: prepared.samples.iter().map(|s| s.id.clone()).collect(),
        queries: results
            .iter()
            .zip(&samples)
            .zip(&paths)
            .map(|((r, s), p)| QuerySummary {
                sample_id: s.id.clone(),
                manifest: std::path::absolute(p).unwrap_or_else(|_| p.clone()),
                image_score: r.image_score,
                label: s.label,
                branch: r.components.branch(),
                components: r.component_scores.clone(),
            })
            .collect(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary).runtime()?;
    for q in &summary.queries {
        log::info!("{} score {:.6}", q.sample_id, q.image_score);
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentEntry {
    pub sample_id: String,
    pub branch: SegmentBranch,
    pub keys: Vec<ComponentKey>,
    pub areas: Vec<usize>,
    pub masks: PathBuf,
}

pub fn cmd_segment(common: &Common, bank: Option<&Path>, queries: &[String]) -> CmdResult<Vec<SegmentEntry>> {
    let cfg = common.resolve()?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Invalid(anyhow!("no output directory given (--out)")))?;
    let prepared = prepare_bank(bank, &cfg)?;
    let samples = load_queries(&query_paths(queries, &cfg)?)?;
    let bank = ReferenceBank::build(&prepared.category, &prepared.samples, &prepared.config).map_err(classify)?;
    std::fs::create_dir_all(&out)
        .with_context(|| out.display().to_string())
        .runtime()?;
    let mut entries = Vec::new();
    for s in &samples {
        check_sample_id(&s.id).invalid()?;
        let set = bank.segment(s, &prepared.config.segmenter).map_err(classify)?;
        let (h, w) = (set.height(), set.width());
        let bytes: Vec<u8> = set
            .masks()
            .flat_map(|m| m.as_slice().iter().map(|&b| b as u8))
            .collect();
        let name = PathBuf::from(format!("{}.components.tnsr", s.id));
        write_tensor(&Tensor::u8(vec![set.len(), h, w], bytes).runtime()?, out.join(&name)).runtime()?;
        entries.push(SegmentEntry {
            sample_id: s.id.clone(),
            branch: set.branch(),
            keys: set.keys(),
            areas: set.masks().map(Mask::count).collect(),
            masks: name,
        });
    }
    write_json(&out.join("segments.json"), &entries).runtime()?;
    Ok(entries)
}

fn read_summary(dir: &Path) -> CmdResult<DetectSummary> {
    let p = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&p)
        .with_context(|| format!("missing results: {}", p.display()))
        .invalid()?;
    let s: DetectSummary = serde_json::from_str(&text)
        .with_context(|| p.display().to_string())
        .invalid()?;
    if s.config.fingerprint() != s.config_fingerprint {
        return Err(Failure::Invalid(anyhow!(
            "{}: recorded config does not match its fingerprint",
            p.display()
        )));
    }
    Ok(s)
}

/// Scores recorded by `detect` joined with the ground truth of each query.
pub fn cmd_evaluate(
    common: &Common,
    results: &[PathBuf],
    gt_manifests: &[String],
    dataset: Option<&str>,
) -> CmdResult<compad::EvalReport> {
    let cfg = common.resolve()?;
    if results.is_empty() {
        return Err(Failure::Invalid(anyhow!("no results directories given (--results)")));
    }
    let summaries = results.iter().map(|d| read_summary(d)).collect::<CmdResult<Vec<_>>>()?;
    let run_fp = summaries[0].run_fingerprint.clone();
    for (s, d) in summaries.iter().zip(results).skip(1) {
        if s.run_fingerprint != run_fp {
            return Err(Failure::Invalid(anyhow!(
                "config fingerprint mismatch: {} has {}, {} has {}",
                results[0].display(),
                run_fp,
                d.display(),
                s.run_fingerprint
            )));
        }
    }
    if common.config.is_some() && cfg.detection.fingerprint() != run_fp {
        return Err(Failure::Invalid(anyhow!(
            "config fingerprint mismatch: --config gives {}, results were produced with {}",
            cfg.detection.fingerprint(),
            run_fp
        )));
    }

    let mut index: BTreeMap<&str, (&Path, &DetectSummary, &QuerySummary)> = BTreeMap::new();
    for (s, d) in summaries.iter().zip(results) {
        for q in &s.queries {
            if index.insert(&q.sample_id, (d, s, q)).is_some() {
                return Err(Failure::Invalid(anyhow!(
                    "sample '{}' appears in several results",
                    q.sample_id
                )));
            }
        }
    }
    let manifests: Vec<PathBuf> = if gt_manifests.is_empty() {
        index.values().map(|(_, _, q)| q.manifest.clone()).collect()
    } else {
        expand_globs(gt_manifests)?
    };

    let mut records = Vec::with_capacity(manifests.len());
    for m in &manifests {
        let manifest = read_sample_manifest(m).invalid()?;
        let (dir, summary, q) = index
            .get(manifest.sample_id.as_str())
            .ok_or_else(|| Failure::Invalid(anyhow!("missing results for sample '{}'", manifest.sample_id)))?;
        let label = manifest
            .label
            .ok_or_else(|| Failure::Invalid(anyhow!("{}: label is required for evaluation", m.display())))?;
        let pixels = match &manifest.gt_mask_path {
            Some(gt) => {
                let base = m.parent().unwrap_or_else(|| Path::new("."));
                let t = read_tensor(base.join(gt)).invalid()?;
                let (h, w) = (manifest.image_height, manifest.image_width);
                let gt = match (t.as_u8(), t.dims()) {
                    (Some(b), &[gh, gw]) if (gh, gw) == (h, w) => {
                        Mask::new(h, w, b.iter().map(|&v| v == 1).collect()).invalid()?
                    }
                    _ => return Err(Failure::Invalid(anyhow!("{}: bad ground-truth tensor", m.display()))),
                };
                let map = read_score_map(dir.join(format!("{}.map.tnsr", q.sample_id)))
                    .with_context(|| format!("missing results for sample '{}'", q.sample_id))
                    .invalid()?;
                Some(PixelRecord { map, gt })
            }
            None => None,
        };
        records.push(EvalRecord {
            sample_id: q.sample_id.clone(),
            category: summary.category.clone(),
            image_score: q.image_score,
            anomalous: label.is_anomalous(),
            pixels,
        });
    }
    let name = dataset.or(cfg.dataset.as_deref()).unwrap_or("dataset");
    let report = evaluate_dataset(name, &records, &run_fp).map_err(|e| match e {
        Error::UndefinedAuc(_) => Failure::Invalid(e.into()),
        other => Failure::Runtime(other.into()),
    })?;
    let out = cfg.out_dir.clone().unwrap_or_else(|| results[0].clone());
    emit_outputs(&[], Some(&report), &out).runtime()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapmTiming {
    pub total: f64,
    pub levels: BTreeMap<String, f64>,
}

/// Summed wall time per stage over all queries and repeats, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub threads: usize,
    pub queries: usize,
    pub repeats: usize,
    pub bank_build: f64,
    pub segment: f64,
    pub capm: CapmTiming,
    pub gecm: f64,
    pub fusion: f64,
    pub wall: f64,
}

pub fn cmd_bench(common: &Common, bank: Option<&Path>, queries: &[String], repeats: usize) -> CmdResult<BenchReport> {
    let cfg = common.resolve()?;
    let prepared = prepare_bank(bank, &cfg)?;
    let samples = load_queries(&query_paths(queries, &cfg)?)?;
    let pool = pool(cfg.threads)?;
    let repeats = repeats.max(1);
    let dc = &prepared.config;
    let t0 = Instant::now();
    let built = pool
        .install(|| ReferenceBank::build(&prepared.category, &prepared.samples, dc))
        .map_err(classify)?;
    let bank_build = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let timings = pool.install(|| -> CmdResult<Vec<_>> {
        (0..repeats)
            .flat_map(|_| samples.iter())
            .collect::<Vec<_>>()
            .par_iter()
            .map(|q| detect(q, &built, dc).map(|r| r.timings).map_err(classify))
            .collect()
    })?;
    let wall = t1.elapsed().as_secs_f64();
    let secs = |f: fn(&compad::pipeline::StageTimings) -> Duration| -> f64 {
        timings.iter().map(f).sum::<Duration>().as_secs_f64()
    };
    let mut levels: BTreeMap<String, f64> = BTreeMap::new();
    for t in &timings {
        for (tag, d) in &t.capm {
            *levels.entry(tag.clone()).or_default() += d.as_secs_f64();
        }
    }
    let report = BenchReport {
        threads: pool.current_num_threads(),
        queries: samples.len(),
        repeats,
        bank_build,
        segment: secs(|t| t.segment),
        capm: CapmTiming {
            total: levels.values().sum(),
            levels,
        },
        gecm: secs(|t| t.gecm),
        fusion: secs(|t| t.fusion),
        wall,
    };
    if let Some(out) = &cfg.out_dir {
        std::fs::create_dir_all(out)
            .with_context(|| out.display().to_string())
            .runtime()?;
        write_json(&out.join("bench.json"), &report).runtime()?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    /// Single-cell feature defects on a two-object scene.
    Structural,
    /// One of three objects missing.
    Logical,
}

pub struct SynthArgs {
    pub kind: SynthKind,
    pub refs: usize,
    pub normal: usize,
    pub anomalous: usize,
    pub seed: u64,
}

/// Writes a synthetic category plus a matching `config.json` into `out`.
pub fn cmd_synth(out: &Path, a: &SynthArgs) -> CmdResult<PathBuf> {
    if a.refs == 0 {
        return Err(Failure::Invalid(anyhow!("--refs must be at least 1")));
    }
    let (fixture, clusters) = match a.kind {
        SynthKind::Structural => (structural_suite(a.refs, a.normal, a.anomalous, a.seed), 3),
        SynthKind::Logical => (logical_suite(a.refs, a.normal, a.anomalous, a.seed), 4),
    };
    write_fixture(&fixture, out).runtime()?;
    let cfg = RunConfig {
        detection: fixture.spec.config(clusters),
        dataset: Some("synthetic".into()),
        bank: Some("bank.json".into()),
        queries: vec!["queries/*.json".into()],
        ..RunConfig::default()
    };
    let path = out.join("config.json");
    write_json(&path, &cfg).runtime()?;
    Ok(path)
}
