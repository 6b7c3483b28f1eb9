//! Training-free few-shot visual anomaly detection.
//!
//! A query image is scored against K normal reference images of the same
//! category. Inputs are precomputed encoder features, candidate object masks
//! and text embeddings stored as tensor files indexed by JSON manifests
//! ([`tensor_store`]).
//!
//! Components come first, then two scoring branches:
//!
//! - [`segmenter`] groups candidate masks into components using k-means
//!   clusters shared across the category.
//! - [`structural`] matches patches against normal patches, globally and
//!   within the same component, and adds a text-prompt probability.
//! - [`logical`] embeds each component with graph attention over its
//!   siblings and compares deep and geometric descriptors with the normal
//!   components.
//!
//! [`pipeline`] fuses both maps; [`evaluation`] computes ROC-AUC reports.
//!
//! ```no_run
//! use compad::{load_bank, load_sample, detect, DetectionConfig, ReferenceBank};
//!
//! # fn main() -> compad::Result<()> {
//! let bank = load_bank("bank.json")?;
//! let config = DetectionConfig::default();
//! let refs = ReferenceBank::build(&bank.category, &bank.samples, &config)?;
//! let result = detect(&load_sample("query.json")?, &refs, &config)?;
//! println!("{}", result.image_score);
//! # Ok(())
//! # }
//! ```

pub mod error;
pub mod evaluation;
pub mod grid;
pub mod logical;
pub mod numerics;
pub mod pipeline;
pub mod segmenter;
pub mod structural;
pub mod synth;
pub mod tensor_store;

pub use error::{Error, Result};
pub use evaluation::{emit_outputs, evaluate_dataset, roc_auc, EvalRecord, EvalReport, PixelRecord};
pub use grid::{FeatureMap, Mask, Matrix, RgbImage, ScoreMap};
pub use pipeline::{
    apply_adapter, detect, image_score, AdapterWeights, DetectionConfig, DetectionResult, ImageScoreMode,
    MapNormalization, ReferenceBank,
};
pub use segmenter::{ComponentKey, ComponentMaskSet, SegmentBranch, SegmenterConfig};
pub use tensor_store::{load_bank, load_sample, read_tensor, write_sample, write_tensor, Sample, Tensor};
