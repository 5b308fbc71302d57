//! Factor-level representation engineering for composed emotions.
//!
//! The crate covers the full analysis path from contrastive corpora to causal
//! interventions:
//!
//! - [`actstore`]: activation sets and the `ACF1` binary capture format.
//! - [`corpus`]: atomic contrastive pairs, slot-filled vignettes, the
//!   rule-based jealousy label map and pair-level folds.
//! - [`toynet`]: a deterministic toy backend with planted concept directions.
//! - [`extract`]: LAT framing, mean-difference concept vectors and layer scans.
//! - [`purify`]: null-space projection against confounder directions.
//! - [`weighting`]: projection scores, z-scoring, per-layer OLS with p-values.
//! - [`intervene`]: stimulation, suppression and orthogonal knockout.
//! - [`pipeline`]: phase drivers that chain the modules above on the toy backend.
//!
//! Shared value types are re-exported at the crate root.

pub mod actstore;
pub mod bundle;
pub mod corpus;
mod error;
pub mod extract;
pub mod factor;
pub mod intervene;
pub mod linalg;
pub mod pipeline;
pub mod purify;
pub mod report;
pub mod rng;
pub mod stats;
pub mod toynet;
pub mod weighting;

pub use actstore::{ActivationSet, LayerView, Polarity, RecordMeta};
pub use bundle::VectorBundle;
pub use corpus::{ContrastivePair, FoldAssignment, TemplateBank, Vignette};
pub use error::{Error, Result};
pub use extract::{ConceptVector, LatTemplate, LayerScanReport};
pub use factor::Factor;
pub use intervene::{InterventionResult, InterventionScan, Mode, ScanCell, ScanPlan, SteeringConfig};
pub use purify::PurifiedVector;
pub use toynet::{ToyModel, ToyModelConfig};
pub use weighting::{LayerSweep, RegressionReport, ScoreTable};
