//! Open-set evaluation of vision-language classifiers and detectors.
//!
//! Every test image is scored twice: once against the full label set, where
//! correct predictions are true positives, and once with its own labels
//! removed, where anything accepted is an open-set error. Uncertainty scores
//! from both passes feed precision-recall and ROC summaries.

pub mod embedding_store;
pub mod error;
pub mod experiments;
pub mod matching;
pub mod metrics;
pub mod negatives;
pub mod protocol;
pub mod similarity;
pub mod synth;

pub use embedding_store::{EmbeddingMatrix, KeyedDump, ScoreMatrix, SidecarRecord};
pub use error::{Error, Result};
pub use experiments::{EmbeddingSource, EvalConfig, ModelOutputs, ScoreSource};
pub use metrics::{EvalReport, Measure};
pub use negatives::{NegativeKind, NegativeSpec};
pub use protocol::{DatasetManifest, Pass, PlanFile, Task};
pub use similarity::Head;
