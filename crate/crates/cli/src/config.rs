use std::fs;
use std::path::{Path, PathBuf};

use osr_eval::{Error, Head, NegativeKind, Result, Task};
use serde::{Deserialize, Serialize};

/// Every knob a run can take. Loaded from `--config`, then overridden by
/// flags; the resolved value is stored in each report's metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<Head>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram_bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<NegativeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::File {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("config {}: {e}", path.display())))
    }

    /// Fields set in `over` win.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            task, manifest, plan, images, queries, scores, words, out, temperature, head, iou_threshold,
            histogram_bins, negatives, negative_count, query_sizes, counts, seeds, seed, workers
        )
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Parameter(format!("temperature {t} must be positive")));
            }
        }
        if let Some(t) = self.iou_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Parameter(format!("IoU threshold {t} not in (0, 1]")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Parameter("--workers must be at least 1".into()));
        }
        if self.seeds == Some(0) {
            return Err(Error::Parameter("--seeds must be at least 1".into()));
        }
        if self.histogram_bins == Some(0) {
            return Err(Error::Parameter("histogram needs at least one bin".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn require<'a, T>(&self, field: &'a Option<T>, flag: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| Error::Parameter(format!("missing --{flag} (flag or config)")))
    }
}
