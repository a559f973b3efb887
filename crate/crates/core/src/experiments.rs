//! Full dual-pass evaluations and the sweep grids built on them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{l2_normalize, EmbeddingMatrix, KeyedDump, ScoreMatrix};
use crate::error::{Error, Result};
use crate::matching::{mean_average_precision, BBox, RankedHit, DEFAULT_IOU_THRESHOLD};
use crate::metrics::{
    negative_capture_stats, top1_accuracy, EvalReport, Measure, MeasureReport, OutcomeCounts,
    ReportMetadata, DEFAULT_HISTOGRAM_BINS, REPORT_SCHEMA_VERSION,
};
use crate::negatives::{random_embeddings_with_fit, zero_embedding, NegativeKind, NegativeSpec};
use crate::protocol::{
    build_plan, label_classification, label_detection, DatasetManifest, ImageDecision,
    ImageDetections, Outcome, Pass, PlanFile, Predicted, PredictionOutcome, ScoredDetection, Task,
};
use crate::similarity::{classify, raw_cosines, Head, SimilarityRow, Verdict, DEFAULT_TEMPERATURE};

/// Seed streams for [`derive_seed`].
pub mod streams {
    pub const NEGATIVES: u64 = 1;
    pub const QUERY_SUBSET: u64 = 2;
    pub const SYNTH: u64 = 3;
    pub const REPLICATE: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Expands one run seed into independent per-purpose seeds:
/// `splitmix64(splitmix64(base ^ splitmix64(stream)) ^ index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)) ^ index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub temperature: f64,
    pub head: Head,
    pub iou_threshold: f64,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            head: Head::Softmax,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Parameter(format!("IoU threshold {} not in (0, 1]", self.iou_threshold)));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Parameter("histogram needs at least one bin".into()));
        }
        Ok(())
    }
}

/// Embedding-mode model output: one image (or proposal) embedding per row,
/// plus query label embeddings. Any query subset can be re-scored.
#[derive(Debug, Clone)]
pub struct EmbeddingSource {
    images: EmbeddingMatrix,
    rows_by_image: HashMap<String, Vec<usize>>,
    boxes: Vec<Option<BBox>>,
    covered: HashSet<String>,
    queries: EmbeddingMatrix,
    query_rows: HashMap<String, usize>,
}

impl EmbeddingSource {
    /// `images` sidecar ids (or `image_id` fields, for proposals) name the
    /// image of each row; `queries` sidecar ids are label strings.
    pub fn new(images: KeyedDump, queries: KeyedDump) -> Result<Self> {
        let mut rows_by_image: HashMap<String, Vec<usize>> = HashMap::new();
        let mut boxes = vec![None; images.matrix.count()];
        let mut covered = HashSet::new();
        for r in &images.records {
            let image = r.image_id.clone().unwrap_or_else(|| r.id.clone());
            if r.missing {
                continue;
            }
            covered.insert(image.clone());
            if let Some(row) = r.row {
                let row = row as usize;
                if let Some(b) = r.bbox {
                    boxes[row] = Some(BBox::try_from(b)?);
                }
                rows_by_image.entry(image).or_default().push(row);
            }
        }
        rows_by_image.values_mut().for_each(|v| v.sort_unstable());
        let queries_matrix = if queries.matrix.is_normalized() {
            queries.matrix
        } else {
            l2_normalize(&queries.matrix)
        };
        let mut query_rows = HashMap::new();
        for (row, r) in queries.records.iter().filter_map(|r| r.row.map(|i| (i as usize, r))) {
            if query_rows.insert(r.id.clone(), row).is_some() {
                return Err(Error::Consistency(format!("label {:?} encoded twice", r.id)));
            }
        }
        Ok(Self {
            images: images.matrix,
            rows_by_image,
            boxes,
            covered,
            queries: queries_matrix,
            query_rows,
        })
    }

    pub fn from_matrices(
        images: EmbeddingMatrix,
        image_ids: &[String],
        queries: EmbeddingMatrix,
        labels: &[String],
    ) -> Result<Self> {
        use crate::embedding_store::SidecarRecord;
        let img = KeyedDump::new(
            images,
            image_ids.iter().enumerate().map(|(i, id)| SidecarRecord::row(i, id.clone())).collect(),
        )?;
        let q = KeyedDump::new(
            queries,
            labels.iter().enumerate().map(|(i, l)| SidecarRecord::row(i, l.clone())).collect(),
        )?;
        Self::new(img, q)
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    /// Query embeddings for `labels`, in that order.
    pub fn queries_for(&self, labels: &[String]) -> Result<EmbeddingMatrix> {
        let mut missing = Vec::new();
        let idx: Vec<usize> = labels
            .iter()
            .filter_map(|l| {
                let r = self.query_rows.get(l).copied();
                if r.is_none() {
                    missing.push(l.clone());
                }
                r
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::Coverage {
                what: "query embeddings".into(),
                missing,
            });
        }
        if self.queries.dim() != self.images.dim() {
            return Err(Error::Shape(format!(
                "query dim {} != image dim {}",
                self.queries.dim(),
                self.images.dim()
            )));
        }
        Ok(self.queries.select(&idx))
    }
}

#[derive(Debug, Clone)]
pub struct ScoreEntry {
    pub scores: ScoreMatrix,
    /// One box per row for detection.
    pub boxes: Option<Vec<BBox>>,
}

/// Score-mode model output: one score matrix per (image, pass), columns in
/// the plan's query order followed by negative slots.
#[derive(Debug, Clone, Default)]
pub struct ScoreSource {
    entries: HashMap<(String, Pass), ScoreEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexLine {
    image_id: String,
    pass: Pass,
    dump: String,
}

impl ScoreSource {
    pub fn insert(&mut self, image_id: impl Into<String>, pass: Pass, entry: ScoreEntry) {
        self.entries.insert((image_id.into(), pass), entry);
    }

    pub fn get(&self, image_id: &str, pass: Pass) -> Option<&ScoreEntry> {
        self.entries.get(&(image_id.to_string(), pass))
    }

    /// Reads a JSON-lines index of `{"image_id", "pass", "dump"}`; dump
    /// paths are relative to the index file. Row sidecars carry boxes.
    pub fn load_index(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut text = String::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_string(&mut text))
            .map_err(|e| Error::file(path, e))?;
        let mut src = Self::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: IndexLine = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("index line {}: {e}", n + 1)))?;
            let dump = KeyedDump::load(base.join(&l.dump))?;
            let mut boxes = Vec::new();
            for (_, r) in dump.row_records() {
                if let Some(b) = r.bbox {
                    boxes.push(BBox::try_from(b)?);
                }
            }
            let rows = dump.matrix.count();
            let boxes = match boxes.len() {
                0 => None,
                n if n == rows => Some(boxes),
                n => {
                    return Err(Error::Consistency(format!(
                        "{}: {n} boxes for {rows} rows",
                        l.dump
                    )))
                }
            };
            src.insert(
                l.image_id,
                l.pass,
                ScoreEntry {
                    scores: ScoreMatrix::from(dump.matrix),
                    boxes,
                },
            );
        }
        Ok(src)
    }

    /// Writes an index plus one dump per entry into `dir`.
    pub fn save_index(&self, dir: &Path) -> Result<()> {
        use crate::embedding_store::SidecarRecord;
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut keys: Vec<&(String, Pass)> = self.entries.keys().collect();
        keys.sort();
        let mut index = Vec::new();
        for (n, key) in keys.into_iter().enumerate() {
            let e = &self.entries[key];
            let name = format!("scores_{n:06}.osvd");
            let records = (0..e.scores.rows())
                .map(|r| SidecarRecord {
                    row: Some(r as u64),
                    id: format!("{}/{r}", key.0),
                    image_id: Some(key.0.clone()),
                    bbox: e.boxes.as_ref().map(|b| b[r].into()),
                    missing: false,
                })
                .collect();
            KeyedDump::new(e.scores.clone().into_matrix(), records)?.save(dir.join(&name))?;
            index.push(IndexLine {
                image_id: key.0.clone(),
                pass: key.1,
                dump: name,
            });
        }
        let p = dir.join("index.jsonl");
        let mut f = File::create(&p).map_err(|e| Error::file(&p, e))?;
        for l in index {
            writeln!(f, "{}", serde_json::to_string(&l)?).map_err(|e| Error::file(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum ModelOutputs {
    Embeddings(EmbeddingSource),
    Scores(ScoreSource),
}

/// Turns a negative spec into concrete negative embeddings.
///
/// Word kinds take the first `count` rows of `word_dump`. Gaussian
/// negatives are fitted to the embeddings of `classes`.
pub fn materialize_negatives(
    spec: &NegativeSpec,
    source: &EmbeddingSource,
    classes: &[String],
    word_dump: Option<&EmbeddingMatrix>,
) -> Result<(Option<EmbeddingMatrix>, NegativeSpec)> {
    spec.validate()?;
    let mut recorded = spec.clone();
    let m = match spec.kind {
        NegativeKind::None => None,
        NegativeKind::ZeroEmbedding => Some(zero_embedding(source.dim())?),
        NegativeKind::RandomEmbeddings => {
            let queries = source.queries_for(classes)?;
            let (m, fit) = random_embeddings_with_fit(&queries, spec.count, spec.seed)?;
            recorded.fitted_mean = Some(fit.mean);
            recorded.fitted_std = Some(fit.std);
            Some(m)
        }
        NegativeKind::SimpleWord | NegativeKind::RandomWords => {
            let dump = word_dump.ok_or_else(|| Error::Coverage {
                what: "encoded negative words".into(),
                missing: vec![format!("{} rows", spec.count)],
            })?;
            if dump.count() < spec.count {
                return Err(Error::Coverage {
                    what: "encoded negative words".into(),
                    missing: vec![format!("rows {}..{}", dump.count(), spec.count)],
                });
            }
            let m = dump.prefix(spec.count)?;
            Some(if m.is_normalized() { m } else { l2_normalize(&m) })
        }
    };
    Ok((m, recorded))
}

/// Outcomes of both passes.
#[derive(Debug, Clone, Default)]
pub struct PassOutcomes {
    pub closed: Vec<PredictionOutcome>,
    pub open: Vec<PredictionOutcome>,
}

impl PassOutcomes {
    pub fn all(&self) -> impl Iterator<Item = &PredictionOutcome> {
        self.closed.iter().chain(&self.open)
    }
}

fn to_predicted(v: Verdict, query: &[String]) -> Predicted {
    match v {
        Verdict::Class(i) => Predicted::Label(query[i].clone()),
        Verdict::RejectedAsNegative(n) => Predicted::Rejected(n),
    }
}

type ScoredRow = (Predicted, crate::similarity::UncertaintyTriple, Option<BBox>);

struct Job<'a> {
    image_id: &'a str,
    pass: Pass,
    query: &'a [String],
    /// Indices of `query` within the closed query list.
    query_idx: Vec<usize>,
}

fn jobs<'a>(plan: &'a PlanFile, pass: Pass, class_pos: &HashMap<&str, usize>) -> Vec<Job<'a>> {
    plan.images
        .iter()
        .filter(|i| match pass {
            Pass::Closed => i.closed,
            Pass::Open => i.open,
        })
        .map(|i| {
            let query: &[String] = match pass {
                Pass::Closed => &plan.closed_query,
                Pass::Open => &i.open_query,
            };
            Job {
                image_id: &i.image_id,
                pass,
                query,
                query_idx: query.iter().map(|l| class_pos[l.as_str()]).collect(),
            }
        })
        .collect()
}

fn check_coverage(plan: &PlanFile, outputs: &ModelOutputs) -> Result<()> {
    let mut missing = Vec::new();
    for img in &plan.images {
        match outputs {
            ModelOutputs::Embeddings(src) => {
                let ok = match plan.task {
                    Task::Classification => src.rows_by_image.get(&img.image_id).map(Vec::len) == Some(1),
                    Task::Detection => src.covered.contains(&img.image_id),
                };
                if !ok && (img.closed || img.open) {
                    missing.push(img.image_id.clone());
                }
            }
            ModelOutputs::Scores(src) => {
                if img.closed && src.get(&img.image_id, Pass::Closed).is_none() {
                    missing.push(format!("{} (closed)", img.image_id));
                }
                if img.open && src.get(&img.image_id, Pass::Open).is_none() {
                    missing.push(format!("{} (open)", img.image_id));
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Coverage {
            what: "model outputs".into(),
            missing,
        })
    }
}

/// Scores and labels every planned (image, pass) pair.
pub fn run_passes(
    plan: &PlanFile,
    manifest: &DatasetManifest,
    outputs: &ModelOutputs,
    negatives: Option<&EmbeddingMatrix>,
    config: &EvalConfig,
) -> Result<PassOutcomes> {
    config.validate()?;
    plan.check_against(manifest)?;
    check_coverage(plan, outputs)?;
    let class_pos: HashMap<&str, usize> = plan
        .closed_query
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let neg_count = match outputs {
        ModelOutputs::Embeddings(_) => negatives.map_or(0, EmbeddingMatrix::count),
        ModelOutputs::Scores(_) => plan.negatives.count,
    };
    let closed_queries = match outputs {
        ModelOutputs::Embeddings(src) => Some(src.queries_for(&plan.closed_query)?),
        ModelOutputs::Scores(_) => None,
    };

    let decide = |scores: Vec<f32>, negs: &[f32], q: usize| -> Result<crate::similarity::PredictionDecision> {
        let row = SimilarityRow::new(scores, q)?.with_negatives(negs)?;
        classify(&row, config.temperature, config.head)
    };

    // (image_id, per-row (decision, box)) for one pass
    let score_pass = |pass: Pass| -> Result<Vec<(String, Vec<ScoredRow>)>> {
        jobs(plan, pass, &class_pos)
            .par_iter()
            .map(|job| {
                let rows = match outputs {
                    ModelOutputs::Embeddings(src) => {
                        let cq = closed_queries.as_ref().expect("embedding mode");
                        let img_rows = src.rows_by_image.get(job.image_id).map(Vec::as_slice).unwrap_or(&[]);
                        img_rows
                            .iter()
                            .map(|&r| {
                                let emb = src.images.row(r);
                                let full = raw_cosines(emb, cq)?;
                                let negs = match negatives {
                                    Some(n) => raw_cosines(emb, n)?,
                                    None => Vec::new(),
                                };
                                let sub: Vec<f32> = job.query_idx.iter().map(|&i| full[i]).collect();
                                let d = decide(sub, &negs, job.query.len())?;
                                Ok((to_predicted(d.verdict, job.query), d.uncertainty, src.boxes[r]))
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                    ModelOutputs::Scores(src) => {
                        let e = src.get(job.image_id, job.pass).expect("coverage checked");
                        let q = job.query.len();
                        if e.scores.cols() != q + neg_count {
                            return Err(Error::Shape(format!(
                                "image {} {:?} pass: {} score columns, expected {} queries + {} negatives",
                                job.image_id,
                                job.pass,
                                e.scores.cols(),
                                q,
                                neg_count
                            )));
                        }
                        (0..e.scores.rows())
                            .map(|r| {
                                let s = e.scores.row(r);
                                let d = decide(s[..q].to_vec(), &s[q..], q)?;
                                let b = e.boxes.as_ref().map(|b| b[r]);
                                Ok((to_predicted(d.verdict, job.query), d.uncertainty, b))
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                };
                Ok((job.image_id.to_string(), rows))
            })
            .collect()
    };

    let mut out = PassOutcomes::default();
    for pass in [Pass::Closed, Pass::Open] {
        let scored = score_pass(pass)?;
        let labelled = match plan.task {
            Task::Classification => {
                let decisions = scored
                    .into_iter()
                    .map(|(image_id, mut rows)| {
                        if rows.len() != 1 {
                            return Err(Error::Consistency(format!(
                                "classification image {image_id} has {} predictions",
                                rows.len()
                            )));
                        }
                        let (predicted, uncertainty, _) = rows.pop().unwrap();
                        Ok(ImageDecision {
                            image_id,
                            predicted,
                            uncertainty,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                label_classification(&decisions, manifest, pass)?
            }
            Task::Detection => {
                let dets = scored
                    .into_iter()
                    .map(|(image_id, rows)| {
                        let detections = rows
                            .into_iter()
                            .map(|(predicted, uncertainty, b)| {
                                let bbox = b.ok_or_else(|| {
                                    Error::Consistency(format!("detection in image {image_id} has no box"))
                                })?;
                                Ok(ScoredDetection {
                                    bbox,
                                    predicted,
                                    uncertainty,
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(ImageDetections {
                            image_id,
                            detections,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                label_detection(&dets, manifest, pass, config.iou_threshold)?
            }
        };
        match pass {
            Pass::Closed => out.closed = labelled,
            Pass::Open => out.open = labelled,
        }
    }
    Ok(out)
}

/// Builds the metric bundle from labelled outcomes.
pub fn build_report(
    plan: &PlanFile,
    manifest: &DatasetManifest,
    outcomes: &PassOutcomes,
    negatives: &NegativeSpec,
    negative_count: usize,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let counts = OutcomeCounts::tally(&outcomes.closed);
    let open_counts = OutcomeCounts::tally(&outcomes.open);
    let counts = OutcomeCounts {
        ose: open_counts.ose,
        open_rejected: open_counts.open_rejected,
        ..counts
    };
    let closed_images = plan.images.iter().filter(|i| i.closed).count();
    let open_images = plan.images.iter().filter(|i| i.open).count();

    let (accuracy, map) = match plan.task {
        Task::Classification => (
            (!outcomes.closed.is_empty()).then(|| top1_accuracy(&outcomes.closed)).transpose()?,
            None,
        ),
        Task::Detection => {
            let index = manifest.class_index();
            let mut hits = vec![Vec::new(); manifest.classes.len()];
            for o in &outcomes.closed {
                if let Predicted::Label(l) = &o.predicted {
                    hits[index[l.as_str()]].push(RankedHit {
                        confidence: o.confidence(),
                        is_tp: o.outcome == Outcome::Tp,
                    });
                }
            }
            let gt = manifest.gt_counts();
            let map = if gt.iter().any(|&n| n > 0) {
                Some(mean_average_precision(&hits, &gt)?)
            } else {
                None
            };
            (None, map)
        }
    };

    let measures = Measure::ALL
        .iter()
        .map(|&m| {
            let tp: Vec<f64> = outcomes
                .closed
                .iter()
                .filter(|o| o.outcome == Outcome::Tp)
                .map(|o| m.of(&o.uncertainty))
                .collect();
            let ose: Vec<f64> = outcomes
                .open
                .iter()
                .filter(|o| o.outcome == Outcome::Ose)
                .map(|o| m.of(&o.uncertainty))
                .collect();
            MeasureReport::compute(m, &tp, &ose, config.histogram_bins)
        })
        .collect::<Result<Vec<_>>>()?;

    let negative_capture = if negative_count > 0 {
        let all: Vec<PredictionOutcome> = outcomes.all().cloned().collect();
        Some(negative_capture_stats(&all, negative_count)?)
    } else {
        None
    };

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        task: plan.task,
        tp_count: counts.tp,
        ose_count: counts.ose,
        counts,
        closed_images,
        open_images,
        accuracy,
        map,
        measures,
        negative_capture,
        metadata: ReportMetadata {
            temperature: config.temperature,
            head: config.head,
            iou_threshold: (plan.task == Task::Detection).then_some(config.iou_threshold),
            negatives: negatives.clone(),
            negative_rows_normalized: negatives.kind == NegativeKind::RandomEmbeddings,
            aupr_rule: "trapezoid over recall, anchored at recall 0 with the first point's precision".into(),
            summary_rule: "best value over curve points meeting the 0.95 target; null when none".into(),
            config: serde_json::Value::Null,
        },
    })
}

/// Runs both passes and computes the full report.
pub fn full_eval(
    plan: &PlanFile,
    manifest: &DatasetManifest,
    outputs: &ModelOutputs,
    negatives: Option<&EmbeddingMatrix>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    full_eval_with_outcomes(plan, manifest, outputs, negatives, config).map(|(r, _)| r)
}

pub fn full_eval_with_outcomes(
    plan: &PlanFile,
    manifest: &DatasetManifest,
    outputs: &ModelOutputs,
    negatives: Option<&EmbeddingMatrix>,
    config: &EvalConfig,
) -> Result<(EvalReport, PassOutcomes)> {
    let outcomes = run_passes(plan, manifest, outputs, negatives, config)?;
    let neg_count = match outputs {
        ModelOutputs::Embeddings(_) => negatives.map_or(0, EmbeddingMatrix::count),
        ModelOutputs::Scores(_) => plan.negatives.count,
    };
    let report = build_report(plan, manifest, &outcomes, &plan.negatives, neg_count, config)?;
    Ok((report, outcomes))
}

/// Convenience wrapper for embedding mode: builds the plan, materialises
/// the negatives and evaluates.
pub fn evaluate_embeddings(
    manifest: &DatasetManifest,
    source: &EmbeddingSource,
    negatives: &NegativeSpec,
    word_dump: Option<&EmbeddingMatrix>,
    config: &EvalConfig,
) -> Result<(EvalReport, PassOutcomes)> {
    let (neg, recorded) = materialize_negatives(negatives, source, &manifest.classes, word_dump)?;
    let plan = build_plan(manifest, &recorded)?;
    full_eval_with_outcomes(&plan, manifest, &ModelOutputs::Embeddings(source.clone()), neg.as_ref(), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip)]
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub value: usize,
    pub runs: Vec<SeedRun>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation; present with two or more seeds.
    pub std: Option<BTreeMap<String, f64>>,
}

/// Flat scalar summary of a report, keyed by metric name.
pub fn summarize(report: &EvalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("tp_count".to_string(), report.tp_count as f64);
    m.insert("ose_count".to_string(), report.ose_count as f64);
    m.insert("fp_closed".to_string(), report.counts.fp_closed as f64);
    m.insert("closed_rejected".to_string(), report.counts.closed_rejected as f64);
    m.insert("open_rejected".to_string(), report.counts.open_rejected as f64);
    if let Some(a) = report.accuracy {
        m.insert("accuracy".to_string(), a);
    }
    if let Some(map) = &report.map {
        m.insert("map".to_string(), map.map);
    }
    for r in &report.measures {
        let name = r.measure.name();
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                m.insert(format!("{k}_{name}"), v);
            }
        };
        put("aupr", r.aupr);
        put("auroc", r.auroc);
        put("p_at_95r", r.p_at_95r);
        put("r_at_95p", r.r_at_95p);
    }
    m
}

fn aggregate(axis: &str, value: usize, runs: Vec<SeedRun>) -> SweepResult {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        for (k, v) in &r.metrics {
            values.entry(k.clone()).or_default().push(*v);
        }
    }
    let mean = values
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect::<BTreeMap<_, _>>();
    let std = (runs.len() >= 2).then(|| {
        values
            .iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(k, v)| {
                let mu = mean[k];
                let ss: f64 = v.iter().map(|x| (x - mu).powi(2)).sum();
                (k.clone(), (ss / (v.len() - 1) as f64).sqrt())
            })
            .collect()
    });
    SweepResult {
        axis: axis.to_string(),
        value,
        runs,
        mean,
        std,
    }
}

fn check_axis(values: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Parameter("sweep axis is empty".into()));
    }
    let mut seen = HashSet::new();
    for v in values {
        if !seen.insert(v) {
            return Err(Error::Parameter(format!("axis value {v} repeated")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepNegativeKind {
    RandomWords,
    RandomEmbeddings,
}

/// One full evaluation per negative count and seed.
///
/// Random-word runs use the first `count` rows of `word_dump`; Gaussian runs
/// draw from one stream per seed, so smaller counts are prefixes of larger ones.
pub fn sweep_negatives(
    manifest: &DatasetManifest,
    source: &EmbeddingSource,
    kind: SweepNegativeKind,
    counts: &[usize],
    seeds: &[u64],
    word_dump: Option<&EmbeddingMatrix>,
    config: &EvalConfig,
) -> Result<Vec<SweepResult>> {
    check_axis(counts)?;
    if seeds.is_empty() {
        return Err(Error::Parameter("at least one seed is required".into()));
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    if kind == SweepNegativeKind::RandomWords {
        let have = word_dump.map_or(0, EmbeddingMatrix::count);
        if have < max {
            return Err(Error::Coverage {
                what: "encoded negative words".into(),
                missing: vec![format!("rows {have}..{max}")],
            });
        }
    }
    let points: Vec<(usize, u64)> = counts
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<SeedRun> = points
        .par_iter()
        .map(|&(count, seed)| {
            let spec = match (count, kind) {
                (0, _) => NegativeSpec::none(),
                (n, SweepNegativeKind::RandomWords) => NegativeSpec::new(NegativeKind::RandomWords, n, seed)?,
                (n, SweepNegativeKind::RandomEmbeddings) => {
                    NegativeSpec::new(NegativeKind::RandomEmbeddings, n, seed)?
                }
            };
            let (report, _) = evaluate_embeddings(manifest, source, &spec, word_dump, config)?;
            Ok(SeedRun {
                seed,
                metrics: summarize(&report),
                report: Some(report),
            })
        })
        .collect::<Result<_>>()?;
    Ok(group_runs("negatives", counts, seeds.len(), runs))
}

fn group_runs(axis: &str, values: &[usize], per: usize, runs: Vec<SeedRun>) -> Vec<SweepResult> {
    let mut it = runs.into_iter();
    values
        .iter()
        .map(|&v| aggregate(axis, v, it.by_ref().take(per).collect()))
        .collect()
}

/// Manifest restricted to `classes` (kept in dataset order) and the images
/// whose labels are among them or among the open classes.
pub fn restrict_manifest(manifest: &DatasetManifest, class_idx: &[usize]) -> DatasetManifest {
    let classes: Vec<String> = class_idx.iter().map(|&i| manifest.classes[i].clone()).collect();
    let keep: HashSet<&str> = classes
        .iter()
        .chain(&manifest.open_classes)
        .map(String::as_str)
        .collect();
    DatasetManifest {
        dataset_id: manifest.dataset_id.clone(),
        task: manifest.task,
        classes: classes.clone(),
        open_classes: manifest.open_classes.clone(),
        images: manifest
            .images
            .iter()
            .filter(|img| img.gt_labels.iter().all(|l| keep.contains(l.as_str())))
            .cloned()
            .collect(),
    }
}

/// Uniform class subset of `size` out of `k`, sorted into dataset order.
pub fn sample_class_subset(k: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::QUERY_SUBSET, size as u64));
    let mut idx = rand::seq::index::sample(&mut rng, k, size).into_vec();
    idx.sort_unstable();
    idx
}

/// Evaluates random class subsets of each size, once per seed.
pub fn sweep_query_size(
    manifest: &DatasetManifest,
    source: &EmbeddingSource,
    sizes: &[usize],
    seeds: &[u64],
    config: &EvalConfig,
) -> Result<Vec<SweepResult>> {
    check_axis(sizes)?;
    if seeds.is_empty() {
        return Err(Error::Parameter("at least one seed is required".into()));
    }
    if manifest.task != Task::Classification {
        return Err(Error::Parameter("query-size sweeps need a classification manifest".into()));
    }
    let k = manifest.classes.len();
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > k) {
        return Err(Error::Parameter(format!("query size {s} outside 1..={k}")));
    }
    let points: Vec<(usize, u64)> = sizes
        .iter()
        .flat_map(|&z| seeds.iter().map(move |&s| (z, s)))
        .collect();
    let runs: Vec<SeedRun> = points
        .par_iter()
        .map(|&(size, seed)| {
            let subset = sample_class_subset(k, size, seed);
            let restricted = restrict_manifest(manifest, &subset);
            let (report, _) =
                evaluate_embeddings(&restricted, source, &NegativeSpec::none(), None, config)?;
            Ok(SeedRun {
                seed,
                metrics: summarize(&report),
                report: Some(report),
            })
        })
        .collect::<Result<_>>()?;
    Ok(group_runs("query_size", sizes, seeds.len(), runs))
}

/// Long-form CSV: `axis,axis_value,seed,metric,value`.
pub fn write_sweep_csv<W: Write>(results: &[SweepResult], mut sink: W) -> Result<()> {
    let io = |source| Error::Io { offset: 0, source };
    writeln!(sink, "axis,axis_value,seed,metric,value").map_err(io)?;
    for r in results {
        for run in &r.runs {
            for (k, v) in &run.metrics {
                writeln!(sink, "{},{},{},{},{}", r.axis, r.value, run.seed, k, crate::metrics::format_float(*v))
                    .map_err(io)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, WorldSpec};

    fn world_source(w: &crate::synth::World) -> EmbeddingSource {
        EmbeddingSource::from_matrices(w.images.clone(), &w.image_ids, w.queries.clone(), &w.manifest.classes)
            .unwrap()
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_index() {
        let a = derive_seed(7, streams::NEGATIVES, 0);
        assert_ne!(a, derive_seed(7, streams::NEGATIVES, 1));
        assert_ne!(a, derive_seed(7, streams::QUERY_SUBSET, 0));
        assert_ne!(a, derive_seed(8, streams::NEGATIVES, 0));
        assert_eq!(a, derive_seed(7, streams::NEGATIVES, 0));
    }

    #[test]
    fn open_pass_never_yields_tp() {
        let w = generate_world(&WorldSpec::separable(4, 1, 8, 5, 3)).unwrap();
        let (report, out) =
            evaluate_embeddings(&w.manifest, &world_source(&w), &NegativeSpec::none(), None, &EvalConfig::default())
                .unwrap();
        assert!(out.open.iter().all(|o| o.outcome == Outcome::Ose));
        assert_eq!(report.tp_count, 20);
        assert_eq!(report.ose_count, 25);
        assert_eq!(report.accuracy, Some(1.0));
    }

    #[test]
    fn missing_rows_are_coverage_errors() {
        let w = generate_world(&WorldSpec::separable(3, 0, 8, 2, 3)).unwrap();
        let n = w.images.count() - 1;
        let src = EmbeddingSource::from_matrices(
            w.images.prefix(n).unwrap(),
            &w.image_ids[..n],
            w.queries.clone(),
            &w.manifest.classes,
        )
        .unwrap();
        let err = evaluate_embeddings(&w.manifest, &src, &NegativeSpec::none(), None, &EvalConfig::default())
            .unwrap_err();
        match err {
            Error::Coverage { missing, .. } => assert_eq!(missing, vec![w.image_ids[n].clone()]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn word_negatives_need_enough_rows() {
        let w = generate_world(&WorldSpec::separable(3, 0, 8, 2, 3)).unwrap();
        let src = world_source(&w);
        let words = crate::negatives::zero_embedding(8).unwrap();
        let err = sweep_negatives(
            &w.manifest,
            &src,
            SweepNegativeKind::RandomWords,
            &[0, 2],
            &[1],
            Some(&words),
            &EvalConfig::default(),
        );
        assert!(matches!(err, Err(Error::Coverage { .. })));
    }

    #[test]
    fn repeated_axis_value_rejected() {
        let w = generate_world(&WorldSpec::separable(3, 0, 8, 2, 3)).unwrap();
        let err = sweep_query_size(&w.manifest, &world_source(&w), &[2, 2], &[1], &EvalConfig::default());
        assert!(matches!(err, Err(Error::Parameter(_))));
        let err = sweep_query_size(&w.manifest, &world_source(&w), &[4], &[1], &EvalConfig::default());
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn subset_sampling_is_sorted_and_complete_at_k() {
        assert_eq!(sample_class_subset(5, 5, 9), vec![0, 1, 2, 3, 4]);
        let s = sample_class_subset(100, 10, 9);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_class_subset(100, 10, 9));
    }

    #[test]
    fn score_mode_matches_embedding_mode() {
        let w = generate_world(&WorldSpec::separable(4, 1, 8, 3, 21)).unwrap();
        let src = world_source(&w);
        let plan = build_plan(&w.manifest, &NegativeSpec::none()).unwrap();
        let cfg = EvalConfig::default();
        let emb = full_eval(&plan, &w.manifest, &ModelOutputs::Embeddings(src.clone()), None, &cfg).unwrap();

        let mut scores = ScoreSource::default();
        for (i, img) in plan.images.iter().enumerate() {
            let e = w.images.row(i);
            for (pass, query, on) in [
                (Pass::Closed, &plan.closed_query, img.closed),
                (Pass::Open, &img.open_query, img.open),
            ] {
                if !on {
                    continue;
                }
                let q = src.queries_for(query).unwrap();
                let s = raw_cosines(e, &q).unwrap();
                scores.insert(
                    img.image_id.clone(),
                    pass,
                    ScoreEntry { scores: ScoreMatrix::new(1, s.len(), s).unwrap(), boxes: None },
                );
            }
        }
        let sc = full_eval(&plan, &w.manifest, &ModelOutputs::Scores(scores), None, &cfg).unwrap();
        assert_eq!(emb, sc);
    }
}
