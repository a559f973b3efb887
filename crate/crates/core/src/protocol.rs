//! Dual-pass test protocol.
//!
//! Every image is tested twice: once against all dataset classes (closed
//! pass) and once against the classes it does not contain (open pass).
//! Closed-pass hits are true positives; anything the open pass accepts is
//! an open-set error, because no class in its query set is present.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{assign_detections, BBox, Detection, GroundTruth};
use crate::negatives::NegativeSpec;
use crate::similarity::UncertaintyTriple;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub gt_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<GtBox>>,
}

/// Class list plus per-image ground truth.
///
/// `open_classes` names classes that occur in images but are never part of
/// any query set. Images labelled only with such classes are tested in the
/// open pass alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub dataset_id: String,
    pub task: Task,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub open_classes: Vec<String>,
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut known = HashSet::new();
        for c in &self.classes {
            if !known.insert(c.as_str()) {
                return Err(Error::Consistency(format!("duplicate class label {c:?}")));
            }
        }
        let mut open = HashSet::new();
        for c in &self.open_classes {
            if known.contains(c.as_str()) || !open.insert(c.as_str()) {
                return Err(Error::Consistency(format!(
                    "open class {c:?} is duplicated or also a query class"
                )));
            }
        }
        let mut ids = HashSet::new();
        for img in &self.images {
            if !ids.insert(img.image_id.as_str()) {
                return Err(Error::Consistency(format!("duplicate image id {:?}", img.image_id)));
            }
            for l in &img.gt_labels {
                if !known.contains(l.as_str()) && !open.contains(l.as_str()) {
                    return Err(Error::Consistency(format!(
                        "image {:?} has unknown label {l:?}",
                        img.image_id
                    )));
                }
            }
            let unique: HashSet<&str> = img.gt_labels.iter().map(String::as_str).collect();
            if unique.len() != img.gt_labels.len() {
                return Err(Error::Consistency(format!(
                    "image {:?} repeats a ground-truth label",
                    img.image_id
                )));
            }
            match self.task {
                Task::Classification => {
                    if img.gt_labels.len() != 1 || img.gt_boxes.is_some() {
                        return Err(Error::Consistency(format!(
                            "classification image {:?} needs exactly one label and no boxes",
                            img.image_id
                        )));
                    }
                }
                Task::Detection => {
                    let boxes = img.gt_boxes.as_deref().ok_or_else(|| {
                        Error::Consistency(format!("detection image {:?} has no box list", img.image_id))
                    })?;
                    let box_labels: HashSet<&str> = boxes.iter().map(|b| b.label.as_str()).collect();
                    if box_labels != unique {
                        return Err(Error::Consistency(format!(
                            "image {:?}: label set differs from box labels",
                            img.image_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn class_index(&self) -> HashMap<&str, usize> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect()
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.image_id == id)
    }

    /// Whether `img` takes part in the closed pass.
    pub fn in_closed_pass(&self, img: &ImageEntry) -> bool {
        match self.task {
            Task::Classification => self.classes.contains(&img.gt_labels[0]),
            Task::Detection => true,
        }
    }

    /// `L - Y` for one image, in dataset class order.
    pub fn open_query(&self, img: &ImageEntry) -> Vec<String> {
        self.classes
            .iter()
            .filter(|c| !img.gt_labels.contains(c))
            .cloned()
            .collect()
    }

    /// Ground-truth box count per query class over closed-pass images.
    pub fn gt_counts(&self) -> Vec<usize> {
        let index = self.class_index();
        let mut counts = vec![0; self.classes.len()];
        for img in &self.images {
            for b in img.gt_boxes.iter().flatten() {
                if let Some(&c) = index.get(b.label.as_str()) {
                    counts[c] += 1;
                }
            }
        }
        counts
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut text = String::new();
        BufReader::new(f)
            .read_to_string(&mut text)
            .map_err(|e| Error::file(path, e))?;
        let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
        let m = if is_jsonl {
            Self::from_classification_jsonl(&text)?
        } else {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            if v.get("annotations").is_some() {
                Self::from_coco_value(v)?
            } else {
                serde_json::from_value(v)?
            }
        };
        m.validate()?;
        Ok(m)
    }

    /// Classification manifest as JSON lines of `{"image_id", "label"}`.
    ///
    /// An optional first line `{"classes": [...], "open_classes": [...]}`
    /// fixes the class order; without it classes appear in first-seen order.
    pub fn from_classification_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            classes: Vec<String>,
            #[serde(default)]
            open_classes: Vec<String>,
            #[serde(default)]
            dataset_id: String,
        }
        #[derive(Deserialize)]
        struct Line {
            image_id: String,
            label: String,
        }
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        let header: Option<Header> = match lines.peek() {
            Some(first) if first.contains("\"classes\"") => {
                let h = serde_json::from_str(first)?;
                lines.next();
                Some(h)
            }
            _ => None,
        };
        let mut images = Vec::new();
        let mut seen = Vec::new();
        for l in lines {
            let line: Line = serde_json::from_str(l)?;
            if !seen.contains(&line.label) {
                seen.push(line.label.clone());
            }
            images.push(ImageEntry {
                image_id: line.image_id,
                gt_labels: vec![line.label],
                gt_boxes: None,
            });
        }
        let (dataset_id, classes, open_classes) = match header {
            Some(h) => (h.dataset_id, h.classes, h.open_classes),
            None => (String::new(), seen, Vec::new()),
        };
        Ok(Self {
            dataset_id,
            task: Task::Classification,
            classes,
            open_classes,
            images,
        })
    }

    /// COCO annotation JSON. Category order follows the `categories` array;
    /// boxes are converted from `[x, y, w, h]` to corners.
    pub fn from_coco_json(text: &str) -> Result<Self> {
        Self::from_coco_value(serde_json::from_str(text)?)
    }

    fn from_coco_value(v: serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct CocoImage {
            id: u64,
        }
        #[derive(Deserialize)]
        struct CocoAnnotation {
            #[serde(default)]
            id: u64,
            image_id: u64,
            category_id: u64,
            bbox: [f64; 4],
        }
        #[derive(Deserialize)]
        struct CocoCategory {
            id: u64,
            name: String,
        }
        #[derive(Deserialize)]
        struct Coco {
            images: Vec<CocoImage>,
            annotations: Vec<CocoAnnotation>,
            categories: Vec<CocoCategory>,
        }
        let coco: Coco = serde_json::from_value(v)?;
        let names: HashMap<u64, &str> =
            coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        let mut boxes: BTreeMap<u64, Vec<GtBox>> = BTreeMap::new();
        for a in &coco.annotations {
            let label = names.get(&a.category_id).ok_or_else(|| {
                Error::Consistency(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                ))
            })?;
            let [x, y, w, h] = a.bbox;
            let bbox = BBox::from_xywh(x, y, w, h)
                .map_err(|e| Error::Consistency(format!("annotation {}: {e}", a.id)))?;
            boxes.entry(a.image_id).or_default().push(GtBox {
                label: label.to_string(),
                bbox,
            });
        }
        let images = coco
            .images
            .iter()
            .map(|img| {
                let gt_boxes = boxes.remove(&img.id).unwrap_or_default();
                let mut gt_labels: Vec<String> = Vec::new();
                for b in &gt_boxes {
                    if !gt_labels.contains(&b.label) {
                        gt_labels.push(b.label.clone());
                    }
                }
                ImageEntry {
                    image_id: img.id.to_string(),
                    gt_labels,
                    gt_boxes: Some(gt_boxes),
                }
            })
            .collect();
        if let Some(id) = boxes.keys().next() {
            return Err(Error::Consistency(format!(
                "annotations reference unknown image {id}"
            )));
        }
        Ok(Self {
            dataset_id: String::new(),
            task: Task::Detection,
            classes: coco.categories.into_iter().map(|c| c.name).collect(),
            open_classes: Vec::new(),
            images,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanImage {
    pub image_id: String,
    /// Tested against the full class list.
    pub closed: bool,
    /// Tested against `open_query`; false when that set would be empty.
    pub open: bool,
    pub open_query: Vec<String>,
}

/// Per-image query sets for both passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub dataset_id: String,
    pub task: Task,
    pub negatives: NegativeSpec,
    pub closed_query: Vec<String>,
    pub images: Vec<PlanImage>,
}

impl PlanFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        let plan: Self = serde_json::from_reader(BufReader::new(f))?;
        if plan.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported plan schema version {}",
                plan.schema_version
            )));
        }
        plan.negatives.validate()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks the plan was built from `manifest`.
    pub fn check_against(&self, manifest: &DatasetManifest) -> Result<()> {
        let rebuilt = build_plan(manifest, &self.negatives)?;
        if rebuilt.task != self.task
            || rebuilt.closed_query != self.closed_query
            || rebuilt.images != self.images
        {
            return Err(Error::Consistency(
                "plan does not match the manifest it is scored against".into(),
            ));
        }
        Ok(())
    }
}

pub fn build_plan(manifest: &DatasetManifest, negatives: &NegativeSpec) -> Result<PlanFile> {
    manifest.validate()?;
    negatives.validate()?;
    let images = manifest
        .images
        .iter()
        .map(|img| {
            let open_query = manifest.open_query(img);
            let open = !open_query.is_empty();
            if !open {
                log::warn!(
                    "image {:?} contains every query class; skipped in the open pass",
                    img.image_id
                );
            }
            PlanImage {
                image_id: img.image_id.clone(),
                closed: manifest.in_closed_pass(img),
                open,
                open_query,
            }
        })
        .collect();
    Ok(PlanFile {
        schema_version: PLAN_SCHEMA_VERSION,
        dataset_id: manifest.dataset_id.clone(),
        task: manifest.task,
        negatives: negatives.clone(),
        closed_query: manifest.classes.clone(),
        images,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Closed,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Tp,
    FpClosed,
    Ose,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicted {
    Label(String),
    /// Won by the negative slot with this index.
    Rejected(usize),
}

/// A classification decision with its query index already resolved to a label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDecision {
    pub image_id: String,
    pub predicted: Predicted,
    pub uncertainty: UncertaintyTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub bbox: BBox,
    pub predicted: Predicted,
    pub uncertainty: UncertaintyTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<ScoredDetection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutcome {
    pub image_id: String,
    pub pass: Pass,
    pub predicted: Predicted,
    pub uncertainty: UncertaintyTriple,
    pub outcome: Outcome,
    pub bbox: Option<BBox>,
}

impl PredictionOutcome {
    /// Ranking score used for mAP: the head probability.
    pub fn confidence(&self) -> f64 {
        self.uncertainty.softmax
    }
}

fn tested_image<'m>(
    manifest: &'m DatasetManifest,
    by_id: &HashMap<&str, usize>,
    image_id: &str,
    pass: Pass,
) -> Result<&'m ImageEntry> {
    let img = by_id
        .get(image_id)
        .map(|&i| &manifest.images[i])
        .ok_or_else(|| Error::Consistency(format!("decision for unknown image {image_id:?}")))?;
    let tested = match pass {
        Pass::Closed => manifest.in_closed_pass(img),
        Pass::Open => manifest.classes.iter().any(|c| !img.gt_labels.contains(c)),
    };
    if !tested {
        return Err(Error::Consistency(format!(
            "image {image_id:?} is not tested in the {pass:?} pass"
        )));
    }
    Ok(img)
}

fn check_label(img: &ImageEntry, label: &str, classes: &[String], pass: Pass) -> Result<()> {
    let in_query = classes.iter().any(|c| c == label)
        && (pass == Pass::Closed || !img.gt_labels.iter().any(|g| g == label));
    if !in_query {
        return Err(Error::Consistency(format!(
            "image {:?}: label {label:?} is outside the {pass:?} query set",
            img.image_id
        )));
    }
    Ok(())
}

fn image_lookup(manifest: &DatasetManifest) -> HashMap<&str, usize> {
    manifest
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.image_id.as_str(), i))
        .collect()
}

/// Labels one classification decision per tested image.
pub fn label_classification(
    decisions: &[ImageDecision],
    manifest: &DatasetManifest,
    pass: Pass,
) -> Result<Vec<PredictionOutcome>> {
    let by_id = image_lookup(manifest);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(decisions.len());
    for d in decisions {
        if !seen.insert(d.image_id.as_str()) {
            return Err(Error::Consistency(format!(
                "two decisions for image {:?}",
                d.image_id
            )));
        }
        let img = tested_image(manifest, &by_id, &d.image_id, pass)?;
        let outcome = match (&d.predicted, pass) {
            (Predicted::Rejected(_), _) => Outcome::Rejected,
            (Predicted::Label(l), Pass::Closed) => {
                check_label(img, l, &manifest.classes, pass)?;
                if *l == img.gt_labels[0] {
                    Outcome::Tp
                } else {
                    Outcome::FpClosed
                }
            }
            (Predicted::Label(l), Pass::Open) => {
                check_label(img, l, &manifest.classes, pass)?;
                Outcome::Ose
            }
        };
        out.push(PredictionOutcome {
            image_id: d.image_id.clone(),
            pass,
            predicted: d.predicted.clone(),
            uncertainty: d.uncertainty,
            outcome,
            bbox: None,
        });
    }
    Ok(out)
}

/// Labels scored detections. The closed pass runs greedy IoU matching per
/// image; the open pass marks every accepted detection as an open-set error.
pub fn label_detection(
    images: &[ImageDetections],
    manifest: &DatasetManifest,
    pass: Pass,
    iou_threshold: f64,
) -> Result<Vec<PredictionOutcome>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Parameter(format!("IoU threshold {iou_threshold} not in (0, 1]")));
    }
    let by_id = image_lookup(manifest);
    let class_index = manifest.class_index();
    let mut seen = HashSet::new();
    for img in images {
        if !seen.insert(img.image_id.as_str()) {
            return Err(Error::Consistency(format!(
                "detections for image {:?} given twice",
                img.image_id
            )));
        }
    }
    let per_image: Vec<Vec<PredictionOutcome>> = images
        .par_iter()
        .map(|entry| {
            let img = tested_image(manifest, &by_id, &entry.image_id, pass)?;
            for d in &entry.detections {
                if let Predicted::Label(l) = &d.predicted {
                    check_label(img, l, &manifest.classes, pass)?;
                }
            }
            let flags = match pass {
                Pass::Closed => {
                    let gts: Vec<GroundTruth> = img
                        .gt_boxes
                        .iter()
                        .flatten()
                        .filter_map(|b| {
                            class_index.get(b.label.as_str()).map(|&class| GroundTruth {
                                bbox: b.bbox,
                                class,
                            })
                        })
                        .collect();
                    let (kept, dets): (Vec<usize>, Vec<Detection>) = entry
                        .detections
                        .iter()
                        .enumerate()
                        .filter_map(|(i, d)| match &d.predicted {
                            Predicted::Label(l) => Some((
                                i,
                                Detection {
                                    bbox: d.bbox,
                                    class: class_index[l.as_str()],
                                    confidence: d.uncertainty.softmax,
                                },
                            )),
                            Predicted::Rejected(_) => None,
                        })
                        .unzip();
                    let tp = assign_detections(&dets, &gts, iou_threshold);
                    let mut flags = vec![None; entry.detections.len()];
                    for (i, t) in kept.into_iter().zip(tp) {
                        flags[i] = Some(t);
                    }
                    flags
                }
                Pass::Open => vec![None; entry.detections.len()],
            };
            Ok(entry
                .detections
                .iter()
                .zip(flags)
                .map(|(d, flag)| {
                    let outcome = match (&d.predicted, pass, flag) {
                        (Predicted::Rejected(_), ..) => Outcome::Rejected,
                        (_, Pass::Open, _) => Outcome::Ose,
                        (_, Pass::Closed, Some(true)) => Outcome::Tp,
                        (_, Pass::Closed, _) => Outcome::FpClosed,
                    };
                    PredictionOutcome {
                        image_id: entry.image_id.clone(),
                        pass,
                        predicted: d.predicted.clone(),
                        uncertainty: d.uncertainty,
                        outcome,
                        bbox: Some(d.bbox),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}
