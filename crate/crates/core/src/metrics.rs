//! Open-set metrics over the two uncertainty populations: true positives
//! from the closed pass and open-set errors from the open pass.
//!
//! A prediction is kept at threshold θ iff ψ ≥ θ. Precision and recall treat
//! TPs as the positive class and OSEs as the negative class.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MapResult;
use crate::negatives::NegativeSpec;
use crate::protocol::{Outcome, Pass, Predicted, PredictionOutcome, Task};
use crate::similarity::{Head, UncertaintyTriple};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_TARGET: f64 = 0.95;
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub kept_tp: usize,
    pub kept_ose: usize,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("non-finite {what} value at index {i}"))),
        None => Ok(()),
    }
}

/// One point per distinct ψ value, thresholds descending.
pub fn pr_curve(tp_psi: &[f64], ose_psi: &[f64]) -> Result<Vec<CurvePoint>> {
    if tp_psi.is_empty() {
        return Err(Error::InsufficientData(
            "recall is undefined without true positives".into(),
        ));
    }
    check_finite(tp_psi, "TP")?;
    check_finite(ose_psi, "OSE")?;
    let mut all: Vec<(f64, bool)> = tp_psi
        .iter()
        .map(|&v| (v, true))
        .chain(ose_psi.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));

    let total_tp = tp_psi.len() as f64;
    let mut curve = Vec::new();
    let (mut tp, mut ose) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        // -0.0 and 0.0 are one threshold
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1;
            } else {
                ose += 1;
            }
            i += 1;
        }
        curve.push(CurvePoint {
            threshold,
            precision: tp as f64 / (tp + ose) as f64,
            recall: tp as f64 / total_tp,
            kept_tp: tp,
            kept_ose: ose,
        });
    }
    Ok(curve)
}

/// Trapezoidal area under precision over recall, anchored at recall 0 with
/// the precision of the highest-threshold point.
pub fn aupr(curve: &[CurvePoint]) -> f64 {
    let Some(first) = curve.first() else {
        return 0.0;
    };
    let (mut prev_r, mut prev_p) = (0.0, first.precision);
    let mut area = 0.0;
    for p in curve {
        area += (p.recall - prev_r) * (p.precision + prev_p) / 2.0;
        prev_r = p.recall;
        prev_p = p.precision;
    }
    area
}

/// Best precision among points with recall ≥ `target`; `None` if no point qualifies.
pub fn precision_at_recall(curve: &[CurvePoint], target: f64) -> Option<f64> {
    curve
        .iter()
        .filter(|p| p.recall >= target)
        .map(|p| p.precision)
        .reduce(f64::max)
}

/// Best recall among points with precision ≥ `target`; `None` if no point qualifies.
pub fn recall_at_precision(curve: &[CurvePoint], target: f64) -> Option<f64> {
    curve
        .iter()
        .filter(|p| p.precision >= target)
        .map(|p| p.recall)
        .reduce(f64::max)
}

/// Probability that a random TP outscores a random OSE, ties counting half.
pub fn auroc(tp_psi: &[f64], ose_psi: &[f64]) -> Result<f64> {
    if tp_psi.is_empty() || ose_psi.is_empty() {
        return Err(Error::InsufficientData(
            "AuROC needs both TP and OSE predictions".into(),
        ));
    }
    check_finite(tp_psi, "TP")?;
    check_finite(ose_psi, "OSE")?;
    let mut ose = ose_psi.to_vec();
    ose.sort_by(f64::total_cmp);
    // twice the Mann-Whitney U statistic, kept integral
    let twice_u: u128 = tp_psi
        .iter()
        .map(|&t| {
            let below = ose.partition_point(|&o| o < t);
            let not_above = ose.partition_point(|&o| o <= t);
            (2 * below + (not_above - below)) as u128
        })
        .sum();
    let pairs = 2 * tp_psi.len() as u128 * ose_psi.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

/// TP share of closed-pass classification outcomes.
pub fn top1_accuracy(outcomes: &[PredictionOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::InsufficientData("accuracy over zero images".into()));
    }
    if outcomes.iter().any(|o| o.pass != Pass::Closed) {
        return Err(Error::Parameter("accuracy takes closed-pass outcomes only".into()));
    }
    let tp = outcomes.iter().filter(|o| o.outcome == Outcome::Tp).count();
    Ok(tp as f64 / outcomes.len() as f64)
}

/// Normalised histograms of the two populations over shared bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub edges: Vec<f64>,
    pub tp: Vec<f64>,
    pub ose: Vec<f64>,
    pub tp_empty: bool,
    pub ose_empty: bool,
}

pub fn uncertainty_histogram(tp_psi: &[f64], ose_psi: &[f64], bins: usize) -> Result<HistogramPair> {
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    check_finite(tp_psi, "TP")?;
    check_finite(ose_psi, "OSE")?;
    let union = tp_psi.iter().chain(ose_psi);
    let lo = union.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = union.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = hi - lo;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 / bins as f64 })
        .collect();
    let fill = |values: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        if values.is_empty() {
            return h;
        }
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            h[b] += 1.0;
        }
        let n = values.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    Ok(HistogramPair {
        edges,
        tp: fill(tp_psi),
        ose: fill(ose_psi),
        tp_empty: tp_psi.is_empty(),
        ose_empty: ose_psi.is_empty(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeCapture {
    pub slot: usize,
    /// Closed-pass predictions this negative won.
    pub closed_captured: usize,
    /// Open-pass predictions this negative won.
    pub open_captured: usize,
}

pub fn negative_capture_stats(
    outcomes: &[PredictionOutcome],
    negative_count: usize,
) -> Result<Vec<NegativeCapture>> {
    if negative_count == 0 {
        return Err(Error::Parameter("run has no negative slots".into()));
    }
    let mut stats: Vec<NegativeCapture> = (0..negative_count)
        .map(|slot| NegativeCapture {
            slot,
            closed_captured: 0,
            open_captured: 0,
        })
        .collect();
    for o in outcomes {
        if let Predicted::Rejected(slot) = o.predicted {
            let s = stats.get_mut(slot).ok_or_else(|| {
                Error::Consistency(format!("negative slot {slot} out of {negative_count}"))
            })?;
            match o.pass {
                Pass::Closed => s.closed_captured += 1,
                Pass::Open => s.open_captured += 1,
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Cosine,
    Softmax,
    Entropy,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Cosine, Measure::Softmax, Measure::Entropy];

    pub fn of(self, u: &UncertaintyTriple) -> f64 {
        match self {
            Measure::Cosine => u.cosine,
            Measure::Softmax => u.softmax,
            Measure::Entropy => u.entropy_neg,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Measure::Cosine => "cosine",
            Measure::Softmax => "softmax",
            Measure::Entropy => "entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub measure: Measure,
    pub aupr: Option<f64>,
    pub auroc: Option<f64>,
    pub p_at_95r: Option<f64>,
    pub r_at_95p: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub histogram: HistogramPair,
}

impl MeasureReport {
    pub fn compute(measure: Measure, tp_psi: &[f64], ose_psi: &[f64], bins: usize) -> Result<Self> {
        let curve = if tp_psi.is_empty() {
            Vec::new()
        } else {
            pr_curve(tp_psi, ose_psi)?
        };
        let defined = !curve.is_empty();
        Ok(Self {
            measure,
            aupr: defined.then(|| aupr(&curve)),
            auroc: if tp_psi.is_empty() || ose_psi.is_empty() {
                None
            } else {
                Some(auroc(tp_psi, ose_psi)?)
            },
            p_at_95r: precision_at_recall(&curve, SUMMARY_TARGET),
            r_at_95p: recall_at_precision(&curve, SUMMARY_TARGET),
            histogram: uncertainty_histogram(tp_psi, ose_psi, bins)?,
            curve,
        })
    }
}

/// Run settings recorded alongside the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub temperature: f64,
    pub head: Head,
    pub iou_threshold: Option<f64>,
    pub negatives: NegativeSpec,
    pub negative_rows_normalized: bool,
    pub aupr_rule: String,
    pub summary_rule: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub tp: usize,
    pub fp_closed: usize,
    pub closed_rejected: usize,
    pub ose: usize,
    pub open_rejected: usize,
}

impl OutcomeCounts {
    pub fn tally(outcomes: &[PredictionOutcome]) -> Self {
        let mut c = Self::default();
        for o in outcomes {
            match (o.pass, o.outcome) {
                (_, Outcome::Tp) => c.tp += 1,
                (_, Outcome::FpClosed) => c.fp_closed += 1,
                (_, Outcome::Ose) => c.ose += 1,
                (Pass::Closed, Outcome::Rejected) => c.closed_rejected += 1,
                (Pass::Open, Outcome::Rejected) => c.open_rejected += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub task: Task,
    pub tp_count: usize,
    pub ose_count: usize,
    pub counts: OutcomeCounts,
    pub closed_images: usize,
    pub open_images: usize,
    pub accuracy: Option<f64>,
    pub map: Option<MapResult>,
    pub measures: Vec<MeasureReport>,
    pub negative_capture: Option<Vec<NegativeCapture>>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn measure(&self, m: Measure) -> &MeasureReport {
        self.measures
            .iter()
            .find(|r| r.measure == m)
            .expect("every report carries all measures")
    }

    /// Pretty JSON with every float rounded to 9 significant digits.
    pub fn to_json(&self) -> Result<String> {
        to_rounded_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported report schema version {}",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// Fixed-width text table of the summary numbers; unreachable operating
    /// points print as "-".
    pub fn summary_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut s = format!(
            "{:<8} {:>6} {:>6} {:>6} {:>6} {:>9} {:>9}\n",
            "measure", "AuPR", "P@95R", "R@95P", "AuROC", "TP", "OSE"
        );
        for m in &self.measures {
            s.push_str(&format!(
                "{:<8} {:>6} {:>6} {:>6} {:>6} {:>9} {:>9}\n",
                m.measure.name(),
                pct(m.aupr),
                pct(m.p_at_95r),
                pct(m.r_at_95p),
                pct(m.auroc),
                self.tp_count,
                self.ose_count
            ));
        }
        match (&self.accuracy, &self.map) {
            (Some(a), _) => s.push_str(&format!("accuracy {:.1}\n", 100.0 * a)),
            (_, Some(m)) => s.push_str(&format!("mAP@0.5 {:.1}\n", 100.0 * m.map)),
            _ => {}
        }
        s
    }
}

/// Rounds `x` to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

pub fn format_float(x: f64) -> String {
    format!("{}", round_sig9(x))
}

fn round_value(v: &mut serde_json::Value) {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig9).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

pub fn to_rounded_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], mut sink: W) -> Result<()> {
    let io = |source| Error::Io { offset: 0, source };
    writeln!(sink, "threshold,precision,recall,kept_tp,kept_ose").map_err(io)?;
    for p in curve {
        writeln!(
            sink,
            "{},{},{},{},{}",
            format_float(p.threshold),
            format_float(p.precision),
            format_float(p.recall),
            p.kept_tp,
            p.kept_ose
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(h: &HistogramPair, mut sink: W) -> Result<()> {
    let io = |source| Error::Io { offset: 0, source };
    writeln!(sink, "bin_lo,bin_hi,tp,ose").map_err(io)?;
    for (i, (tp, ose)) in h.tp.iter().zip(&h.ose).enumerate() {
        writeln!(
            sink,
            "{},{},{},{}",
            format_float(h.edges[i]),
            format_float(h.edges[i + 1]),
            format_float(*tp),
            format_float(*ose)
        )
        .map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(threshold: f64, precision: f64, recall: f64) -> (f64, f64, f64) {
        (threshold, precision, recall)
    }

    fn triples(c: &[CurvePoint]) -> Vec<(f64, f64, f64)> {
        c.iter().map(|p| (p.threshold, p.precision, p.recall)).collect()
    }

    #[test]
    fn perfect_separation() {
        let c = pr_curve(&[1.0], &[0.0]).unwrap();
        assert_eq!(triples(&c), vec![pt(1.0, 1.0, 1.0), pt(0.0, 0.5, 1.0)]);
        assert_eq!(aupr(&c), 1.0);
        assert_eq!(precision_at_recall(&c, 0.95), Some(1.0));
        assert_eq!(recall_at_precision(&c, 0.95), Some(1.0));
        assert_eq!(auroc(&[1.0], &[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn inverted_separation() {
        let c = pr_curve(&[0.2], &[0.9]).unwrap();
        assert_eq!(triples(&c), vec![pt(0.9, 0.0, 0.0), pt(0.2, 0.5, 1.0)]);
        assert_eq!(recall_at_precision(&c, 0.95), None);
    }

    #[test]
    fn three_tp_two_ose() {
        // kept sets by threshold, enumerated by hand:
        // 0.9 {t}            P=1    R=1/3
        // 0.8 {t,t}          P=1    R=2/3
        // 0.7 {t,t,o}        P=2/3  R=2/3
        // 0.4 {t,t,o,t}      P=3/4  R=1
        // 0.3 {t,t,o,t,o}    P=3/5  R=1
        let c = pr_curve(&[0.9, 0.8, 0.4], &[0.7, 0.3]).unwrap();
        let third = 1.0 / 3.0;
        let expected = [
            (0.9, 1.0, third),
            (0.8, 1.0, 2.0 * third),
            (0.7, 2.0 / 3.0, 2.0 * third),
            (0.4, 0.75, 1.0),
            (0.3, 0.6, 1.0),
        ];
        for (p, e) in c.iter().zip(expected) {
            assert!((p.threshold - e.0).abs() < 1e-15);
            assert!((p.precision - e.1).abs() < 1e-15);
            assert!((p.recall - e.2).abs() < 1e-15);
        }
        let area = third * 1.0 + third * 1.0 + 0.0 + third * (2.0 / 3.0 + 0.75) / 2.0 + 0.0;
        assert!((aupr(&c) - area).abs() < 1e-15);
        assert_eq!(precision_at_recall(&c, 0.95), Some(0.75));
        assert!((recall_at_precision(&c, 0.95).unwrap() - 2.0 * third).abs() < 1e-15);
        // TP beats OSE in 5 of 6 pairs
        assert!((auroc(&[0.9, 0.8, 0.4], &[0.7, 0.3]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn auroc_ties_and_errors() {
        assert_eq!(auroc(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]).unwrap(), 0.5);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
        assert!(pr_curve(&[], &[0.1]).is_err());
        assert!(pr_curve(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn histogram_cases() {
        let h = uncertainty_histogram(&[0.3], &[0.7], 10).unwrap();
        assert_eq!(h.tp[0], 1.0);
        assert_eq!(h.ose[9], 1.0);
        assert_eq!(h.tp.iter().sum::<f64>(), 1.0);
        let same = uncertainty_histogram(&[0.1, 0.4], &[0.1, 0.4], 3).unwrap();
        assert_eq!(same.tp, same.ose);
        // range [0, 1], bins [0, .5) and [.5, 1]
        let h = uncertainty_histogram(&[0.0, 0.0, 1.0], &[1.0], 2).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.tp, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(h.ose, vec![0.0, 1.0]);
        let e = uncertainty_histogram(&[0.5], &[], 4).unwrap();
        assert!(e.ose_empty && !e.tp_empty);
        assert_eq!(e.tp[0], 1.0);
        assert!(uncertainty_histogram(&[0.5], &[], 0).is_err());
    }

    #[test]
    fn rounding_and_csv() {
        assert_eq!(round_sig9(0.123456789012), 0.123456789);
        assert_eq!(format_float(2.0 / 3.0), "0.666666667");
        assert_eq!(format_float(1.0), "1");
        let c = pr_curve(&[1.0], &[0.0]).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&c, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "threshold,precision,recall,kept_tp,kept_ose\n1,1,1,1,0\n0,0.5,1,1,1\n"
        );
    }

    #[test]
    fn capture_needs_negatives() {
        assert!(negative_capture_stats(&[], 0).is_err());
        assert_eq!(
            negative_capture_stats(&[], 1).unwrap(),
            vec![NegativeCapture { slot: 0, closed_captured: 0, open_captured: 0 }]
        );
    }
}
