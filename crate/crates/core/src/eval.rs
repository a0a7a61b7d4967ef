//! Confusion matrices, IoU metrics and calibration error.

use std::fmt::Write;

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|k| self.get(k, k)).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "cannot add {}-class and {}-class matrices",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Counts `(truth, pred)` pairs over cells whose truth is not `void`.
pub fn confusion(pred: &[u8], truth: &[u8], num_classes: usize, void: u8) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "prediction vs truth cells",
            left: pred.len(),
            right: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&p, &t) in pred.iter().zip(truth) {
        if t == void {
            continue;
        }
        let (p, t) = (p as usize, t as usize);
        for l in [p, t] {
            if l >= num_classes {
                return Err(Error::LabelOutOfRange { label: l, num_classes });
            }
        }
        cm.counts[t * num_classes + p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `None` for classes with no ground-truth cells.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
}

/// Per-class IoU, mean IoU over classes present in the ground truth, and
/// overall accuracy. `None` for an empty matrix.
pub fn metrics(cm: &ConfusionMatrix) -> Option<Metrics> {
    let total = cm.total();
    if total == 0 {
        return None;
    }
    let k = cm.num_classes;
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let support = tp + fn_;
            (support > 0).then(|| tp as f64 / (tp + fp + fn_) as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Some(Metrics {
        per_class_iou,
        miou,
        accuracy: cm.trace() as f64 / total as f64,
    })
}

/// Expected calibration error over equal-width confidence bins. Bins are
/// right-exclusive except the last, which includes 1.0.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::LengthMismatch {
            what: "confidences vs correctness flags",
            left: confidences.len(),
            right: correct.len(),
        });
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("ECE needs at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidParameter(format!("confidence {c} outside [0, 1]")));
    }
    let n = confidences.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        total += nb / n as f64 * (hits[b] as f64 / nb - conf_sum[b] / nb).abs();
    }
    Ok(total)
}

/// Everything reported for one prediction/truth comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: Option<Metrics>,
    pub ece: Option<f64>,
}

impl EvalReport {
    fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![("cells".to_string(), self.confusion.total().to_string())];
        match &self.metrics {
            Some(m) => {
                out.push(("miou".into(), format!("{:.6}", m.miou)));
                out.push(("accuracy".into(), format!("{:.6}", m.accuracy)));
                for (k, iou) in m.per_class_iou.iter().enumerate() {
                    let v = iou.map_or_else(|| "absent".to_string(), |v| format!("{v:.6}"));
                    out.push((format!("iou.{k}"), v));
                }
            }
            None => {
                out.push(("miou".into(), "absent".into()));
                out.push(("accuracy".into(), "absent".into()));
            }
        }
        if let Some(e) = self.ece {
            out.push(("ece".into(), format!("{e:.6}")));
        }
        out
    }

    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// One tab-separated `name value` record per line.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}\t{v}");
        }
        s
    }
}
