//! Confusion-matrix accumulation and per-class IoU / F1.
//!
//! Rows of the matrix are reference classes and columns are predicted
//! classes. A class with `TP + FP + FN = 0` has no support: its IoU and F1
//! are `None` and it is left out of the means.

use indexmap::IndexMap;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{LabelMap, IGNORE_LABEL};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.num_classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies every pixel whose reference label is not ignored.
    ///
    /// The matrix is left untouched when an error is returned.
    pub fn update(&mut self, predicted: &LabelMap, reference: &LabelMap) -> Result<()> {
        if predicted.height != reference.height || predicted.width != reference.width {
            return Err(Error::Shape(format!(
                "predicted {}x{} vs reference {}x{}",
                predicted.height, predicted.width, reference.height, reference.width
            )));
        }
        let c = self.num_classes;
        for (&p, &r) in predicted.data.iter().zip(&reference.data) {
            if r == IGNORE_LABEL {
                continue;
            }
            for id in [p, r] {
                if id as usize >= c {
                    return Err(Error::ClassOutOfRange { id, num_classes: c });
                }
            }
        }
        for (&p, &r) in predicted.data.iter().zip(&reference.data) {
            if r != IGNORE_LABEL {
                self.counts[r as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Element-wise sum with a matrix accumulated elsewhere.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("merging confusion matrices of different class counts".into()));
        }
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(TP, FP, FN)` for one class.
    pub fn class_counts(&self, class: usize) -> (u64, u64, u64) {
        let c = self.num_classes;
        let tp = self.get(class, class);
        let col: u64 = (0..c).map(|r| self.get(r, class)).sum();
        let row: u64 = (0..c).map(|p| self.get(class, p)).sum();
        (tp, col - tp, row - tp)
    }
}

/// `TP / (TP + FP + FN)`, or `None` when the class has no support.
pub fn iou_from_counts(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let den = tp + fp + fn_;
    (den > 0).then(|| tp as f64 / den as f64)
}

/// `2TP / (2TP + FP + FN)`, or `None` when the class has no support.
pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let den = 2 * tp + fp + fn_;
    (den > 0).then(|| 2.0 * tp as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub mean_iou: Option<f64>,
    pub mean_f1: Option<f64>,
    pub pixel_count: u64,
}

/// Marker written for classes (or means) without support.
pub const NO_SUPPORT: &str = "no support";

fn mean_supported(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn summarize(cm: &ConfusionMatrix) -> MetricReport {
    let names = (0..cm.num_classes()).map(|c| format!("class{c}")).collect();
    summarize_named(cm, names)
}

pub fn summarize_named(cm: &ConfusionMatrix, class_names: Vec<String>) -> MetricReport {
    assert_eq!(class_names.len(), cm.num_classes(), "one name per class");
    let (mut iou, mut f1) = (Vec::new(), Vec::new());
    for c in 0..cm.num_classes() {
        let (tp, fp, fn_) = cm.class_counts(c);
        iou.push(iou_from_counts(tp, fp, fn_));
        f1.push(f1_from_counts(tp, fp, fn_));
    }
    MetricReport {
        class_names,
        mean_iou: mean_supported(&iou),
        mean_f1: mean_supported(&f1),
        per_class_iou: iou,
        per_class_f1: f1,
        pixel_count: cm.total(),
    }
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| NO_SUPPORT.to_string(), |v| format!("{v:.4}"))
}

impl MetricReport {
    /// Flat key/value pairs: `iou.<class>`, `f1.<class>`, `miou`, `mf1`,
    /// `pixels`, with ratios printed to four decimals.
    pub fn to_flat(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        for (name, v) in self.class_names.iter().zip(&self.per_class_iou) {
            m.insert(format!("iou.{name}"), fmt4(*v));
        }
        for (name, v) in self.class_names.iter().zip(&self.per_class_f1) {
            m.insert(format!("f1.{name}"), fmt4(*v));
        }
        m.insert("miou".into(), fmt4(self.mean_iou));
        m.insert("mf1".into(), fmt4(self.mean_f1));
        m.insert("pixels".into(), self.pixel_count.to_string());
        m
    }

    pub fn to_json(&self) -> String {
        let obj: serde_json::Map<String, Value> =
            self.to_flat().into_iter().map(|(k, v)| (k, Value::String(v))).collect();
        serde_json::to_string_pretty(&Value::Object(obj)).expect("string map serializes")
    }

    /// Parses the flat form back. Ratios come back rounded to four decimals.
    pub fn from_json(text: &str) -> Result<Self> {
        let parse_err = |reason: String| Error::Parse {
            location: "metric report".into(),
            reason,
        };
        let obj: serde_json::Map<String, Value> = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let get = |v: &Value| -> Result<Option<f64>> {
            let s = v.as_str().ok_or_else(|| parse_err("values must be strings".into()))?;
            if s == NO_SUPPORT {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| parse_err(e.to_string()))
            }
        };
        let mut report = MetricReport {
            class_names: Vec::new(),
            per_class_iou: Vec::new(),
            per_class_f1: Vec::new(),
            mean_iou: None,
            mean_f1: None,
            pixel_count: 0,
        };
        for (k, v) in &obj {
            if let Some(name) = k.strip_prefix("iou.") {
                report.class_names.push(name.to_string());
                report.per_class_iou.push(get(v)?);
            } else if k.starts_with("f1.") {
                report.per_class_f1.push(get(v)?);
            } else if k == "miou" {
                report.mean_iou = get(v)?;
            } else if k == "mf1" {
                report.mean_f1 = get(v)?;
            } else if k == "pixels" {
                report.pixel_count = v
                    .as_str()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err("pixels must be an integer string".into()))?;
            }
        }
        if report.per_class_f1.len() != report.class_names.len() {
            return Err(parse_err("iou and f1 class lists differ".into()));
        }
        Ok(report)
    }

    /// Fixed-width table, one column per class in stored order.
    pub fn table(&self) -> String {
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<6}", "");
        for n in &self.class_names {
            out.push_str(&format!(" {n:>width$}"));
        }
        out.push_str(&format!(" {:>width$}\n", "mean"));
        for (label, vals, mean) in [
            ("IoU", &self.per_class_iou, self.mean_iou),
            ("F1", &self.per_class_f1, self.mean_f1),
        ] {
            out.push_str(&format!("{label:<6}"));
            for v in vals.iter().chain(std::iter::once(&mean)) {
                let s = v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
                out.push_str(&format!(" {s:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}
