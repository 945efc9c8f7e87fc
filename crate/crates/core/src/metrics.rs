//! Confusion matrices, per-class / mean IoU and IoU-evolution curves.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LabelMap;

/// `N×N` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.classes, rhs.classes, "confusion matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "confusion",
            format!("{}x{} vs {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
        ));
    }
    pred.validate(classes)?;
    gt.validate(classes)?;
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        cm.counts[g as usize * classes + p as usize] += 1;
    }
    Ok(cm)
}

/// How classes with a zero IoU denominator enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyClass {
    #[default]
    Exclude,
    CountAsZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` where the class appears in neither ground truth nor prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    iou_with(cm, EmptyClass::Exclude)
}

pub fn iou_with(cm: &ConfusionMatrix, empty: EmptyClass) -> Result<IouReport> {
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|i| {
            let tp = cm.get(i, i);
            let denom = cm.row_sum(i) + cm.col_sum(i) - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Invalid("IoU undefined: every class has an empty union".into()));
    }
    let mean = match empty {
        EmptyClass::Exclude => present.iter().sum::<f64>() / present.len() as f64,
        EmptyClass::CountAsZero => present.iter().sum::<f64>() / cm.classes as f64,
    };
    Ok(IouReport { per_class, mean })
}

/// Mean IoU of `pred` against `gt`.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<f64> {
    Ok(iou(&confusion(pred, gt, classes)?)?.mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub click_count: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// mIoU as a function of the number of clicks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouCurve {
    pub records: Vec<CurvePoint>,
}

impl IouCurve {
    /// Appends a point; `click_count` must exceed the previous one, and the
    /// first point must be at zero clicks.
    pub fn push(&mut self, point: CurvePoint) -> Result<()> {
        let ok = match self.records.last() {
            None => point.click_count == 0,
            Some(last) => point.click_count > last.click_count,
        };
        if !ok {
            return Err(Error::Invalid(format!(
                "curve click counts must increase from 0, got {}",
                point.click_count
            )));
        }
        self.records.push(point);
        Ok(())
    }

    /// Inserts or replaces the point for `point.click_count`, dropping any
    /// later points.
    pub fn upsert(&mut self, point: CurvePoint) -> Result<()> {
        self.truncate(point.click_count);
        if self.records.last().is_some_and(|p| p.click_count == point.click_count) {
            self.records.pop();
        }
        self.push(point)
    }

    /// Drops points with more than `click_count` clicks.
    pub fn truncate(&mut self, click_count: usize) {
        self.records.retain(|p| p.click_count <= click_count);
    }

    /// CSV with columns `click_count, miou, iou_class_0..N-1`.
    pub fn to_csv(&self, classes: usize) -> String {
        let mut out = String::from("click_count,miou");
        for k in 0..classes {
            write!(out, ",iou_class_{k}").unwrap();
        }
        out.push('\n');
        for p in &self.records {
            write!(out, "{},{}", p.click_count, p.miou).unwrap();
            for k in 0..classes {
                match p.per_class_iou.get(k).copied().flatten() {
                    Some(v) => write!(out, ",{v}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}
