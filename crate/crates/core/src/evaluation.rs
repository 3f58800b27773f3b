//! Localization and segmentation metrics, and the evaluation driver.
//!
//! * cIoU / AUC over box (or mask) annotations; AUC averages the success rate
//!   over the 19-point IoU grid `0.05, 0.10, …, 0.95`.
//! * mIoU / F-score (β² = 0.3, pixel counts aggregated over the dataset).
//! * AP / max-F1 / LocAcc for datasets that mix audible and silent or
//!   mismatched pairs.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    load_audio, load_image, load_mask, preprocess_audio, preprocess_image, Annotation,
    AudioPrepConfig, BoundingBox, Dataset, ImagePrepConfig, Polarity,
};
use crate::error::{Error, Result};
use crate::grounding::LocalizationMap;
use crate::inference::{confidence_score, Localizer};
use crate::resample::resize_nearest;

pub const IOU_SUCCESS: f64 = 0.5;
pub const F_BETA_SQ: f64 = 0.3;
pub const AUC_GRID_LABEL: &str = "19-point IoU grid 0.05:0.05:0.95";

/// `k / 20` for `k = 1..=19`; exact decimal values, unlike `k * 0.05`.
pub fn auc_thresholds() -> [f64; 19] {
    std::array::from_fn(|k| (k + 1) as f64 / 20.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub confidence_map: Array2<f64>,
    pub binary_map: Array2<bool>,
    pub confidence_score: f64,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, map: LocalizationMap) -> Self {
        let confidence_score = confidence_score(&map);
        Self {
            id: id.into(),
            confidence_map: map.confidence,
            binary_map: map.binary,
            confidence_score,
        }
    }
}

/// Union mask of boxes at `(h, w)`. A pixel is inside a box when its centre is.
pub fn rasterize_boxes(boxes: &[BoundingBox], (h, w): (usize, usize)) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
        boxes
            .iter()
            .any(|b| cx >= b.x_min && cx < b.x_max && cy >= b.y_min && cy < b.y_max)
    })
}

fn counts(pred: &Array2<bool>, gt: &Array2<bool>) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

fn check_dims(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction is {:?} but annotation is {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// `|pred ∩ gt| / |pred ∪ gt|`; two empty masks score 1.
pub fn sample_iou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    check_dims(pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    let union = tp + fp + fn_;
    Ok(if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    })
}

/// `(cIoU, AUC)` of a list of per-sample IoUs.
pub fn ciou_auc(ious: &[f64]) -> Result<(f64, f64)> {
    if ious.is_empty() {
        return Err(Error::UndefinedMetric(
            "cIoU of an empty sample list".into(),
        ));
    }
    let n = ious.len() as f64;
    let rate = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / n;
    let grid = auc_thresholds();
    let auc = grid.iter().map(|&t| rate(t)).sum::<f64>() / grid.len() as f64;
    Ok((rate(IOU_SUCCESS), auc))
}

fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = F_BETA_SQ * precision + recall;
    if den > 0.0 {
        (1.0 + F_BETA_SQ) * precision * recall / den
    } else {
        0.0
    }
}

/// `(mIoU, F-score)` over binary predictions and pixel ground truth.
pub fn segmentation_metrics(pairs: &[(&Array2<bool>, &Array2<bool>)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric(
            "mIoU of an empty sample list".into(),
        ));
    }
    let mut miou = 0.0;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (pred, gt) in pairs {
        miou += sample_iou(pred, gt)?;
        let c = counts(pred, gt);
        tp += c.0;
        fp += c.1;
        fn_ += c.2;
    }
    Ok((miou / pairs.len() as f64, f_from_counts(tp, fp, fn_)))
}

fn f_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    f_beta(ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionSample {
    pub confidence_score: f64,
    pub polarity: Polarity,
    /// Required for positive samples.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtendedMetrics {
    pub ap: f64,
    pub max_f1: f64,
    pub loc_acc: f64,
}

/// One operating point per distinct score, from the highest score down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn pr_curve(samples: &[DetectionSample]) -> Result<Vec<PrPoint>> {
    let mut hits = Vec::with_capacity(samples.len());
    for s in samples {
        if !s.confidence_score.is_finite() {
            return Err(Error::InvalidInput("non-finite confidence score".into()));
        }
        let hit = if s.polarity.is_positive() {
            let iou = s
                .iou
                .ok_or_else(|| Error::InvalidInput("positive sample without annotation".into()))?;
            iou >= IOU_SUCCESS
        } else {
            false
        };
        hits.push((s.confidence_score, hit));
    }
    let positives = samples.iter().filter(|s| s.polarity.is_positive()).count();
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut predicted, mut tp) = (0usize, 0usize);
    let mut k = 0;
    while k < hits.len() {
        let c = hits[k].0;
        while k < hits.len() && hits[k].0 == c {
            predicted += 1;
            tp += hits[k].1 as usize;
            k += 1;
        }
        points.push(PrPoint {
            threshold: c,
            precision: tp as f64 / predicted as f64,
            recall: if positives == 0 {
                0.0
            } else {
                tp as f64 / positives as f64
            },
        });
    }
    Ok(points)
}

pub fn extended_metrics(samples: &[DetectionSample]) -> Result<ExtendedMetrics> {
    let curve = pr_curve(samples)?;
    let positive_ious: Vec<f64> = samples
        .iter()
        .filter(|s| s.polarity.is_positive())
        .filter_map(|s| s.iou)
        .collect();
    if positive_ious.is_empty() {
        return Err(Error::UndefinedMetric(
            "LocAcc needs at least one positive sample".into(),
        ));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut max_f1: f64 = 0.0;
    for p in &curve {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
        let den = p.precision + p.recall;
        if den > 0.0 {
            max_f1 = max_f1.max(2.0 * p.precision * p.recall / den);
        }
    }
    let loc_acc = ciou_auc(&positive_ious)?.0;
    Ok(ExtendedMetrics {
        ap,
        max_f1,
        loc_acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFamily {
    /// cIoU and AUC from box annotations.
    Localization,
    /// mIoU and F-score from pixel masks.
    Segmentation,
    /// AP, max-F1 and LocAcc for mixed-polarity data.
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    Boxes,
    Mask,
}

/// Everything the metrics need from one evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub polarity: Polarity,
    pub confidence_score: f64,
    pub annotation: Option<AnnotationKind>,
    pub iou: Option<f64>,
    /// Pixel `(tp, fp, fn)` against a mask annotation.
    pub pixel_counts: Option<(u64, u64, u64)>,
}

impl ScoredSample {
    pub fn score(
        id: impl Into<String>,
        polarity: Polarity,
        pred: &PredictionRecord,
        gt: Option<(AnnotationKind, &Array2<bool>)>,
    ) -> Result<Self> {
        let (annotation, iou, pixel_counts) = match gt {
            Some((kind, mask)) => {
                let iou = sample_iou(&pred.binary_map, mask)?;
                let px = (kind == AnnotationKind::Mask).then(|| counts(&pred.binary_map, mask));
                (Some(kind), Some(iou), px)
            }
            None => (None, None, None),
        };
        Ok(Self {
            id: id.into(),
            polarity,
            confidence_score: pred.confidence_score,
            annotation,
            iou,
            pixel_counts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub id: String,
    pub polarity: Polarity,
    pub iou: Option<f64>,
    pub confidence_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples_evaluated: usize,
    /// Metric name to value in `[0, 1]`.
    pub metrics: BTreeMap<String, f64>,
    pub auc_grid: &'static str,
    pub per_sample: Vec<SampleRow>,
    pub config: serde_json::Value,
}

const DISPLAY_ORDER: [&str; 7] = ["cIoU", "AUC", "mIoU", "F-score", "AP", "max-F1", "LocAcc"];

impl EvalReport {
    /// Metrics as `name: value×100` lines in a fixed order.
    pub fn summary_lines(&self) -> Vec<String> {
        DISPLAY_ORDER
            .iter()
            .filter_map(|k| {
                self.metrics
                    .get(*k)
                    .map(|v| format!("{k}: {:.2}", v * 100.0))
            })
            .collect()
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pretty_json()?).map_err(|e| Error::io(path, e))
    }

    /// `id,iou,confidence_score`; the IoU cell is empty for unannotated samples.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["id", "iou", "confidence_score"])
            .map_err(io)?;
        for r in &self.per_sample {
            let iou = r.iou.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                r.id.as_str(),
                iou.as_str(),
                r.confidence_score.to_string().as_str(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Pick metrics from the annotation kinds and polarities present.
pub fn build_report(samples: &[ScoredSample], require: &[MetricFamily]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "nothing to evaluate: the dataset is empty".into(),
        ));
    }
    let mut metrics = BTreeMap::new();
    let positive = |s: &&ScoredSample| s.polarity.is_positive();

    let box_ious: Vec<f64> = samples
        .iter()
        .filter(positive)
        .filter(|s| s.annotation == Some(AnnotationKind::Boxes))
        .filter_map(|s| s.iou)
        .collect();
    if !box_ious.is_empty() {
        let (ciou, auc) = ciou_auc(&box_ious)?;
        metrics.insert("cIoU".into(), ciou);
        metrics.insert("AUC".into(), auc);
    }

    let masked: Vec<&ScoredSample> = samples
        .iter()
        .filter(positive)
        .filter(|s| s.pixel_counts.is_some())
        .collect();
    if !masked.is_empty() {
        let miou = masked.iter().filter_map(|s| s.iou).sum::<f64>() / masked.len() as f64;
        let (tp, fp, fn_) = masked
            .iter()
            .filter_map(|s| s.pixel_counts)
            .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
        metrics.insert("mIoU".into(), miou);
        metrics.insert("F-score".into(), f_from_counts(tp, fp, fn_));
    }

    if samples.iter().any(|s| !s.polarity.is_positive()) {
        let det: Vec<DetectionSample> = samples
            .iter()
            .map(|s| DetectionSample {
                confidence_score: s.confidence_score,
                polarity: s.polarity,
                iou: s.iou,
            })
            .collect();
        let ext = extended_metrics(&det)?;
        metrics.insert("AP".into(), ext.ap);
        metrics.insert("max-F1".into(), ext.max_f1);
        metrics.insert("LocAcc".into(), ext.loc_acc);
    }

    for family in require {
        let key = match family {
            MetricFamily::Localization => "cIoU",
            MetricFamily::Segmentation => "mIoU",
            MetricFamily::Extended => "AP",
        };
        if !metrics.contains_key(key) {
            return Err(Error::UndefinedMetric(format!(
                "{family:?} metrics requested but the dataset has no matching annotations"
            )));
        }
    }

    Ok(EvalReport {
        samples_evaluated: samples.len(),
        metrics,
        auc_grid: AUC_GRID_LABEL,
        per_sample: samples
            .iter()
            .map(|s| SampleRow {
                id: s.id.clone(),
                polarity: s.polarity,
                iou: s.iou,
                confidence_score: s.confidence_score,
            })
            .collect(),
        config: serde_json::Value::Null,
    })
}

/// Ground truth at map resolution. Boxes are in original-image pixels.
pub fn annotation_mask(
    annotation: &Annotation,
    dataset: &Dataset,
    original: (usize, usize),
    target: (usize, usize),
) -> Result<(AnnotationKind, Array2<bool>)> {
    match annotation {
        Annotation::Boxes(boxes) => Ok((
            AnnotationKind::Boxes,
            resize_nearest(rasterize_boxes(boxes, original).view(), target),
        )),
        Annotation::Mask(p) => Ok((
            AnnotationKind::Mask,
            resize_nearest(load_mask(dataset.resolve(p))?.view(), target),
        )),
    }
}

/// Run inference on every record and score it. Record order is kept.
pub fn evaluate(
    localizer: &Localizer<'_>,
    dataset: &Dataset,
    audio_cfg: &AudioPrepConfig,
    image_cfg: &ImagePrepConfig,
) -> Result<EvalReport> {
    let samples: Vec<ScoredSample> = dataset
        .records
        .par_iter()
        .map(|r| {
            let raw = load_image(dataset.resolve(&r.image_path))?;
            let image = preprocess_image(&raw, image_cfg)?;
            let (wav, sr) = load_audio(dataset.resolve(&r.audio_path))?;
            let audio = preprocess_audio(&wav, sr, audio_cfg)?;
            let pred = PredictionRecord::new(r.id.clone(), localizer.localize(&image, &audio)?);
            let gt = match &r.annotation {
                Some(a) => Some(annotation_mask(
                    a,
                    dataset,
                    raw.size(),
                    pred.binary_map.dim(),
                )?),
                None => None,
            };
            ScoredSample::score(
                r.id.clone(),
                r.polarity,
                &pred,
                gt.as_ref().map(|(k, m)| (*k, m)),
            )
        })
        .collect::<Result<_>>()?;
    build_report(&samples, &localizer.config().require_metrics)
}
