//! Semantic and instance segmentation metrics: Dice, AJI, DQ/SQ/PQ, and
//! 8-connected component extraction for turning semantic masks into
//! instance maps.
//!
//! Conventions for degenerate inputs: two empty maps score 1.0 on every
//! metric; exactly one empty map scores 0.0.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, DomainDataset, InstanceMap, Mask, Sample};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::pooling::pseudo_label;
use crate::tensor::Real;

pub const PQ_IOU_THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 8;

fn same_shape<A, B>(a: &ndarray::Array2<A>, b: &ndarray::Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`, 1.0 when both masks are empty.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p > 0, g > 0);
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Labels 8-connected foreground components 1..k in raster order of their
/// first pixel.
pub fn extract_instances(mask: &Mask) -> InstanceMap {
    let (h, w) = mask.dim();
    let mut out = InstanceMap::zeros((h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || out[[y, x]] != 0 {
                continue;
            }
            next += 1;
            out[[y, x]] = next;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] != 0 && out[[ny, nx]] == 0 {
                            out[[ny, nx]] = next;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Pixel areas and pairwise intersections of two instance maps.
struct Overlaps {
    gt_area: BTreeMap<u32, usize>,
    pred_area: BTreeMap<u32, usize>,
    /// gt label -> (pred label -> intersection)
    inter: BTreeMap<u32, BTreeMap<u32, usize>>,
}

impl Overlaps {
    fn new(gt: &InstanceMap, pred: &InstanceMap) -> Self {
        let mut o = Overlaps {
            gt_area: BTreeMap::new(),
            pred_area: BTreeMap::new(),
            inter: BTreeMap::new(),
        };
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            if g > 0 {
                *o.gt_area.entry(g).or_default() += 1;
            }
            if p > 0 {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g > 0 && p > 0 {
                *o.inter.entry(g).or_default().entry(p).or_default() += 1;
            }
        }
        o
    }

    fn iou(&self, g: u32, p: u32, i: usize) -> f64 {
        i as f64 / (self.gt_area[&g] + self.pred_area[&p] - i) as f64
    }
}

/// Aggregated Jaccard Index. Ground-truth instances are visited in ascending
/// label order; each takes the unused overlapping prediction of highest IoU
/// (lowest label on ties). A ground-truth instance with no available overlap
/// adds its area to the union. Unused predictions add their areas to the union.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    same_shape(gt, pred)?;
    let o = Overlaps::new(gt, pred);
    match (o.gt_area.is_empty(), o.pred_area.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mut used = BTreeSet::new();
    let (mut inter_sum, mut union_sum) = (0usize, 0usize);
    for (&g, &area) in &o.gt_area {
        let mut best: Option<(u32, f64, usize)> = None;
        if let Some(row) = o.inter.get(&g) {
            for (&p, &i) in row {
                if used.contains(&p) {
                    continue;
                }
                let iou = o.iou(g, p, i);
                if best.map_or(true, |(_, b, _)| iou > b) {
                    best = Some((p, iou, i));
                }
            }
        }
        match best {
            Some((p, _, i)) => {
                used.insert(p);
                inter_sum += i;
                union_sum += area + o.pred_area[&p] - i;
            }
            None => union_sum += area,
        }
    }
    union_sum += o
        .pred_area
        .iter()
        .filter(|(p, _)| !used.contains(*p))
        .map(|(_, &a)| a)
        .sum::<usize>();
    Ok(inter_sum as f64 / union_sum as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panoptic {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

/// Panoptic quality with IoU > 0.5 matching.
pub fn panoptic(gt: &InstanceMap, pred: &InstanceMap) -> Result<Panoptic> {
    panoptic_with_threshold(gt, pred, PQ_IOU_THRESHOLD)
}

/// Panoptic quality where a match requires IoU strictly above `threshold`.
/// Thresholds below 0.5 would make matches ambiguous and are rejected.
pub fn panoptic_with_threshold(gt: &InstanceMap, pred: &InstanceMap, threshold: f64) -> Result<Panoptic> {
    same_shape(gt, pred)?;
    if !(PQ_IOU_THRESHOLD..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("IoU threshold {threshold} outside [0.5, 1]")));
    }
    let o = Overlaps::new(gt, pred);
    let (n_gt, n_pred) = (o.gt_area.len(), o.pred_area.len());
    if n_gt == 0 && n_pred == 0 {
        return Ok(Panoptic {
            dq: 1.0,
            sq: 1.0,
            pq: 1.0,
        });
    }
    let mut tp = 0usize;
    let mut iou_sum = 0.0;
    for (&g, row) in &o.inter {
        for (&p, &i) in row {
            let iou = o.iou(g, p, i);
            if iou > threshold {
                tp += 1;
                iou_sum += iou;
            }
        }
    }
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    let dq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
    Ok(Panoptic { dq, sq, pq: dq * sq })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub aji: Option<f64>,
    pub dq: Option<f64>,
    pub sq: Option<f64>,
    pub pq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub dice: f64,
    pub aji: Option<f64>,
    pub dq: Option<f64>,
    pub sq: Option<f64>,
    pub pq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
    pub n_images: usize,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyDataset("no images to evaluate".into()));
        }
        let aggregate = AggregateMetrics {
            dice: mean(per_image.iter().map(|m| Some(m.dice))).unwrap_or(0.0),
            aji: mean(per_image.iter().map(|m| m.aji)),
            dq: mean(per_image.iter().map(|m| m.dq)),
            sq: mean(per_image.iter().map(|m| m.sq)),
            pq: mean(per_image.iter().map(|m| m.pq)),
        };
        Ok(MetricsReport {
            n_images: per_image.len(),
            per_image,
            aggregate,
        })
    }

    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "   -  ".to_string(), |v| format!("{v:.4}"));
        let a = &self.aggregate;
        let mut s = String::new();
        s.push_str("| images | Dice   | AJI    | DQ     | SQ     | PQ     |\n");
        s.push_str("|--------|--------|--------|--------|--------|--------|\n");
        s.push_str(&format!(
            "| {:>6} | {} | {} | {} | {} | {} |\n",
            self.n_images,
            fmt(Some(a.dice)),
            fmt(a.aji),
            fmt(a.dq),
            fmt(a.sq),
            fmt(a.pq)
        ));
        s
    }
}

/// Scores one predicted mask against a sample's ground truth. Instance
/// metrics are computed only when the sample carries an instance map.
pub fn score_prediction(sample: &Sample, pred: &Mask) -> Result<ImageMetrics> {
    let gt = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sample '{}' has no ground-truth mask", sample.id)))?;
    let dice = dice_score(pred, gt)?;
    let (aji_v, pan) = match &sample.instance_map {
        Some(gt_inst) => {
            let pred_inst = extract_instances(pred);
            (Some(aji(gt_inst, &pred_inst)?), Some(panoptic(gt_inst, &pred_inst)?))
        }
        None => (None, None),
    };
    Ok(ImageMetrics {
        id: sample.id.clone(),
        dice,
        aji: aji_v,
        dq: pan.map(|p| p.dq),
        sq: pan.map(|p| p.sq),
        pq: pan.map(|p| p.pq),
    })
}

/// Eval-mode predictions (`logit > 0`) for every sample.
pub fn predict_masks<F: Real>(bundle: &mut ModelBundle<F>, samples: &[Sample]) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = images_to_tensor::<F>(&refs)?;
        let logits = bundle.predict_logits(&x)?;
        for l in logits.axis_iter(Axis(0)) {
            out.push(pseudo_label(&l.index_axis(Axis(0), 0)));
        }
    }
    Ok(out)
}

/// Evaluation-mode forward pass, 0.5 threshold, per-image metrics and their
/// unweighted means.
pub fn evaluate<F: Real>(bundle: &mut ModelBundle<F>, dataset: &DomainDataset) -> Result<MetricsReport> {
    dataset.require_non_empty("evaluation dataset")?;
    dataset.require_masks("evaluation dataset")?;
    let preds = predict_masks(bundle, &dataset.samples)?;
    evaluate_masks(dataset, &preds)
}

/// Scores externally produced masks, matched to the dataset by position.
pub fn evaluate_masks(dataset: &DomainDataset, preds: &[Mask]) -> Result<MetricsReport> {
    dataset.require_non_empty("evaluation dataset")?;
    if preds.len() != dataset.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} samples",
            preds.len(),
            dataset.len()
        )));
    }
    let per_image = dataset
        .samples
        .iter()
        .zip(preds)
        .map(|(s, p)| score_prediction(s, p))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_images(per_image)
}

/// Scores masks keyed by sample id.
pub fn evaluate_mask_map(dataset: &DomainDataset, preds: &HashMap<String, Mask>) -> Result<MetricsReport> {
    let ordered = dataset
        .samples
        .iter()
        .map(|s| {
            preds
                .get(&s.id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no prediction for '{}'", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_masks(dataset, &ordered)
}
