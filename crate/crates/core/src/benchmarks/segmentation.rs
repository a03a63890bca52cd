//! Part segmentation metrics: semantic IoU (mIoU, fwIoU) over merged part
//! masks, and instance AP with greedy matching and 101-point interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ImageId;
use crate::mask::{BBox, BinaryMask};

/// Merges instance masks into one mask per label.
pub fn merge_instances<'a>(
    width: u32,
    height: u32,
    instances: impl IntoIterator<Item = (&'a str, &'a BinaryMask)>,
) -> Result<BTreeMap<String, BinaryMask>> {
    let mut out: BTreeMap<String, BinaryMask> = BTreeMap::new();
    for (label, mask) in instances {
        if mask.width() != width || mask.height() != height {
            return Err(Error::DimensionMismatch {
                expected: (width * height) as usize,
                found: (mask.width() * mask.height()) as usize,
            });
        }
        let merged = match out.remove(label) {
            Some(acc) => acc.union(mask)?,
            None => mask.clone(),
        };
        out.insert(label.to_string(), merged);
    }
    Ok(out)
}

/// Merged prediction and gold masks of one image, keyed by part label.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSample {
    pub width: u32,
    pub height: u32,
    pub pred: BTreeMap<String, BinaryMask>,
    pub gold: BTreeMap<String, BinaryMask>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PartIou {
    pub intersection: u64,
    pub union: u64,
    pub gold_pixels: u64,
    /// `None` when both prediction and gold are empty everywhere.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub per_part: BTreeMap<String, PartIou>,
    /// Percentages.
    pub miou: f64,
    pub fwiou: f64,
}

fn check_dims(sample: &SemanticSample, m: &BinaryMask) -> Result<()> {
    if m.width() != sample.width || m.height() != sample.height {
        return Err(Error::DimensionMismatch {
            expected: (sample.width * sample.height) as usize,
            found: (m.width() * m.height()) as usize,
        });
    }
    Ok(())
}

/// Pixel counts are summed over all samples before dividing. mIoU averages
/// parts with a non-empty union; fwIoU weights each part by its share of
/// gold pixels.
pub fn semantic_seg_metrics(samples: &[SemanticSample], parts: &[String]) -> Result<SegMetrics> {
    let mut per_part: BTreeMap<String, PartIou> =
        parts.iter().map(|p| (p.clone(), PartIou::default())).collect();
    for s in samples {
        for m in s.pred.values().chain(s.gold.values()) {
            check_dims(s, m)?;
        }
        for (label, acc) in per_part.iter_mut() {
            match (s.pred.get(label), s.gold.get(label)) {
                (Some(p), Some(g)) => {
                    acc.intersection += p.intersection_area(g)?;
                    acc.union += p.union_area(g)?;
                    acc.gold_pixels += g.area();
                }
                (Some(p), None) => acc.union += p.area(),
                (None, Some(g)) => {
                    acc.union += g.area();
                    acc.gold_pixels += g.area();
                }
                (None, None) => {}
            }
        }
    }
    let total_gold: u64 = per_part.values().map(|p| p.gold_pixels).sum();
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut fw = 0.0;
    for p in per_part.values_mut() {
        if p.union > 0 {
            let iou = p.intersection as f64 / p.union as f64;
            p.iou = Some(iou);
            sum += iou;
            counted += 1;
            if total_gold > 0 {
                fw += p.gold_pixels as f64 / total_gold as f64 * iou;
            }
        }
    }
    Ok(SegMetrics {
        per_part,
        miou: if counted > 0 { 100.0 * sum / counted as f64 } else { 0.0 },
        fwiou: 100.0 * fw,
    })
}

/// An instance region; masks take precedence over boxes for IoU when both
/// sides have one.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub image: ImageId,
    pub label: String,
    pub bbox: BBox,
    pub mask: Option<BinaryMask>,
    /// Prediction confidence; ignored for gold instances.
    pub score: f64,
}

impl Instance {
    pub fn iou(&self, other: &Instance) -> Result<f64> {
        match (&self.mask, &other.mask) {
            (Some(a), Some(b)) => a.iou(b),
            _ => Ok(self.bbox.iou(&other.bbox)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PartAp {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub gold: usize,
    pub predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApMetrics {
    /// Mean over parts with gold instances; percentages.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_part: BTreeMap<String, PartAp>,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Greedy matching of one image/part group at one threshold: predictions in
/// descending score order each take the unmatched gold with highest IoU at or
/// above the threshold. Returns a true-positive flag per prediction (in the
/// given order).
fn match_group(preds: &[&Instance], gold: &[&Instance], ious: &[Vec<f64>], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gold.len()];
    let mut tp = vec![false; preds.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in ious[p].iter().enumerate() {
            if taken[g] || iou < threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[p] = true;
        }
    }
    tp
}

/// Area under the 101-point interpolated precision-recall curve of scored
/// detections (score, is true positive) against `n_gold` gold instances.
pub fn average_precision(detections: &mut [(f64, usize, bool)], n_gold: usize) -> f64 {
    if n_gold == 0 {
        return 0.0;
    }
    detections.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(detections.len());
    let mut precision = Vec::with_capacity(detections.len());
    for (i, d) in detections.iter().enumerate() {
        tp += usize::from(d.2);
        recall.push(tp as f64 / n_gold as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = f64::from(k) / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Instance AP per part and averaged over parts that have gold instances.
pub fn instance_ap(predictions: &[Instance], gold: &[Instance]) -> Result<ApMetrics> {
    type Key<'a> = (&'a str, &'a ImageId);
    type Group<'a> = (Vec<(usize, &'a Instance)>, Vec<&'a Instance>);
    // (score, prediction index, tp)
    type Detection = (f64, usize, bool);
    let mut groups: BTreeMap<Key, Group> = BTreeMap::new();
    for (i, p) in predictions.iter().enumerate() {
        groups.entry((&p.label, &p.image)).or_default().0.push((i, p));
    }
    for g in gold {
        groups.entry((&g.label, &g.image)).or_default().1.push(g);
    }
    let thresholds = iou_thresholds();
    // per label, per threshold
    let mut dets: BTreeMap<&str, Vec<Vec<Detection>>> = BTreeMap::new();
    let mut n_gold: BTreeMap<&str, usize> = BTreeMap::new();
    for ((label, _), (preds, golds)) in &groups {
        *n_gold.entry(label).or_default() += golds.len();
        let entry = dets
            .entry(label)
            .or_insert_with(|| vec![Vec::new(); thresholds.len()]);
        let pred_refs: Vec<&Instance> = preds.iter().map(|(_, p)| *p).collect();
        let ious = pred_refs
            .iter()
            .map(|p| golds.iter().map(|g| p.iou(g)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        for (ti, &thr) in thresholds.iter().enumerate() {
            let tp = match_group(&pred_refs, golds, &ious, thr);
            for (k, (idx, p)) in preds.iter().enumerate() {
                entry[ti].push((p.score, *idx, tp[k]));
            }
        }
    }
    let mut per_part = BTreeMap::new();
    for (label, mut per_thr) in dets {
        let n = n_gold[label];
        let aps: Vec<f64> = per_thr
            .iter_mut()
            .map(|d| average_precision(d, n))
            .collect();
        per_part.insert(
            label.to_string(),
            PartAp {
                ap: 100.0 * aps.iter().sum::<f64>() / aps.len() as f64,
                ap50: 100.0 * aps[0],
                ap75: 100.0 * aps[5],
                gold: n,
                predictions: per_thr[0].len(),
            },
        );
    }
    let scored: Vec<&PartAp> = per_part.values().filter(|p| p.gold > 0).collect();
    let mean = |f: fn(&PartAp) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|p| f(p)).sum::<f64>() / scored.len() as f64
        }
    };
    Ok(ApMetrics {
        ap: mean(|p| p.ap),
        ap50: mean(|p| p.ap50),
        ap75: mean(|p| p.ap75),
        per_part,
    })
}
