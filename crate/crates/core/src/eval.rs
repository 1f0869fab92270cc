//! Detections from branch outputs, class-wise NMS, branch ensembling and
//! COCO-style mAP.

use serde::{Deserialize, Serialize};

use crate::config::EnsembleMode;
use crate::decoder::BranchOutput;
use crate::episode::Annotation;
use crate::geometry::{iou, BBox};
use crate::numeric::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetBranch {
    Text,
    Visual,
    Ensemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub branch: DetBranch,
}

fn by_score_desc(dets: &mut [Detection]) {
    // stable, so equal scores keep their input order
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Max-class sigmoid score per query of the last layer, top-k, then NMS.
pub fn detections_from_output(out: &BranchOutput, top_k: usize, nms_iou: f64, branch: DetBranch) -> Vec<Detection> {
    let last = out.final_layer();
    let logits = &out.logits[last];
    let mut dets: Vec<Detection> = logits
        .rows()
        .zip(&out.boxes[last])
        .map(|(row, &bbox)| {
            let (class_id, z) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, z)| if z > best.1 { (k, z) } else { best });
            Detection { bbox, class_id, score: sigmoid(z), branch }
        })
        .collect();
    by_score_desc(&mut dets);
    dets.truncate(top_k);
    nms(dets, nms_iou)
}

/// Greedy class-wise NMS: a detection is dropped when it overlaps a kept,
/// higher-scoring detection of the same class with IoU above `iou_thr`.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    by_score_desc(&mut dets);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.class_id != d.class_id || iou(k.bbox, d.bbox) <= iou_thr) {
            kept.push(d);
        }
    }
    kept
}

/// Combines text- and visual-branch detections of one image.
pub fn ensemble_detections(text: &[Detection], visual: &[Detection], nms_iou: f64, mode: EnsembleMode) -> Vec<Detection> {
    let mut all: Vec<Detection> = text.iter().chain(visual).copied().collect();
    by_score_desc(&mut all);
    let mut out: Vec<Detection> = Vec::new();
    let mut members: Vec<[f64; 2]> = Vec::new();
    for d in all {
        let slot = if d.branch == DetBranch::Visual { 1 } else { 0 };
        match out.iter().position(|k| k.class_id == d.class_id && iou(k.bbox, d.bbox) > nms_iou) {
            Some(i) => members[i][slot] = members[i][slot].max(d.score),
            None => {
                let mut m = [0.0; 2];
                m[slot] = d.score;
                members.push(m);
                out.push(Detection { branch: DetBranch::Ensemble, ..d });
            }
        }
    }
    if mode == EnsembleMode::ScoreAverage {
        for (d, m) in out.iter_mut().zip(&members) {
            d.score = 0.5 * (m[0] + m[1]);
        }
        by_score_desc(&mut out);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapResult {
    /// Mean over classes with ground truth and over IoU thresholds.
    pub map: f64,
    /// AP per class averaged over thresholds; `None` for classes without GT.
    pub per_class: Vec<Option<f64>>,
    pub thresholds: Vec<f64>,
    /// mAP at each threshold.
    pub per_threshold: Vec<f64>,
}

/// 101-point interpolated AP from score-sorted TP flags.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(ctp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one IoU threshold.
fn class_ap(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], class_id: usize, thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|a| a.class_id == class_id).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut flat: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, *d)))
        .collect();
    flat.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp: Vec<bool> = flat
        .iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, a) in gts[*img].iter().enumerate() {
                if a.class_id != class_id || used[*img][j] {
                    continue;
                }
                let v = iou(d.bbox, a.bbox);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Some(interpolated_ap(&tp, n_gt))
}

/// COCO-style mAP over `n_class` classes; `dets[i]` and `gts[i]` belong to
/// image `i`.
pub fn evaluate_map(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], n_class: usize, thresholds: &[f64]) -> MapResult {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let mut per_class = vec![None; n_class];
    let mut per_threshold = vec![0.0; thresholds.len()];
    let mut n_valid = 0;
    for (c, slot) in per_class.iter_mut().enumerate() {
        let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| class_ap(dets, gts, c, t)).collect();
        if let Some(aps) = aps {
            n_valid += 1;
            for (acc, ap) in per_threshold.iter_mut().zip(&aps) {
                *acc += ap;
            }
            *slot = Some(aps.iter().sum::<f64>() / aps.len().max(1) as f64);
        }
    }
    if n_valid > 0 {
        per_threshold.iter_mut().for_each(|v| *v /= n_valid as f64);
    }
    let map = if n_valid == 0 || thresholds.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / thresholds.len() as f64
    };
    MapResult { map, per_class, thresholds: thresholds.to_vec(), per_threshold }
}
