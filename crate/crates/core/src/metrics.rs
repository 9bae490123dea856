//! COCO-style average precision and the Localization Recall Precision error
//! family, for boxes and for masks.
//!
//! AP: greedy confidence-ordered matching per (image, class), 101-point
//! interpolated precision over IoU thresholds 0.50:0.05:0.95, averaged over
//! classes with at least one ground truth. Size buckets use the COCO areas
//! (S < 32^2, M in [32^2, 96^2], L > 96^2) with out-of-range instances
//! ignored rather than penalized.
//!
//! LRP at a confidence threshold combines localization error of true
//! positives with false-positive and false-negative rates; oLRP is its
//! minimum over the confidence sweep, reported with the components at the
//! minimizing threshold and averaged over classes. Lower is better.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::{iou as box_iou, BoxF, FaceLabel};

pub const LRP_IOU: f64 = 0.5;
pub const COCO_IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Area buckets in pixels^2: small < 32^2, medium in [32^2, 96^2], large > 96^2.
pub const AREA_SMALL: (f64, f64) = (0.0, 1024.0);
pub const AREA_MEDIUM: (f64, f64) = (1024.0, 9216.0);
pub const AREA_LARGE: (f64, f64) = (9216.0, f64::INFINITY);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Box,
    Mask,
}

/// One detection; confidence ties break by insertion order.
#[derive(Clone, Debug)]
pub struct Detection {
    pub image_id: u64,
    pub class: FaceLabel,
    pub confidence: f64,
    pub bbox: BoxF,
    pub mask: Option<Array2<u8>>,
}

/// One ground-truth instance. `area` drives the size buckets (mask area in
/// the COCO convention; box area when no mask exists).
#[derive(Clone, Debug)]
pub struct GtInstance {
    pub image_id: u64,
    pub class: FaceLabel,
    pub bbox: BoxF,
    pub mask: Option<Array2<u8>>,
    pub area: f64,
}

pub fn mask_iou(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim(), "mask shapes must match");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x != 0, y != 0);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn pair_iou(det: &Detection, gt: &GtInstance, kind: Kind) -> f64 {
    match kind {
        Kind::Box => box_iou(&det.bbox, &gt.bbox),
        Kind::Mask => match (&det.mask, &gt.mask) {
            (Some(a), Some(b)) => mask_iou(a, b),
            _ => 0.0,
        },
    }
}

fn det_area(det: &Detection, kind: Kind) -> f64 {
    match kind {
        Kind::Box => det.bbox.area(),
        Kind::Mask => det
            .mask
            .as_ref()
            .map(|m| m.iter().filter(|&&v| v != 0).count() as f64)
            .unwrap_or_else(|| det.bbox.area()),
    }
}

/// Greedy one-to-one matching for one (image, class) group: detections in
/// descending confidence (ties by list order) each take the unmatched ground
/// truth with the highest IoU at or above the threshold.
///
/// Returns, per detection index into `dets`, the matched gt index.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GtInstance],
    iou_threshold: f64,
    kind: Kind,
) -> Vec<Option<usize>> {
    let order = confidence_order(dets);
    let mut gt_taken = vec![false; gts.len()];
    let mut matches = vec![None; dets.len()];
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let v = pair_iou(&dets[di], gt, kind);
            if v >= iou_threshold && best.map(|(_, b)| v > b).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            matches[di] = Some(gi);
        }
    }
    matches
}

fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

fn group_by_image<'a, T>(items: &'a [T], image_of: impl Fn(&T) -> u64) -> BTreeMap<u64, Vec<usize>> {
    let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        map.entry(image_of(item)).or_default().push(i);
    }
    map
}

/// 101-point interpolated AP from a list of `(confidence, insertion, is_tp)`
/// records and the positive count.
fn ap_from_records(mut records: Vec<(f64, usize, bool)>, n_pos: usize) -> f64 {
    if n_pos == 0 {
        return f64::NAN;
    }
    records.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prec = Vec::with_capacity(records.len());
    let mut rec = Vec::with_capacity(records.len());
    for &(_, _, is_tp) in &records {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / n_pos as f64);
    }
    // precision envelope (monotone non-increasing from the right)
    for i in (0..prec.len().saturating_sub(1)).rev() {
        if prec[i] < prec[i + 1] {
            prec[i] = prec[i + 1];
        }
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        // first index with recall >= r
        let p = rec
            .iter()
            .position(|&rv| rv >= r - 1e-12)
            .map(|i| prec[i])
            .unwrap_or(0.0);
        total += p;
    }
    total / 101.0
}

fn classes_with_gt(gts: &[GtInstance]) -> Vec<FaceLabel> {
    [FaceLabel::Real, FaceLabel::Fake]
        .into_iter()
        .filter(|c| gts.iter().any(|g| g.class == *c))
        .collect()
}

/// Per-(class, kind) evaluation cache: pair IoUs computed once and reused
/// across IoU thresholds, area ranges, and the confidence sweep.
struct ImgGroup {
    det_global: Vec<usize>,
    det_conf: Vec<f64>,
    det_area: Vec<f64>,
    /// Local det indices in descending confidence (ties by insertion).
    det_order: Vec<usize>,
    gt_area: Vec<f64>,
    /// `iou[local_det][gt]`.
    iou: Vec<Vec<f64>>,
}

struct ClassEval {
    groups: Vec<ImgGroup>,
}

fn build_class_eval(
    dets: &[Detection],
    gts: &[GtInstance],
    class: FaceLabel,
    kind: Kind,
) -> ClassEval {
    let class_dets: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class == class)
        .collect();
    let class_gts: Vec<&GtInstance> = gts.iter().filter(|g| g.class == class).collect();
    let det_images = group_by_image(&class_dets, |(_, d)| d.image_id);
    let gt_images = group_by_image(&class_gts, |g| g.image_id);
    let mut images: Vec<u64> = det_images.keys().chain(gt_images.keys()).copied().collect();
    images.sort_unstable();
    images.dedup();
    let mut groups = Vec::with_capacity(images.len());
    for img in images {
        let d_idx = det_images.get(&img).cloned().unwrap_or_default();
        let g_idx = gt_images.get(&img).cloned().unwrap_or_default();
        let det_global: Vec<usize> = d_idx.iter().map(|&i| class_dets[i].0).collect();
        let det_conf: Vec<f64> = d_idx.iter().map(|&i| class_dets[i].1.confidence).collect();
        let det_area: Vec<f64> = d_idx
            .iter()
            .map(|&i| det_area(class_dets[i].1, kind))
            .collect();
        let gt_area: Vec<f64> = g_idx.iter().map(|&i| class_gts[i].area).collect();
        let iou: Vec<Vec<f64>> = d_idx
            .iter()
            .map(|&di| {
                g_idx
                    .iter()
                    .map(|&gi| pair_iou(class_dets[di].1, class_gts[gi], kind))
                    .collect()
            })
            .collect();
        let mut det_order: Vec<usize> = (0..det_global.len()).collect();
        det_order.sort_by(|&a, &b| {
            det_conf[b]
                .partial_cmp(&det_conf[a])
                .unwrap()
                .then(det_global[a].cmp(&det_global[b]))
        });
        groups.push(ImgGroup {
            det_global,
            det_conf,
            det_area,
            det_order,
            gt_area,
            iou,
        });
    }
    ClassEval { groups }
}

/// AP for one class over one IoU threshold and area range; NaN when the
/// class has no counted ground truth there.
fn class_ap_cached(eval: &ClassEval, iou_threshold: f64, area_range: Option<(f64, f64)>) -> f64 {
    let in_range = |a: f64| {
        area_range
            .map(|(lo, hi)| a >= lo && a <= hi)
            .unwrap_or(true)
    };
    let mut records: Vec<(f64, usize, bool)> = Vec::new();
    let mut n_pos = 0usize;
    for grp in &eval.groups {
        let gt_ignore: Vec<bool> = grp.gt_area.iter().map(|&a| !in_range(a)).collect();
        n_pos += gt_ignore.iter().filter(|&&ig| !ig).count();
        let mut gt_taken = vec![false; gt_ignore.len()];
        for &di in &grp.det_order {
            // prefer counted ground truths, then ignored ones
            let mut best: Option<(usize, f64)> = None;
            for gi in 0..gt_ignore.len() {
                if gt_taken[gi] {
                    continue;
                }
                let v = grp.iou[di][gi];
                if v < iou_threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bgi, bv)) => match (gt_ignore[bgi], gt_ignore[gi]) {
                        (true, false) => true,
                        (false, true) => false,
                        _ => v > bv,
                    },
                };
                if better {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) if !gt_ignore[gi] => {
                    gt_taken[gi] = true;
                    records.push((grp.det_conf[di], grp.det_global[di], true));
                }
                Some((gi, _)) => {
                    gt_taken[gi] = true; // matched an ignored gt: drop the det
                }
                None => {
                    if in_range(grp.det_area[di]) {
                        records.push((grp.det_conf[di], grp.det_global[di], false));
                    }
                }
            }
        }
    }
    ap_from_records(records, n_pos)
}

fn mean_ignoring_nan(values: &[f64]) -> f64 {
    let vals: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ApSummary {
    pub ap: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

/// COCO-style AP, values x100.
pub fn coco_ap(dets: &[Detection], gts: &[GtInstance], kind: Kind) -> ApSummary {
    let classes = classes_with_gt(gts);
    let evals: Vec<ClassEval> = classes
        .iter()
        .map(|&c| build_class_eval(dets, gts, c, kind))
        .collect();
    let bucket = |range: Option<(f64, f64)>| {
        let mut per = Vec::new();
        for eval in &evals {
            for &t in COCO_IOU_THRESHOLDS.iter() {
                per.push(class_ap_cached(eval, t, range));
            }
        }
        100.0 * mean_ignoring_nan(&per)
    };
    ApSummary {
        ap: bucket(None),
        ap_s: bucket(Some(AREA_SMALL)),
        ap_m: bucket(Some(AREA_MEDIUM)),
        ap_l: bucket(Some(AREA_LARGE)),
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct LrpValues {
    pub lrp: f64,
    pub lrp_loc: f64,
    pub lrp_fp: f64,
    pub lrp_fn: f64,
}

/// LRP at one operating point (detections already filtered by confidence),
/// single class. Values x100.
pub fn lrp_at(dets: &[Detection], gts: &[GtInstance], tau_iou: f64, kind: Kind) -> LrpValues {
    let det_images = group_by_image(dets, |d| d.image_id);
    let gt_images = group_by_image(gts, |g| g.image_id);
    let mut tp_ious: Vec<f64> = Vec::new();
    let mut n_fp = 0usize;
    let mut images: Vec<u64> = det_images.keys().chain(gt_images.keys()).copied().collect();
    images.sort_unstable();
    images.dedup();
    for img in images {
        let d_idx = det_images.get(&img).cloned().unwrap_or_default();
        let g_idx = gt_images.get(&img).cloned().unwrap_or_default();
        let dets_img: Vec<Detection> = d_idx.iter().map(|&i| dets[i].clone()).collect();
        let gts_img: Vec<GtInstance> = g_idx.iter().map(|&i| gts[i].clone()).collect();
        let matches = match_detections(&dets_img, &gts_img, tau_iou, kind);
        for (di, m) in matches.iter().enumerate() {
            match m {
                Some(gi) => tp_ious.push(pair_iou(&dets_img[di], &gts_img[*gi], kind)),
                None => n_fp += 1,
            }
        }
    }
    lrp_from_counts(&tp_ious, n_fp, gts.len(), tau_iou)
}

/// Optimal LRP: minimum over the confidence sweep, components reported at
/// the minimizing threshold, averaged over classes with ground truth.
pub fn optimal_lrp(dets: &[Detection], gts: &[GtInstance], kind: Kind) -> LrpValues {
    let classes = classes_with_gt(gts);
    let mut acc = LrpValues::default();
    let mut n = 0usize;
    for &class in &classes {
        let class_dets: Vec<Detection> = dets.iter().filter(|d| d.class == class).cloned().collect();
        let class_gts: Vec<GtInstance> = gts.iter().filter(|g| g.class == class).cloned().collect();
        let best = optimal_lrp_single_class(&class_dets, &class_gts, kind);
        acc.lrp += best.lrp;
        acc.lrp_loc += best.lrp_loc;
        acc.lrp_fp += best.lrp_fp;
        acc.lrp_fn += best.lrp_fn;
        n += 1;
    }
    if n > 0 {
        acc.lrp /= n as f64;
        acc.lrp_loc /= n as f64;
        acc.lrp_fp /= n as f64;
        acc.lrp_fn /= n as f64;
    }
    acc
}

fn optimal_lrp_single_class(dets: &[Detection], gts: &[GtInstance], kind: Kind) -> LrpValues {
    // Sweep thresholds: every distinct confidence, plus one above all
    // (no detections kept). Pair IoUs are computed once.
    let class = gts.first().map(|g| g.class).unwrap_or(FaceLabel::Real);
    let eval = build_class_eval(dets, gts, class, kind);
    let n_gt_total: usize = eval.groups.iter().map(|g| g.gt_area.len()).sum();
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut best: Option<LrpValues> = None;
    let candidates = std::iter::once(None).chain(thresholds.into_iter().map(Some));
    for thr in candidates {
        let mut tp_ious: Vec<f64> = Vec::new();
        let mut n_fp = 0usize;
        for grp in &eval.groups {
            let mut gt_taken = vec![false; grp.gt_area.len()];
            for &di in &grp.det_order {
                if let Some(t) = thr {
                    if grp.det_conf[di] < t {
                        continue;
                    }
                } else {
                    continue; // empty subset
                }
                let mut best_gt: Option<(usize, f64)> = None;
                for gi in 0..gt_taken.len() {
                    if gt_taken[gi] {
                        continue;
                    }
                    let v = grp.iou[di][gi];
                    if v >= LRP_IOU && best_gt.map(|(_, b)| v > b).unwrap_or(true) {
                        best_gt = Some((gi, v));
                    }
                }
                match best_gt {
                    Some((gi, v)) => {
                        gt_taken[gi] = true;
                        tp_ious.push(v);
                    }
                    None => n_fp += 1,
                }
            }
        }
        let v = lrp_from_counts(&tp_ious, n_fp, n_gt_total, LRP_IOU);
        if best.map(|b| v.lrp < b.lrp).unwrap_or(true) {
            best = Some(v);
        }
    }
    best.unwrap_or_default()
}

fn lrp_from_counts(tp_ious: &[f64], n_fp: usize, n_gt: usize, tau_iou: f64) -> LrpValues {
    let n_tp = tp_ious.len();
    let n_fn = n_gt - n_tp;
    let loc_sum: f64 = tp_ious.iter().map(|&v| (1.0 - v) / (1.0 - tau_iou)).sum();
    let denom = (n_tp + n_fp + n_fn) as f64;
    let lrp = if denom == 0.0 {
        0.0
    } else {
        (loc_sum + n_fp as f64 + n_fn as f64) / denom
    };
    let lrp_loc = if n_tp == 0 { 1.0 } else { loc_sum / n_tp as f64 };
    let lrp_fp = if n_tp + n_fp == 0 {
        0.0
    } else {
        n_fp as f64 / (n_tp + n_fp) as f64
    };
    let lrp_fn = if n_tp + n_fn == 0 {
        0.0
    } else {
        n_fn as f64 / (n_tp + n_fn) as f64
    };
    LrpValues {
        lrp: 100.0 * lrp,
        lrp_loc: 100.0 * lrp_loc,
        lrp_fp: 100.0 * lrp_fp,
        lrp_fn: 100.0 * lrp_fn,
    }
}

/// One line of the report, values x100 rounded to one decimal.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricSet {
    pub ap: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub olrp: f64,
    pub olrp_loc: f64,
    pub olrp_fp: f64,
    pub olrp_fn: f64,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl MetricSet {
    fn build(dets: &[Detection], gts: &[GtInstance], kind: Kind) -> MetricSet {
        let ap = coco_ap(dets, gts, kind);
        let olrp = optimal_lrp(dets, gts, kind);
        MetricSet {
            ap: round1(ap.ap),
            ap_s: round1(ap.ap_s),
            ap_m: round1(ap.ap_m),
            ap_l: round1(ap.ap_l),
            olrp: round1(olrp.lrp),
            olrp_loc: round1(olrp.lrp_loc),
            olrp_fp: round1(olrp.lrp_fp),
            olrp_fn: round1(olrp.lrp_fn),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub format_version: u32,
    pub detection: MetricSet,
    pub segmentation: MetricSet,
    /// Per-class breakdown keyed by category name.
    pub per_class: BTreeMap<String, PerClassMetrics>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct PerClassMetrics {
    pub detection: MetricSet,
    pub segmentation: MetricSet,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Full report over both kinds, with per-class breakdown.
pub fn evaluate_detections(dets: &[Detection], gts: &[GtInstance]) -> EvalReport {
    let mut per_class = BTreeMap::new();
    for (class, name) in [(FaceLabel::Real, "real"), (FaceLabel::Fake, "fake")] {
        if !gts.iter().any(|g| g.class == class) {
            continue;
        }
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class == class).cloned().collect();
        let cg: Vec<GtInstance> = gts.iter().filter(|g| g.class == class).cloned().collect();
        per_class.insert(
            name.to_string(),
            PerClassMetrics {
                detection: MetricSet::build(&cd, &cg, Kind::Box),
                segmentation: MetricSet::build(&cd, &cg, Kind::Mask),
            },
        );
    }
    EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        detection: MetricSet::build(dets, gts, Kind::Box),
        segmentation: MetricSet::build(dets, gts, Kind::Mask),
        per_class,
    }
}
