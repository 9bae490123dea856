//! Minimal anchor-free instance-segmentation detector: a small residual
//! backbone feeding a 5-level feature pyramid (levels 3..7, strides 8..128),
//! per-cell heads (two-class logits, objectness, box distances), a projection
//! head for proposal embeddings, and a crop-based mask head.
//!
//! Restricting the classes to real and fake faces is what turns the plain
//! detector into a forgery detector; the contrastive machinery in
//! `coarse`/`fine` attaches to the hooks exposed here.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::{FeaConfig, ModelConfig, LEVELS};
use crate::error::{Error, Result};
use crate::fea::{srm_residual_batch, AttentionBranch, SrmKernels};
use crate::nn::{BatchNorm2d, Conv2d, ForwardCtx, Linear, ParamSet};
use crate::tensor::{Roi, Tape, Var};

/// Axis-aligned box in input-image pixels, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxF {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxF { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clip(&self, w: f64, h: f64) -> BoxF {
        BoxF {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// Intersection over union; degenerate boxes give 0.
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaceLabel {
    Real,
    Fake,
}

impl FaceLabel {
    pub fn category_id(&self) -> u32 {
        match self {
            FaceLabel::Real => 0,
            FaceLabel::Fake => 1,
        }
    }

    pub fn from_category_id(id: u32) -> Option<FaceLabel> {
        match id {
            0 => Some(FaceLabel::Real),
            1 => Some(FaceLabel::Fake),
            _ => None,
        }
    }
}

/// One annotated face: box, label, and full-resolution binary mask.
#[derive(Clone, Debug)]
pub struct GtFace {
    pub bbox: BoxF,
    pub label: FaceLabel,
    pub mask: Array2<u8>,
}

/// Per-image multi-scale feature maps (plain arrays, single image).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<usize, Array3<f64>>,
    pub image_size: (usize, usize),
}

impl FeaturePyramid {
    /// Panics on violated shape invariants; used by tests and debug paths.
    pub fn check_invariants(&self) {
        assert_eq!(self.levels.len(), LEVELS.len(), "pyramid must hold levels 3..7");
        let (h, w) = self.image_size;
        let mut channels = None;
        for (&lv, map) in &self.levels {
            assert!(LEVELS.contains(&lv));
            let (c, mh, mw) = map.dim();
            assert_eq!(mh, ceil_div(h, 1 << lv), "level {lv} height");
            assert_eq!(mw, ceil_div(w, 1 << lv), "level {lv} width");
            match channels {
                None => channels = Some(c),
                Some(c0) => assert_eq!(c, c0, "pyramid channel counts differ"),
            }
        }
    }
}

pub fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// A candidate face region.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub level: usize,
    pub bbox: BoxF,
    /// Raw (real, fake) logits.
    pub class_logits: [f64; 2],
    pub objectness: f64,
    /// D-dim projection-head embedding.
    pub feature: Vec<f64>,
    /// Source cell `(image index, y, x)` on the level grid.
    pub cell: (usize, usize, usize),
}

/// A predicted mask with its region feature grid.
#[derive(Clone, Debug)]
pub struct PredictedMask {
    pub proposal_id: usize,
    /// `[D, S, S]` feature grid.
    pub feature_map: Array3<f64>,
    /// `[S, S]` probabilities in [0,1].
    pub mask_prob: Array2<f64>,
}

/// Tape-side head outputs for one pyramid level of a batch.
pub struct LevelHead<'t> {
    pub level: usize,
    pub stride: usize,
    pub cls: Var<'t>,
    pub obj: Var<'t>,
    pub ltrb: Var<'t>,
}

/// Tape-side proposals for one level: plain metadata plus the `[M,D]`
/// embedding node (row i belongs to `props[i]`).
pub struct LevelProposals<'t> {
    pub level: usize,
    pub props: Vec<Proposal>,
    pub features: Option<Var<'t>>,
}

/// Tape-side mask head outputs: `[R,D,S,S]` features, `[R,1,S,S]` logits.
pub struct MaskVars<'t> {
    pub features: Var<'t>,
    pub logits: Var<'t>,
}

pub struct Detector {
    pub cfg: ModelConfig,
    pub fea_cfg: FeaConfig,
    kernels: SrmKernels,
    stem: (Conv2d, BatchNorm2d),
    down: Vec<(Conv2d, BatchNorm2d)>,
    res_a: (Conv2d, BatchNorm2d),
    res_b: (Conv2d, BatchNorm2d),
    fea_branch: AttentionBranch,
    tower: Conv2d,
    cls_head: Conv2d,
    obj_head: Conv2d,
    box_head: Conv2d,
    proj1: Linear,
    proj2: Linear,
    mask1: Conv2d,
    mask2: Conv2d,
    mask_out: Conv2d,
}

/// Initial box-head bias: distances start at `e^BOX_BIAS`, i.e. about two
/// strides per side, so fresh proposals are plausibly face-sized.
const BOX_BIAS: f64 = 0.6931471805599453; // ln 2

impl Detector {
    pub fn new(cfg: ModelConfig, fea_cfg: FeaConfig) -> Result<Self> {
        let kernels = SrmKernels::by_name(&fea_cfg.kernel_set)?;
        let c = cfg.channels;
        let d = cfg.embed_dim;
        let down = vec![
            (Conv2d::new("ext.d2", c, c, 3, 2, 1), BatchNorm2d::new("ext.d2.bn", c)),
            (Conv2d::new("ext.d3", c, c, 3, 2, 1), BatchNorm2d::new("ext.d3.bn", c)),
            (Conv2d::new("ext.d4", c, c, 3, 2, 1), BatchNorm2d::new("ext.d4.bn", c)),
            (Conv2d::new("ext.d5", c, c, 3, 2, 1), BatchNorm2d::new("ext.d5.bn", c)),
            (Conv2d::new("ext.d6", c, c, 3, 2, 1), BatchNorm2d::new("ext.d6.bn", c)),
            (Conv2d::new("ext.d7", c, c, 3, 2, 1), BatchNorm2d::new("ext.d7.bn", c)),
        ];
        Ok(Detector {
            kernels,
            stem: (Conv2d::new("ext.stem", 3, c, 3, 2, 1), BatchNorm2d::new("ext.stem.bn", c)),
            down,
            res_a: (Conv2d::new("ext.res_a", c, c, 3, 1, 1), BatchNorm2d::new("ext.res_a.bn", c)),
            res_b: (Conv2d::new("ext.res_b", c, c, 3, 1, 1), BatchNorm2d::new("ext.res_b.bn", c)),
            fea_branch: AttentionBranch::new(cfg.attn_channels),
            tower: Conv2d::new("head.tower", c, c, 3, 1, 1),
            cls_head: Conv2d::new("head.cls", c, 2, 3, 1, 1),
            obj_head: Conv2d::new("head.obj", c, 1, 3, 1, 1),
            box_head: Conv2d::new("head.box", c, 4, 3, 1, 1),
            proj1: Linear::new("head.proj1", c, d),
            proj2: Linear::new("head.proj2", d, d),
            mask1: Conv2d::new("head.mask1", c, d, 3, 1, 1),
            mask2: Conv2d::new("head.mask2", d, d, 3, 1, 1),
            mask_out: Conv2d::new("head.mask_out", d, 1, 3, 1, 1),
            cfg,
            fea_cfg,
        })
    }

    /// Feature-extractor parameters (the momentum-copied tree).
    pub fn init_extractor_params(&self, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        let init_conv = |conv: &Conv2d, bn: &BatchNorm2d, p: &mut ParamSet| {
            let mut rng = crate::rng::stream(seed, &format!("init:{}", conv.name), 0);
            conv.init(p, &mut rng);
            bn.init(p);
        };
        init_conv(&self.stem.0, &self.stem.1, &mut p);
        for (conv, bn) in &self.down {
            init_conv(conv, bn, &mut p);
        }
        init_conv(&self.res_a.0, &self.res_a.1, &mut p);
        init_conv(&self.res_b.0, &self.res_b.1, &mut p);
        // Attention branch parameters always exist so that toggling the
        // branch never changes the parameter tree or any other stream.
        self.fea_branch.init(&mut p, seed);
        p
    }

    /// Proposal-generator and mask-predictor parameters (shared by views).
    pub fn init_head_params(&self, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        for conv in [
            &self.tower,
            &self.cls_head,
            &self.obj_head,
            &self.box_head,
            &self.mask1,
            &self.mask2,
            &self.mask_out,
        ] {
            let mut rng = crate::rng::stream(seed, &format!("init:{}", conv.name), 0);
            conv.init(&mut p, &mut rng);
        }
        for lin in [&self.proj1, &self.proj2] {
            let mut rng = crate::rng::stream(seed, &format!("init:{}", lin.name), 0);
            lin.init(&mut p, &mut rng);
        }
        p.get_mut("head.box.b").fill(BOX_BIAS);
        p
    }

    /// Backbone (+ optional attention gating) over an image batch
    /// `[N,3,H,W]`, producing per-level `[N,C,h_i,w_i]` nodes.
    pub fn forward_pyramid<'t>(
        &self,
        ectx: &ForwardCtx<'t, '_>,
        images: &[Array3<f64>],
        fea_enabled: bool,
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let (_, h, w) = images[0].dim();
        if h < 64 || w < 64 {
            return Err(Error::invalid_input(format!(
                "input must be at least 64x64, got {h}x{w}"
            )));
        }
        for img in images {
            if img.dim() != (3, h, w) {
                return Err(Error::invalid_input("batch images must share shape"));
            }
        }
        let n = images.len();
        let mut batch = ArrayD::zeros(IxDyn(&[n, 3, h, w]));
        for (i, img) in images.iter().enumerate() {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        batch[[i, c, y, x]] = img[[c, y, x]];
                    }
                }
            }
        }
        let x = ectx.tape.constant(batch);

        let block = |ectx: &ForwardCtx<'t, '_>, conv: &Conv2d, bn: &BatchNorm2d, x: Var<'t>| {
            bn.forward(ectx, conv.forward(ectx, x)).relu()
        };

        let x2 = block(ectx, &self.stem.0, &self.stem.1, x); // H/2
        let x4 = block(ectx, &self.down[0].0, &self.down[0].1, x2); // H/4
        let mut p3 = block(ectx, &self.down[1].0, &self.down[1].1, x4); // H/8
        // residual refinement at level 3
        let r = block(ectx, &self.res_a.0, &self.res_a.1, p3);
        let r = self.res_b.1.forward(ectx, self.res_b.0.forward(ectx, r));
        p3 = p3.add(r).relu();

        let p4 = block(ectx, &self.down[2].0, &self.down[2].1, p3);
        let p5 = block(ectx, &self.down[3].0, &self.down[3].1, p4);
        let p6 = block(ectx, &self.down[4].0, &self.down[4].1, p5);
        let p7 = block(ectx, &self.down[5].0, &self.down[5].1, p6);
        let mut levels = vec![(3, p3), (4, p4), (5, p5), (6, p6), (7, p7)];

        if fea_enabled {
            let residuals = srm_residual_batch(images, &self.kernels)?;
            let attn = self
                .fea_branch
                .forward(ectx, ectx.tape.constant(residuals));
            for (lv, map) in levels.iter_mut() {
                if self.fea_cfg.apply_levels.contains(lv) {
                    let shape = map.shape();
                    let (mh, mw) = (shape[2], shape[3]);
                    let a = attn.bilinear_resize(mh, mw);
                    *map = map.mul_chan(a);
                }
            }
        }
        Ok(levels)
    }

    /// Shared heads over every level.
    pub fn forward_heads<'t>(
        &self,
        hctx: &ForwardCtx<'t, '_>,
        pyramid: &[(usize, Var<'t>)],
    ) -> Vec<LevelHead<'t>> {
        pyramid
            .iter()
            .map(|&(level, map)| {
                let t = self.tower.forward(hctx, map).relu();
                let stride = 1usize << level;
                let ltrb = self
                    .box_head
                    .forward(hctx, t)
                    .exp()
                    .mul_scalar(stride as f64);
                LevelHead {
                    level,
                    stride,
                    cls: self.cls_head.forward(hctx, t),
                    obj: self.obj_head.forward(hctx, t),
                    ltrb,
                }
            })
            .collect()
    }

    /// One proposal per grid cell, with projection-head embeddings.
    /// `image_size` is `(H, W)` of the (shared) batch input.
    pub fn proposals_from_heads<'t>(
        &self,
        hctx: &ForwardCtx<'t, '_>,
        pyramid: &[(usize, Var<'t>)],
        heads: &[LevelHead<'t>],
        image_size: (usize, usize),
    ) -> Vec<LevelProposals<'t>> {
        let (ih, iw) = image_size;
        let mut out = Vec::new();
        for (head, &(level, map)) in heads.iter().zip(pyramid.iter()) {
            debug_assert_eq!(head.level, level);
            let shape = map.shape();
            let (n, gh, gw) = (shape[0], shape[2], shape[3]);
            let stride = head.stride as f64;
            let cls = head.cls.value();
            let obj = head.obj.value();
            let ltrb = head.ltrb.value();
            let mut props = Vec::with_capacity(n * gh * gw);
            let mut coords = Vec::with_capacity(n * gh * gw);
            for ni in 0..n {
                for y in 0..gh {
                    for x in 0..gw {
                        let cx = (x as f64 + 0.5) * stride;
                        let cy = (y as f64 + 0.5) * stride;
                        let bbox = BoxF::new(
                            cx - ltrb[[ni, 0, y, x]],
                            cy - ltrb[[ni, 1, y, x]],
                            cx + ltrb[[ni, 2, y, x]],
                            cy + ltrb[[ni, 3, y, x]],
                        )
                        .clip(iw as f64, ih as f64);
                        props.push(Proposal {
                            level,
                            bbox,
                            class_logits: [cls[[ni, 0, y, x]], cls[[ni, 1, y, x]]],
                            objectness: sigmoid(obj[[ni, 0, y, x]]),
                            feature: Vec::new(),
                            cell: (ni, y, x),
                        });
                        coords.push((ni, y, x));
                    }
                }
            }
            drop(cls);
            drop(obj);
            drop(ltrb);
            let features = if props.is_empty() {
                None
            } else {
                let cells = map.gather_cells(coords);
                let e = self.proj1.forward(hctx, cells).relu();
                let e = self.proj2.forward(hctx, e);
                let ev = e.value();
                for (i, p) in props.iter_mut().enumerate() {
                    p.feature = ev.row_slice(i);
                }
                drop(ev);
                Some(e)
            };
            out.push(LevelProposals {
                level,
                props,
                features,
            });
        }
        out
    }

    /// Mask head over feature crops. Each roi is `(level, (n, x1, y1, x2,
    /// y2))` in image pixels; coordinates are converted to that level's grid.
    pub fn forward_masks<'t>(
        &self,
        hctx: &ForwardCtx<'t, '_>,
        pyramid: &[(usize, Var<'t>)],
        rois: &[(usize, Roi)],
    ) -> Result<MaskVars<'t>> {
        if rois.is_empty() {
            return Err(Error::internal("forward_masks on empty roi list"));
        }
        let s = self.cfg.mask_grid;
        // Group by level, crop each group, then concatenate in roi order.
        let mut per_level_parts: Vec<(usize, Var<'t>)> = Vec::new();
        let mut order: Vec<usize> = Vec::new();
        for &(level, _) in rois {
            if !per_level_parts.iter().any(|(lv, _)| *lv == level) {
                let stride = (1usize << level) as f64;
                let group: Vec<Roi> = rois
                    .iter()
                    .filter(|(lv, _)| *lv == level)
                    .map(|&(_, (n, x1, y1, x2, y2))| {
                        (n, x1 / stride, y1 / stride, x2 / stride, y2 / stride)
                    })
                    .collect();
                let map = pyramid
                    .iter()
                    .find(|(lv, _)| *lv == level)
                    .map(|&(_, m)| m)
                    .ok_or_else(|| Error::internal(format!("missing level {level}")))?;
                per_level_parts.push((level, map.bilinear_crop(group, s)));
            }
        }
        for (i, &(level, _)) in rois.iter().enumerate() {
            let _ = (i, level);
        }
        // Build the row order: for each roi, its index within its level group.
        let mut level_counters: BTreeMap<usize, usize> = BTreeMap::new();
        let mut row_of: Vec<(usize, usize)> = Vec::with_capacity(rois.len());
        for &(level, _) in rois {
            let c = level_counters.entry(level).or_insert(0);
            row_of.push((level, *c));
            *c += 1;
        }
        let crops = if per_level_parts.len() == 1 {
            let only = per_level_parts[0].1;
            // Rows already in roi order for a single level.
            order.extend(0..rois.len());
            let _ = order;
            only
        } else {
            // Concatenate level groups then reorder rows to match roi order.
            let parts: Vec<Var<'t>> = per_level_parts.iter().map(|&(_, v)| v).collect();
            let stacked = Var::concat(&parts, 0);
            let mut offsets: BTreeMap<usize, usize> = BTreeMap::new();
            let mut off = 0;
            for &(level, _) in &per_level_parts {
                offsets.insert(level, off);
                off += rois.iter().filter(|(lv, _)| *lv == level).count();
            }
            let rows: Vec<usize> = row_of
                .iter()
                .map(|&(level, idx)| offsets[&level] + idx)
                .collect();
            // gather_rows works on 2-D; flatten [R,C,S,S] -> [R, C*S*S].
            let shape = stacked.shape();
            let (r, c) = (shape[0], shape[1]);
            stacked
                .reshape(&[r, c * s * s])
                .gather_rows(rows)
                .reshape(&[rois.len(), c, s, s])
        };
        let f = self.mask1.forward(hctx, crops).relu();
        let f = self.mask2.forward(hctx, f).relu();
        let logits = self.mask_out.forward(hctx, f);
        Ok(MaskVars { features: f, logits })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

trait RowSlice {
    fn row_slice(&self, i: usize) -> Vec<f64>;
}

impl RowSlice for ArrayD<f64> {
    fn row_slice(&self, i: usize) -> Vec<f64> {
        let k = self.shape()[1];
        (0..k).map(|j| self[[i, j]]).collect()
    }
}

// ---------------------------------------------------------------------------
// Target assignment and detection loss
// ---------------------------------------------------------------------------

/// Per-cell targets for one level of one image.
pub struct CellTargets {
    /// Index into the image's ground-truth list, or None for background.
    pub assigned: Vec<Option<usize>>,
    pub gh: usize,
    pub gw: usize,
}

/// Anchor-free assignment: a cell is positive for the smallest ground-truth
/// face whose box contains the cell center and whose max regression distance
/// falls inside the level's size range.
pub fn assign_cells(
    gts: &[GtFace],
    level: usize,
    gh: usize,
    gw: usize,
    level_cuts: &[f64],
) -> CellTargets {
    let stride = (1usize << level) as f64;
    let idx = level - 3;
    let lo = if idx == 0 { 0.0 } else { level_cuts[idx - 1] };
    let hi = if idx < level_cuts.len() {
        level_cuts[idx]
    } else {
        f64::INFINITY
    };
    let mut assigned = vec![None; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if !gt.bbox.contains(cx, cy) {
                    continue;
                }
                let l = cx - gt.bbox.x1;
                let t = cy - gt.bbox.y1;
                let r = gt.bbox.x2 - cx;
                let b = gt.bbox.y2 - cy;
                let m = l.max(t).max(r).max(b);
                if m <= lo || m > hi {
                    continue;
                }
                let area = gt.bbox.area();
                if best.map(|(_, a)| area < a).unwrap_or(true) {
                    best = Some((gi, area));
                }
            }
            assigned[y * gw + x] = best.map(|(gi, _)| gi);
        }
    }
    CellTargets { assigned, gh, gw }
}

/// FCOS-style centerness of a cell inside its assigned box.
fn centerness(gt: &BoxF, cx: f64, cy: f64) -> f64 {
    let l = cx - gt.x1;
    let t = cy - gt.y1;
    let r = gt.x2 - cx;
    let b = gt.y2 - cy;
    let lr = l.min(r) / l.max(r).max(1e-12);
    let tb = t.min(b) / t.max(b).max(1e-12);
    (lr * tb).max(0.0).sqrt()
}

pub struct DetectionLoss<'t> {
    pub total: Var<'t>,
    pub num_pos: usize,
}

const FOCAL_ALPHA: f64 = 0.25;

/// Focal classification + IoU box regression + centerness-target objectness
/// + per-pixel mask loss at ground-truth boxes.
///
/// `gts` holds the ground truth for every image of the batch; a training
/// batch without any face is an error.
pub fn detection_loss<'t>(
    detector: &Detector,
    hctx: &ForwardCtx<'t, '_>,
    pyramid: &[(usize, Var<'t>)],
    heads: &[LevelHead<'t>],
    gts: &[Vec<GtFace>],
    image_size: (usize, usize),
) -> Result<DetectionLoss<'t>> {
    let tape = hctx.tape;
    if gts.iter().all(|g| g.is_empty()) {
        return Err(Error::invalid_input(
            "detection_loss requires at least one ground-truth face in the batch",
        ));
    }
    let mut num_pos = 0usize;

    // --- classification / objectness / box over all cells -----------------
    let mut cls_terms: Vec<Var<'t>> = Vec::new();
    let mut box_terms: Vec<Var<'t>> = Vec::new();
    let mut obj_terms: Vec<Var<'t>> = Vec::new();

    for head in heads {
        let shape = head.cls.shape();
        let (n, gh, gw) = (shape[0], shape[2], shape[3]);
        // Build per-cell targets for the whole level batch.
        let mut cls_target = ArrayD::zeros(IxDyn(&[n, 2, gh, gw]));
        let mut pos_coords: Vec<(usize, usize, usize)> = Vec::new();
        let mut pos_ltrb_targets: Vec<[f64; 4]> = Vec::new();
        let mut obj_target_vals: Vec<f64> = Vec::new();
        let stride = head.stride as f64;
        for (ni, img_gts) in gts.iter().enumerate() {
            let t = assign_cells(img_gts, head.level, gh, gw, &detector.cfg.level_cuts);
            for y in 0..gh {
                for x in 0..gw {
                    if let Some(gi) = t.assigned[y * gw + x] {
                        let gt = &img_gts[gi];
                        let ci = gt.label.category_id() as usize;
                        cls_target[[ni, ci, y, x]] = 1.0;
                        let cx = (x as f64 + 0.5) * stride;
                        let cy = (y as f64 + 0.5) * stride;
                        pos_coords.push((ni, y, x));
                        pos_ltrb_targets.push([
                            cx - gt.bbox.x1,
                            cy - gt.bbox.y1,
                            gt.bbox.x2 - cx,
                            gt.bbox.y2 - cy,
                        ]);
                        obj_target_vals.push(centerness(&gt.bbox, cx, cy));
                    }
                }
            }
        }
        num_pos += pos_coords.len();

        // Focal loss on both binary class logits, all cells.
        // p = sigmoid(z); positive: alpha * (1-p)^2 * softplus(-z)
        //                 negative: (1-alpha) * p^2 * softplus(z)
        let z = head.cls;
        let t = tape.constant(cls_target);
        let p = z.sigmoid();
        let one_minus_p = p.neg().add_scalar(1.0);
        let pos_term = one_minus_p
            .mul(one_minus_p)
            .mul(z.neg().softplus())
            .mul(t)
            .mul_scalar(FOCAL_ALPHA);
        let neg_w = t.neg().add_scalar(1.0);
        let neg_term = p
            .mul(p)
            .mul(z.softplus())
            .mul(neg_w)
            .mul_scalar(1.0 - FOCAL_ALPHA);
        cls_terms.push(pos_term.add(neg_term).sum_all());

        if !pos_coords.is_empty() {
            // IoU loss: -ln(iou) between predicted and target distances.
            let m = pos_coords.len();
            // Gather the four distance channels at positive cells.
            let ltrb_flat = head.ltrb; // [n,4,gh,gw]
            let rows = ltrb_flat.gather_cells(pos_coords.clone()); // [m,4]
            let mut tgt = ArrayD::zeros(IxDyn(&[m, 4]));
            for (i, t4) in pos_ltrb_targets.iter().enumerate() {
                for j in 0..4 {
                    tgt[[i, j]] = t4[j];
                }
            }
            let tgt = tape.constant(tgt);
            // intersection extents: min(pred, tgt) per side; areas from sums.
            let inter = rows.emin(tgt);
            let (il, it, ir, ib) = split4(inter);
            let (pl, pt, pr, pb) = split4(rows);
            let (tl, tt, tr, tb) = split4(tgt);
            let iw = il.add(ir);
            let ih = it.add(ib);
            let inter_area = iw.mul(ih);
            let pred_area = pl.add(pr).mul(pt.add(pb));
            let tgt_area = tl.add(tr).mul(tt.add(tb));
            let union = pred_area.add(tgt_area).sub(inter_area).add_scalar(1e-9);
            let iou_v = inter_area.div(union);
            box_terms.push(iou_v.add_scalar(1e-9).ln().neg().sum_all());

            // Objectness BCE against centerness targets at positives.
            let obj_rows = head.obj.gather_cells(pos_coords); // [m,1]
            let mut ot = ArrayD::zeros(IxDyn(&[m, 1]));
            for (i, &v) in obj_target_vals.iter().enumerate() {
                ot[[i, 0]] = v;
            }
            let ot = tape.constant(ot);
            // bce(z, t) = softplus(z) - z*t
            obj_terms.push(obj_rows.softplus().sub(obj_rows.mul(ot)).sum_all());
        }
    }

    // --- mask loss at ground-truth boxes -----------------------------------
    let s = detector.cfg.mask_grid;
    let mut mask_rois: Vec<(usize, Roi)> = Vec::new();
    let mut mask_targets: Vec<Array2<f64>> = Vec::new();
    for (ni, img_gts) in gts.iter().enumerate() {
        for gt in img_gts {
            let b = gt.bbox.clip(image_size.1 as f64, image_size.0 as f64);
            if !b.is_valid() {
                continue;
            }
            let level = level_for_box(&b, &detector.cfg.level_cuts);
            mask_rois.push((level, (ni, b.x1, b.y1, b.x2, b.y2)));
            mask_targets.push(rasterize_mask_to_grid(&gt.mask, &b, s));
        }
    }
    let mask_term = if mask_rois.is_empty() {
        None
    } else {
        let mv = detector.forward_masks(hctx, pyramid, &mask_rois)?;
        let r = mask_rois.len();
        let mut tgt = ArrayD::zeros(IxDyn(&[r, 1, s, s]));
        for (i, t) in mask_targets.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    tgt[[i, 0, y, x]] = t[[y, x]];
                }
            }
        }
        let tgt = tape.constant(tgt);
        let z = mv.logits;
        Some(z.softplus().sub(z.mul(tgt)).mean_all())
    };

    let denom = num_pos.max(1) as f64;
    let mut total = sum_vars(tape, &cls_terms).mul_scalar(1.0 / denom);
    if !box_terms.is_empty() {
        total = total.add(sum_vars(tape, &box_terms).mul_scalar(1.0 / denom));
    }
    if !obj_terms.is_empty() {
        total = total.add(sum_vars(tape, &obj_terms).mul_scalar(1.0 / denom));
    }
    if let Some(m) = mask_term {
        total = total.add(m);
    }
    Ok(DetectionLoss { total, num_pos })
}

/// Pyramid level whose size range covers the box (by its max half-extents,
/// mirroring the center-cell assignment rule).
pub fn level_for_box(b: &BoxF, level_cuts: &[f64]) -> usize {
    let m = ((b.x2 - b.x1).max(b.y2 - b.y1)) / 2.0;
    for (i, &cut) in level_cuts.iter().enumerate() {
        if m <= cut {
            return LEVELS[i];
        }
    }
    *LEVELS.last().unwrap()
}

fn split4(m: Var<'_>) -> (Var<'_>, Var<'_>, Var<'_>, Var<'_>) {
    let rows = m.shape()[0];
    let _ = rows;
    let col = |j: usize| {
        // [m,4] -> [m,1] via reshape+gather on transposed layout is awkward;
        // use row gather over a reshaped view instead.
        m.gather_col(j)
    };
    (col(0), col(1), col(2), col(3))
}

fn sum_vars<'t>(tape: &'t Tape, terms: &[Var<'t>]) -> Var<'t> {
    let mut acc = tape.scalar(0.0);
    for &t in terms {
        acc = acc.add(t);
    }
    acc
}

/// Sample a full-image binary mask onto an SxS grid over `bbox`
/// (nearest-neighbor at bin centers).
pub fn rasterize_mask_to_grid(mask: &Array2<u8>, bbox: &BoxF, s: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((s, s));
    let bw = bbox.x2 - bbox.x1;
    let bh = bbox.y2 - bbox.y1;
    for i in 0..s {
        let py = bbox.y1 + (i as f64 + 0.5) * bh / s as f64;
        let yy = (py.floor().max(0.0) as usize).min(h.saturating_sub(1));
        for j in 0..s {
            let px = bbox.x1 + (j as f64 + 0.5) * bw / s as f64;
            let xx = (px.floor().max(0.0) as usize).min(w.saturating_sub(1));
            out[[i, j]] = mask[[yy, xx]] as f64;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Plain single-image operations (inference-style wrappers)
// ---------------------------------------------------------------------------

/// Run the feature extractor on one image, eval-mode, no gradients.
pub fn extract_pyramid(
    detector: &Detector,
    ext_params: &ParamSet,
    image: &Array3<f64>,
    fea_enabled: bool,
) -> Result<FeaturePyramid> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::invalid_input("expected a 3-channel image"));
    }
    let tape = Tape::new();
    let ectx = ForwardCtx::new(&tape, ext_params, false, false);
    let levels = detector.forward_pyramid(&ectx, std::slice::from_ref(image), fea_enabled)?;
    let mut map = BTreeMap::new();
    for (lv, var) in levels {
        let v = var.to_array();
        let shape = v.shape().to_vec();
        let mut arr = Array3::zeros((shape[1], shape[2], shape[3]));
        for ci in 0..shape[1] {
            for y in 0..shape[2] {
                for x in 0..shape[3] {
                    arr[[ci, y, x]] = v[[0, ci, y, x]];
                }
            }
        }
        map.insert(lv, arr);
    }
    Ok(FeaturePyramid {
        levels: map,
        image_size: (h, w),
    })
}

/// Run the proposal generator over a plain pyramid.
pub fn generate_proposals(
    detector: &Detector,
    head_params: &ParamSet,
    pyr: &FeaturePyramid,
) -> Vec<Proposal> {
    let tape = Tape::new();
    let hctx = ForwardCtx::new(&tape, head_params, false, false);
    let levels: Vec<(usize, Var<'_>)> = pyr
        .levels
        .iter()
        .map(|(&lv, arr)| {
            let (c, h, w) = arr.dim();
            let mut v = ArrayD::zeros(IxDyn(&[1, c, h, w]));
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        v[[0, ci, y, x]] = arr[[ci, y, x]];
                    }
                }
            }
            (lv, tape.constant(v))
        })
        .collect();
    let heads = detector.forward_heads(&hctx, &levels);
    let (h, w) = pyr.image_size;
    detector
        .proposals_from_heads(&hctx, &levels, &heads, (h, w))
        .into_iter()
        .flat_map(|lp| lp.props)
        .collect()
}

/// Run the mask predictor for each proposal; proposals whose box degenerates
/// after clipping are skipped and reported by index.
pub fn predict_masks(
    detector: &Detector,
    head_params: &ParamSet,
    pyr: &FeaturePyramid,
    props: &[Proposal],
) -> (Vec<PredictedMask>, Vec<usize>) {
    let (h, w) = pyr.image_size;
    let mut rois: Vec<(usize, Roi)> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut skipped: Vec<usize> = Vec::new();
    for (i, p) in props.iter().enumerate() {
        let b = p.bbox.clip(w as f64, h as f64);
        if b.is_valid() {
            rois.push((p.level, (0, b.x1, b.y1, b.x2, b.y2)));
            kept.push(i);
        } else {
            skipped.push(i);
        }
    }
    if rois.is_empty() {
        return (Vec::new(), skipped);
    }
    let tape = Tape::new();
    let hctx = ForwardCtx::new(&tape, head_params, false, false);
    let levels: Vec<(usize, Var<'_>)> = pyr
        .levels
        .iter()
        .map(|(&lv, arr)| {
            let (c, hh, ww) = arr.dim();
            let mut v = ArrayD::zeros(IxDyn(&[1, c, hh, ww]));
            for ci in 0..c {
                for y in 0..hh {
                    for x in 0..ww {
                        v[[0, ci, y, x]] = arr[[ci, y, x]];
                    }
                }
            }
            (lv, tape.constant(v))
        })
        .collect();
    let mv = detector
        .forward_masks(&hctx, &levels, &rois)
        .expect("non-empty rois");
    let s = detector.cfg.mask_grid;
    let feats = mv.features.to_array();
    let logits = mv.logits.to_array();
    let d = feats.shape()[1];
    let mut out = Vec::with_capacity(kept.len());
    for (row, &pi) in kept.iter().enumerate() {
        let mut fm = Array3::zeros((d, s, s));
        let mut mp = Array2::zeros((s, s));
        for y in 0..s {
            for x in 0..s {
                for c in 0..d {
                    fm[[c, y, x]] = feats[[row, c, y, x]];
                }
                mp[[y, x]] = sigmoid(logits[[row, 0, y, x]]);
            }
        }
        out.push(PredictedMask {
            proposal_id: pi,
            feature_map: fm,
            mask_prob: mp,
        });
    }
    (out, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FeaConfig, ModelConfig};

    fn small_detector() -> (Detector, ParamSet, ParamSet) {
        let cfg = ModelConfig {
            channels: 4,
            embed_dim: 4,
            mask_grid: 8,
            attn_channels: 3,
            ..ModelConfig::default()
        };
        let det = Detector::new(cfg, FeaConfig::default()).unwrap();
        let ext = det.init_extractor_params(21);
        let heads = det.init_head_params(22);
        (det, ext, heads)
    }

    fn flat_image(h: usize, w: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((3, h, w), v)
    }

    #[test]
    fn iou_identity_disjoint_and_quarter() {
        let a = BoxF::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BoxF::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
        let c = BoxF::new(5.0, 5.0, 15.0, 15.0);
        let expect = 25.0 / 175.0;
        assert!((iou(&a, &c) - expect).abs() < 1e-12);
        // degenerate box
        let z = BoxF::new(3.0, 3.0, 3.0, 9.0);
        assert_eq!(iou(&a, &z), 0.0);
    }

    #[test]
    fn iou_matches_rasterized_overlap() {
        let mut rng = crate::rng::stream(5, "det", 0);
        use rand::Rng;
        for _ in 0..50 {
            let rb = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x1 = rng.random_range(0..48) as f64;
                let y1 = rng.random_range(0..48) as f64;
                let x2 = x1 + rng.random_range(1..16) as f64;
                let y2 = y1 + rng.random_range(1..16) as f64;
                BoxF::new(x1, y1, x2, y2)
            };
            let a = rb(&mut rng);
            let b = rb(&mut rng);
            // pixel rasterization on integer boxes
            let mut inter = 0usize;
            let mut uni = 0usize;
            for y in 0..64 {
                for x in 0..64 {
                    let fa = (x as f64) >= a.x1 && (x as f64) < a.x2 && (y as f64) >= a.y1 && (y as f64) < a.y2;
                    let fb = (x as f64) >= b.x1 && (x as f64) < b.x2 && (y as f64) >= b.y1 && (y as f64) < b.y2;
                    if fa && fb {
                        inter += 1;
                    }
                    if fa || fb {
                        uni += 1;
                    }
                }
            }
            let brute = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
            assert!((iou(&a, &b) - brute).abs() < 1e-9, "a={a:?} b={b:?}");
        }
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        let mut rng = crate::rng::stream(5, "det", 1);
        use rand::Rng;
        for _ in 0..100 {
            let rb = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x1: f64 = rng.random_range(0.0..50.0);
                let y1: f64 = rng.random_range(0.0..50.0);
                BoxF::new(x1, y1, x1 + rng.random_range(0.1..20.0), y1 + rng.random_range(0.1..20.0))
            };
            let a = rb(&mut rng);
            let b = rb(&mut rng);
            let v = iou(&a, &b);
            assert!((iou(&b, &a) - v).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pyramid_shapes_follow_ceil_division() {
        let (det, ext, _) = small_detector();
        let img = flat_image(256, 256, 0.5);
        let pyr = extract_pyramid(&det, &ext, &img, true).unwrap();
        pyr.check_invariants();
        assert_eq!(pyr.levels[&3].dim().1, 32);
        assert_eq!(pyr.levels[&7].dim().1, 2);
        // non-square, odd sizes
        let img = flat_image(256, 257, 0.5);
        let pyr = extract_pyramid(&det, &ext, &img, false).unwrap();
        pyr.check_invariants();
        assert_eq!(pyr.levels[&7].dim().2, 3); // ceil(257/128)
    }

    #[test]
    fn pyramid_rejects_small_images() {
        let (det, ext, _) = small_detector();
        let img = flat_image(32, 128, 0.5);
        assert!(extract_pyramid(&det, &ext, &img, false).is_err());
    }

    #[test]
    fn pyramid_deterministic() {
        let (det, ext, _) = small_detector();
        let mut rng = crate::rng::stream(5, "det", 2);
        use rand::Rng;
        let img = Array3::from_shape_fn((3, 64, 80), |_| rng.random_range(0.0..1.0));
        let a = extract_pyramid(&det, &ext, &img, true).unwrap();
        let b = extract_pyramid(&det, &ext, &img, true).unwrap();
        for (&lv, map) in &a.levels {
            assert_eq!(map, &b.levels[&lv], "level {lv} must be bitwise equal");
        }
    }

    #[test]
    fn proposals_zero_logits_give_half_objectness_and_clipped_boxes() {
        let (det, ext, mut heads) = small_detector();
        for name in ["head.tower", "head.cls", "head.obj", "head.box"] {
            heads.get_mut(&format!("{name}.w")).fill(0.0);
            heads.get_mut(&format!("{name}.b")).fill(0.0);
        }
        let img = flat_image(64, 64, 0.0);
        let pyr = extract_pyramid(&det, &ext, &img, false).unwrap();
        let props = generate_proposals(&det, &heads, &pyr);
        let cells: usize = pyr
            .levels
            .values()
            .map(|m| m.dim().1 * m.dim().2)
            .sum();
        assert_eq!(props.len(), cells);
        for p in &props {
            assert!((p.objectness - 0.5).abs() < 1e-12);
            assert!(p.bbox.x1 >= 0.0 && p.bbox.x2 <= 64.0);
            assert!(p.bbox.y1 >= 0.0 && p.bbox.y2 <= 64.0);
            assert!(p.bbox.is_valid());
            assert_eq!(p.feature.len(), 4);
        }
    }

    #[test]
    fn proposal_count_frozen_for_fixed_seed() {
        // Golden run: recorded once, guards against silent changes to the
        // proposal enumeration.
        let (det, ext, heads) = small_detector();
        let mut rng = crate::rng::stream(5, "det", 3);
        use rand::Rng;
        let img = Array3::from_shape_fn((3, 96, 96), |_| rng.random_range(0.0..1.0));
        let pyr = extract_pyramid(&det, &ext, &img, true).unwrap();
        let props = generate_proposals(&det, &heads, &pyr);
        // 12x12 + 6x6 + 3x3 + 2x2 + 1x1
        assert_eq!(props.len(), 144 + 36 + 9 + 4 + 1);
    }

    #[test]
    fn masks_zeroed_head_gives_half_probability() {
        let (det, ext, mut heads) = small_detector();
        heads.get_mut("head.mask_out.w").fill(0.0);
        heads.get_mut("head.mask_out.b").fill(0.0);
        let img = flat_image(64, 64, 0.3);
        let pyr = extract_pyramid(&det, &ext, &img, false).unwrap();
        let props = vec![
            Proposal {
                level: 3,
                bbox: BoxF::new(8.0, 8.0, 40.0, 40.0),
                class_logits: [0.0, 0.0],
                objectness: 0.5,
                feature: vec![],
                cell: (0, 0, 0),
            },
            // degenerate after clipping
            Proposal {
                level: 4,
                bbox: BoxF::new(-10.0, -10.0, -1.0, 20.0),
                class_logits: [0.0, 0.0],
                objectness: 0.5,
                feature: vec![],
                cell: (0, 0, 0),
            },
        ];
        let (masks, skipped) = predict_masks(&det, &heads, &pyr, &props);
        assert_eq!(masks.len(), 1);
        assert_eq!(skipped, vec![1]);
        assert_eq!(masks[0].feature_map.dim(), (4, 8, 8));
        for &v in masks[0].mask_prob.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_proposals_give_empty_masks() {
        let (det, ext, heads) = small_detector();
        let img = flat_image(64, 64, 0.3);
        let pyr = extract_pyramid(&det, &ext, &img, false).unwrap();
        let (masks, skipped) = predict_masks(&det, &heads, &pyr, &[]);
        assert!(masks.is_empty() && skipped.is_empty());
    }

    #[test]
    fn mask_grid_follows_config() {
        let cfg = ModelConfig {
            channels: 4,
            embed_dim: 4,
            mask_grid: 28,
            attn_channels: 3,
            ..ModelConfig::default()
        };
        let det = Detector::new(cfg, FeaConfig::default()).unwrap();
        let ext = det.init_extractor_params(31);
        let heads = det.init_head_params(32);
        let img = flat_image(64, 64, 0.3);
        let pyr = extract_pyramid(&det, &ext, &img, false).unwrap();
        let props = vec![Proposal {
            level: 3,
            bbox: BoxF::new(0.0, 0.0, 32.0, 32.0),
            class_logits: [0.0, 0.0],
            objectness: 0.5,
            feature: vec![],
            cell: (0, 0, 0),
        }];
        let (masks, _) = predict_masks(&det, &heads, &pyr, &props);
        assert_eq!(masks[0].feature_map.dim(), (4, 28, 28));
        assert_eq!(masks[0].mask_prob.dim(), (28, 28));
    }

    fn toy_gt(image: usize) -> Vec<GtFace> {
        let mut mask = Array2::zeros((image, image));
        for y in 20..44 {
            for x in 16..40 {
                mask[[y, x]] = 1;
            }
        }
        vec![GtFace {
            bbox: BoxF::new(16.0, 20.0, 40.0, 44.0),
            label: FaceLabel::Fake,
            mask,
        }]
    }

    #[test]
    fn detection_loss_finite_and_positive_cells_found() {
        let (det, ext, headp) = small_detector();
        let mut rng = crate::rng::stream(5, "det", 4);
        use rand::Rng;
        let img = Array3::from_shape_fn((3, 64, 64), |_| rng.random_range(0.0..1.0));
        let tape = Tape::new();
        let ectx = ForwardCtx::new(&tape, &ext, true, true);
        let hctx = ForwardCtx::new(&tape, &headp, true, true);
        let pyr = det.forward_pyramid(&ectx, &[img], true).unwrap();
        let heads = det.forward_heads(&hctx, &pyr);
        let gts = vec![toy_gt(64)];
        let loss = detection_loss(&det, &hctx, &pyr, &heads, &gts, (64, 64)).unwrap();
        assert!(loss.num_pos > 0);
        let v = loss.total.scalar_value();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn detection_loss_requires_ground_truth() {
        let (det, ext, headp) = small_detector();
        let img = flat_image(64, 64, 0.2);
        let tape = Tape::new();
        let ectx = ForwardCtx::new(&tape, &ext, true, true);
        let hctx = ForwardCtx::new(&tape, &headp, true, true);
        let pyr = det.forward_pyramid(&ectx, &[img], false).unwrap();
        let heads = det.forward_heads(&hctx, &pyr);
        assert!(detection_loss(&det, &hctx, &pyr, &heads, &[vec![]], (64, 64)).is_err());
    }

    #[test]
    fn detection_loss_gradient_matches_finite_differences() {
        let (det, mut ext, mut headp) = small_detector();
        let mut rng = crate::rng::stream(5, "det", 6);
        use rand::Rng;
        // Jitter every parameter off its init so no ReLU/BN sits exactly on
        // a kink; finite differences are only an oracle at generic points.
        for params in [&mut ext, &mut headp] {
            for (_, e) in params.iter_mut() {
                if e.trainable {
                    e.value.mapv_inplace(|v| v + rng.random_range(-0.01..0.01));
                }
            }
        }
        let img = Array3::from_shape_fn((3, 64, 64), |_| rng.random_range(0.0..1.0));
        let gts = vec![toy_gt(64)];

        let loss_of = |ext_p: &ParamSet, head_p: &ParamSet, want: bool| {
            let tape = Tape::new();
            let ectx = ForwardCtx::new(&tape, ext_p, true, want);
            let hctx = ForwardCtx::new(&tape, head_p, true, want);
            let pyr = det.forward_pyramid(&ectx, std::slice::from_ref(&img), true).unwrap();
            let heads = det.forward_heads(&hctx, &pyr);
            let loss = detection_loss(&det, &hctx, &pyr, &heads, &gts, (64, 64)).unwrap();
            let v = loss.total.scalar_value();
            if want {
                let grads = tape.backward(loss.total);
                let mut all = ectx.grads_by_name(&grads);
                all.extend(hctx.grads_by_name(&grads));
                (v, Some(all))
            } else {
                (v, None)
            }
        };

        let (_, grads) = loss_of(&ext, &headp, true);
        let grads = grads.unwrap();
        let names: Vec<String> = grads.keys().cloned().collect();
        let mut pick = crate::rng::stream(5, "det", 7);
        let h = 1e-4;
        for trial in 0..10 {
            let name = &names[pick.random_range(0..names.len())];
            let len = grads[name].len();
            let idx = pick.random_range(0..len);
            let in_ext = ext.contains(name);
            let perturb = |delta: f64| {
                let mut e = ext.clone();
                let mut hd = headp.clone();
                let target = if in_ext { e.get_mut(name) } else { hd.get_mut(name) };
                target.as_slice_mut().unwrap()[idx] += delta;
                loss_of(&e, &hd, false).0
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            let an = grads[name].as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "trial {trial} {name}[{idx}]: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn saturated_perfect_predictions_give_tiny_loss() {
        // Build a synthetic single-level head output equal to the targets
        // with saturated logits and verify the loss collapses.
        let cfg = ModelConfig {
            channels: 4,
            embed_dim: 4,
            mask_grid: 4,
            attn_channels: 3,
            level_cuts: vec![1e9, 2e9, 3e9, 4e9], // everything on level 3
            ..ModelConfig::default()
        };
        let det = Detector::new(cfg, FeaConfig::default()).unwrap();
        let _ = det;
        // The full-path version of this check lives in the training tests;
        // here we check the focal/bce primitives saturate to ~0.
        let tape = Tape::new();
        let big = tape.constant(ndarray::arr2(&[[20.0]]).into_dyn());
        let bce_pos = big.softplus().sub(big.mul(tape.constant(ndarray::arr2(&[[1.0]]).into_dyn())));
        assert!(bce_pos.scalar_value() < 1e-8);
    }
}
