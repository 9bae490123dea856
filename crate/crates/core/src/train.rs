//! End-to-end training and evaluation orchestration.
//!
//! One training step: augment the batch into two views, run the query
//! extractor with gradients and the momentum extractor without, generate
//! proposals on both, label them against ground truth, absorb key features
//! into the per-layer queues, assemble the detection loss plus the weighted
//! contrastive terms, backpropagate, take an SGD step, and EMA-update the
//! momentum tree. Everything is derived from the run seed, so a resumed run
//! is bit-identical to an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::augment::augment_pair;
use crate::checkpoint::{self, Checkpoint};
use crate::coarse::{
    flatnce_layer_loss, multilayer_loss_var, LabeledProposal, LayerLossInputs,
    MomentumEncoderPair, QueueBank,
};
use crate::config::Config;
use crate::data::Dataset;
use crate::detector::{
    detection_loss, iou, rasterize_mask_to_grid, BoxF, Detector, FaceLabel, GtFace,
    LevelProposals, Proposal,
};
use crate::error::{Error, Result};
use crate::fine::{index_pairs, inter_face_loss_var, intra_face_loss_var, split_mask_regions, RegionVars};
use crate::metrics::{evaluate_detections, Detection, EvalReport};
use crate::nn::{apply_bn_updates, ForwardCtx, ParamSet, Sgd};
use crate::tensor::{Roi, Tape, Var};

/// Per-class cap on contrastive masks per batch: well-matched proposals
/// first, bounding the mask-head cost per step.
const MAX_FINE_MASKS_PER_CLASS: usize = 8;

/// All loss components of one step, after weighting.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_detect: f64,
    pub l_cl: f64,
    pub l_fl_intra: f64,
    pub l_fl_inter: f64,
    pub total: f64,
    pub skipped_cl: bool,
    pub skipped_intra: bool,
    pub skipped_inter: bool,
}

/// Combine components into the total objective:
/// `total = l_detect + lambda1*l_cl + lambda2*l_intra + lambda3*l_inter`.
/// Disabled components contribute exactly zero. A non-finite component
/// aborts with a diagnostic naming it.
pub fn total_loss(
    l_detect: f64,
    l_cl: Option<f64>,
    l_fl_intra: Option<f64>,
    l_fl_inter: Option<f64>,
    cfg: &Config,
) -> Result<LossBundle> {
    let named = [
        ("l_detect", Some(l_detect)),
        ("l_cl", l_cl),
        ("l_fl_intra", l_fl_intra),
        ("l_fl_inter", l_fl_inter),
    ];
    for (name, v) in named {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
    }
    let l_cl_v = if cfg.train.coarse { l_cl.unwrap_or(0.0) } else { 0.0 };
    let l_intra_v = if cfg.train.fine { l_fl_intra.unwrap_or(0.0) } else { 0.0 };
    let l_inter_v = if cfg.train.fine { l_fl_inter.unwrap_or(0.0) } else { 0.0 };
    let total = l_detect
        + cfg.train.lambda1 * l_cl_v
        + cfg.train.lambda2 * l_intra_v
        + cfg.train.lambda3 * l_inter_v;
    if !total.is_finite() {
        return Err(Error::NonFinite("total".to_string()));
    }
    Ok(LossBundle {
        l_detect,
        l_cl: l_cl_v,
        l_fl_intra: l_intra_v,
        l_fl_inter: l_inter_v,
        total,
        skipped_cl: cfg.train.coarse && l_cl.is_none(),
        skipped_intra: cfg.train.fine && l_fl_intra.is_none(),
        skipped_inter: cfg.train.fine && l_fl_inter.is_none(),
    })
}

/// One training-log row, serialized as a JSON line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub num_pos_cells: usize,
    pub labeled_query_props: usize,
    pub fine_masks: usize,
    pub queue_fill: BTreeMap<String, usize>,
}

pub struct Trainer {
    pub cfg: Config,
    pub detector: Detector,
    pub pair: MomentumEncoderPair,
    pub head_params: ParamSet,
    pub bank: QueueBank,
    opt_ext: Sgd,
    opt_head: Sgd,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let detector = Detector::new(cfg.model.clone(), cfg.fea.clone())?;
        let ext = detector.init_extractor_params(cfg.train.seed);
        let head_params = detector.init_head_params(cfg.train.seed);
        let pair = MomentumEncoderPair::new(ext, cfg.coarse.beta);
        let bank = QueueBank::new(cfg.coarse.clone());
        let momentum = cfg.train.momentum;
        Ok(Trainer {
            cfg,
            detector,
            pair,
            head_params,
            bank,
            opt_ext: Sgd::new(momentum),
            opt_head: Sgd::new(momentum),
            step: 0,
        })
    }

    pub fn resume(cfg: Config, ckpt_path: &Path) -> Result<Self> {
        let ck = checkpoint::load(ckpt_path)?;
        if ck.config_hash != cfg.config_hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match current config {}",
                ck.config_hash,
                cfg.config_hash()
            )));
        }
        let mut t = Trainer::new(cfg)?;
        t.pair.params_q = ck.params_q;
        t.pair.params_k = ck.params_k;
        t.head_params = ck.head_params;
        t.opt_ext.set_velocity(ck.ext_velocity);
        t.opt_head.set_velocity(ck.head_velocity);
        t.bank = checkpoint::restore_bank(&t.cfg.coarse, &ck.queues, &ck.protos)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (queues, protos) = checkpoint::snapshot_bank(&self.bank);
        Checkpoint {
            config_hash: self.cfg.config_hash(),
            step: self.step,
            params_q: self.pair.params_q.clone(),
            params_k: self.pair.params_k.clone(),
            head_params: self.head_params.clone(),
            ext_velocity: self.opt_ext.velocity().clone(),
            head_velocity: self.opt_head.velocity().clone(),
            queues,
            protos,
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.to_checkpoint(), path)
    }

    /// Learning rate at a step, with 10x drops at the configured epoch
    /// fractions of the run.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        let mut lr = self.cfg.train.lr;
        for &frac in &self.cfg.train.lr_drops {
            if (step as f64) >= frac * total_steps as f64 {
                lr *= 0.1;
            }
        }
        lr
    }

    /// One optimizer step over a batch of `(image, faces)` samples.
    /// `aug_indices` are the per-sample augmentation stream indices
    /// (epoch-stable, so resumed runs replay the same streams).
    pub fn train_step(
        &mut self,
        batch: &[(Array3<f64>, Vec<GtFace>)],
        aug_indices: &[u64],
        epoch: usize,
        lr: f64,
    ) -> Result<StepLog> {
        assert_eq!(batch.len(), aug_indices.len());
        let seed = self.cfg.train.seed;
        let augment_on = self.cfg.train.augment;

        // --- build the two views -------------------------------------------
        let mut imgs_q: Vec<Array3<f64>> = Vec::with_capacity(batch.len());
        let mut imgs_k: Vec<Array3<f64>> = Vec::with_capacity(batch.len());
        let mut anns_q: Vec<Vec<GtFace>> = Vec::with_capacity(batch.len());
        let mut ann_src: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
        let anns_k: Vec<&Vec<GtFace>> = batch.iter().map(|(_, f)| f).collect();
        for ((img, faces), &aug_idx) in batch.iter().zip(aug_indices.iter()) {
            if augment_on {
                let mut rng = crate::rng::stream(seed, "augment", aug_idx);
                let pair = augment_pair(img, faces, &self.cfg.augment, &mut rng);
                imgs_q.push(pair.image_q);
                imgs_k.push(pair.image_k);
                anns_q.push(pair.anns_q);
                ann_src.push(pair.ann_src_idx);
            } else {
                imgs_q.push(img.clone());
                imgs_k.push(img.clone());
                anns_q.push(faces.clone());
                ann_src.push((0..faces.len()).collect());
            }
        }
        let (_, ih, iw) = imgs_q[0].dim();
        let image_size = (ih, iw);
        let fea_on = self.cfg.train.fea && self.cfg.fea.enabled;

        let mut bundle;
        let num_pos_cells;
        let labeled_query;
        let mut fine_masks = 0usize;
        let ext_grads;
        let head_grads;
        let bn_updates;
        {
            let tape = Tape::new();
            let ectx_q = ForwardCtx::new(&tape, &self.pair.params_q, true, true);
            let ectx_k = ForwardCtx::new(&tape, &self.pair.params_k, true, false);
            let hctx_q = ForwardCtx::new(&tape, &self.head_params, true, true);
            let hctx_k = ForwardCtx::new(&tape, &self.head_params, true, false);

            let pyr_q = self.detector.forward_pyramid(&ectx_q, &imgs_q, fea_on)?;
            let heads_q = self.detector.forward_heads(&hctx_q, &pyr_q);
            let props_q = self
                .detector
                .proposals_from_heads(&hctx_q, &pyr_q, &heads_q, image_size);

            // Detection loss on the query view.
            let det = detection_loss(
                &self.detector,
                &hctx_q,
                &pyr_q,
                &heads_q,
                &anns_q,
                image_size,
            )?;
            num_pos_cells = det.num_pos;

            // --- coarse-grained contrast ------------------------------------
            let mut l_cl_var: Option<Var<'_>> = None;
            let mut query_labels_by_level: Vec<Vec<(FaceLabel, usize, LabeledProposal)>> =
                Vec::new();
            if self.cfg.train.coarse {
                let pyr_k = self.detector.forward_pyramid(&ectx_k, &imgs_k, fea_on)?;
                let heads_k = self.detector.forward_heads(&hctx_k, &pyr_k);
                let props_k = self
                    .detector
                    .proposals_from_heads(&hctx_k, &pyr_k, &heads_k, image_size);

                let per_layer = coarse_losses(
                    &mut self.bank,
                    &self.cfg,
                    &tape,
                    &props_q,
                    &props_k,
                    &anns_q,
                    &ann_src,
                    &anns_k,
                    &mut query_labels_by_level,
                )?;
                labeled_query = query_labels_by_level.iter().map(|v| v.len()).sum();
                if !per_layer.is_empty() {
                    l_cl_var = Some(multilayer_loss_var(
                        &tape,
                        &per_layer,
                        &self.cfg.coarse.layer_weights,
                    ));
                }
            } else {
                // labels still drive the fine losses
                for lp in &props_q {
                    let mut level_labels = Vec::new();
                    for (ni, img_anns) in anns_q.iter().enumerate() {
                        let img_props: Vec<(usize, &Proposal)> = lp
                            .props
                            .iter()
                            .enumerate()
                            .filter(|(_, p)| p.cell.0 == ni)
                            .collect();
                        let plain: Vec<Proposal> =
                            img_props.iter().map(|(_, p)| (*p).clone()).collect();
                        let labels = crate::coarse::label_proposals(
                            &plain,
                            img_anns,
                            self.cfg.coarse.iou_threshold,
                        );
                        for l in labels.real {
                            level_labels.push((
                                FaceLabel::Real,
                                ni,
                                LabeledProposal {
                                    prop_idx: img_props[l.prop_idx].0,
                                    gt_idx: l.gt_idx,
                                    iou: l.iou,
                                },
                            ));
                        }
                        for l in labels.fake {
                            level_labels.push((
                                FaceLabel::Fake,
                                ni,
                                LabeledProposal {
                                    prop_idx: img_props[l.prop_idx].0,
                                    gt_idx: l.gt_idx,
                                    iou: l.iou,
                                },
                            ));
                        }
                    }
                    query_labels_by_level.push(level_labels);
                }
                labeled_query = query_labels_by_level.iter().map(|v| v.len()).sum();
            }

            // --- fine-grained contrast --------------------------------------
            let mut l_intra_var: Option<Var<'_>> = None;
            let mut l_inter_var: Option<Var<'_>> = None;
            if self.cfg.train.fine {
                let warmup = epoch < self.cfg.train.warmup_epochs;
                let (splits, n_masks) = self.fine_regions(
                    &tape,
                    &hctx_q,
                    &pyr_q,
                    &props_q,
                    &query_labels_by_level,
                    &anns_q,
                    image_size,
                    warmup,
                )?;
                fine_masks = n_masks;
                if !splits.is_empty() {
                    l_intra_var = intra_face_loss_var(&tape, &splits, self.cfg.fine.tau);
                    let labels: Vec<FaceLabel> = splits.iter().map(|s| s.label).collect();
                    let mut prng = crate::rng::stream(seed, "fine-pairs", self.step);
                    let pairs = index_pairs(&labels, self.cfg.fine.pair_cap, &mut prng);
                    l_inter_var = inter_face_loss_var(&tape, &splits, &pairs, self.cfg.fine.tau);
                }
            }

            // --- total objective --------------------------------------------
            bundle = total_loss(
                det.total.scalar_value(),
                l_cl_var.map(|v| v.scalar_value()),
                l_intra_var.map(|v| v.scalar_value()),
                l_inter_var.map(|v| v.scalar_value()),
                &self.cfg,
            )?;

            let mut objective = det.total;
            if self.cfg.train.coarse {
                if let Some(v) = l_cl_var {
                    objective = objective.add(v.mul_scalar(self.cfg.train.lambda1));
                }
            }
            if self.cfg.train.fine {
                if let Some(v) = l_intra_var {
                    objective = objective.add(v.mul_scalar(self.cfg.train.lambda2));
                }
                if let Some(v) = l_inter_var {
                    objective = objective.add(v.mul_scalar(self.cfg.train.lambda3));
                }
            }
            bundle.total = objective.scalar_value();
            if !bundle.total.is_finite() {
                return Err(Error::NonFinite("total".to_string()));
            }

            let grads = tape.backward(objective);
            ext_grads = ectx_q.grads_by_name(&grads);
            head_grads = hctx_q.grads_by_name(&grads);
            bn_updates = ectx_q.take_bn_updates();
        }

        // --- parameter updates ----------------------------------------------
        apply_bn_updates(&mut self.pair.params_q, &bn_updates);
        self.opt_ext.step(&mut self.pair.params_q, &ext_grads, lr);
        self.opt_head.step(&mut self.head_params, &head_grads, lr);
        self.pair.momentum_update()?;
        self.step += 1;

        let queue_fill = self
            .bank
            .fill_levels()
            .into_iter()
            .map(|((lv, cls), n)| {
                let name = if cls == 0 { "real" } else { "fake" };
                (format!("{lv}/{name}"), n)
            })
            .collect();
        Ok(StepLog {
            step: self.step,
            epoch,
            lr,
            losses: bundle,
            num_pos_cells,
            labeled_query_props: labeled_query,
            fine_masks,
            queue_fill,
        })
    }

    /// Build region splits for the fine losses from labeled query proposals.
    #[allow(clippy::too_many_arguments)]
    fn fine_regions<'t>(
        &self,
        _tape: &'t Tape,
        hctx: &ForwardCtx<'t, '_>,
        pyr_q: &[(usize, Var<'t>)],
        props_q: &[LevelProposals<'t>],
        labels_by_level: &[Vec<(FaceLabel, usize, LabeledProposal)>],
        anns_q: &[Vec<GtFace>],
        image_size: (usize, usize),
        warmup: bool,
    ) -> Result<(Vec<RegionVars<'t>>, usize)> {
        // Collect labeled proposals across levels, best IoU first, capped
        // per class.
        let mut candidates: Vec<(FaceLabel, usize, usize, usize, f64, usize)> = Vec::new();
        // (label, level_idx, prop_idx, image, iou, gt_idx)
        for (li, level_labels) in labels_by_level.iter().enumerate() {
            for (class, ni, l) in level_labels {
                candidates.push((*class, li, l.prop_idx, *ni, l.iou, l.gt_idx));
            }
        }
        candidates.sort_by(|a, b| b.4.partial_cmp(&a.4).unwrap().then(a.2.cmp(&b.2)));
        let mut kept: Vec<&(FaceLabel, usize, usize, usize, f64, usize)> = Vec::new();
        let mut counts = [0usize; 2];
        for c in &candidates {
            let slot = c.0.category_id() as usize;
            if counts[slot] < MAX_FINE_MASKS_PER_CLASS {
                counts[slot] += 1;
                kept.push(c);
            }
        }
        if kept.is_empty() {
            return Ok((Vec::new(), 0));
        }

        let (ih, iw) = image_size;
        let mut rois: Vec<(usize, Roi)> = Vec::new();
        let mut meta: Vec<(FaceLabel, usize, usize)> = Vec::new(); // label, image, gt
        for &&(class, li, pi, ni, _, gt) in &kept {
            let p = &props_q[li].props[pi];
            let b = p.bbox.clip(iw as f64, ih as f64);
            if !b.is_valid() {
                continue;
            }
            rois.push((p.level, (ni, b.x1, b.y1, b.x2, b.y2)));
            meta.push((class, ni, gt));
        }
        if rois.is_empty() {
            return Ok((Vec::new(), 0));
        }
        let mv = self.detector.forward_masks(hctx, pyr_q, &rois)?;
        let s = self.detector.cfg.mask_grid;
        let logits = mv.logits.to_array();
        let mut splits = Vec::new();
        for (row, &(label, ni, gt)) in meta.iter().enumerate() {
            let mut prob = Array2::zeros((s, s));
            for y in 0..s {
                for x in 0..s {
                    let z: f64 = logits[[row, 0, y, x]];
                    prob[[y, x]] = 1.0 / (1.0 + (-z).exp());
                }
            }
            let mut split = split_mask_regions(&prob, &self.cfg.fine);
            if split.is_none() && warmup {
                // substitute the ground-truth mask so the loss is active
                // from the first steps
                let gt_face = &anns_q[ni][gt];
                let roi_box = BoxF::new(rois[row].1 .1, rois[row].1 .2, rois[row].1 .3, rois[row].1 .4);
                let grid = rasterize_mask_to_grid(&gt_face.mask, &roi_box, s);
                split = split_mask_regions(&grid, &self.cfg.fine);
            }
            let Some(split) = split else { continue };
            let face_coords: Vec<(usize, usize, usize)> =
                split.face_pixels.iter().map(|&(y, x)| (row, y, x)).collect();
            let bg_coords: Vec<(usize, usize, usize)> = split
                .background_pixels
                .iter()
                .map(|&(y, x)| (row, y, x))
                .collect();
            splits.push(RegionVars {
                label,
                face: mv.features.gather_cells(face_coords),
                background: mv.features.gather_cells(bg_coords),
            });
        }
        let n = splits.len();
        Ok((splits, n))
    }

    // --- evaluation ---------------------------------------------------------

    /// Detections for one image (evaluation mode, query weights).
    pub fn detect_image(&self, image: &Array3<f64>, image_id: u64) -> Result<Vec<Detection>> {
        detect_with(
            &self.detector,
            &self.pair.params_q,
            &self.head_params,
            &self.cfg,
            image,
            image_id,
        )
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<(EvalReport, Vec<Detection>)> {
        let mut all_dets = Vec::new();
        let mut all_gts = Vec::new();
        for (idx, rec) in dataset.records.iter().enumerate() {
            let image = dataset.load_image(idx)?;
            all_dets.extend(self.detect_image(&image, rec.id)?);
            for f in &rec.faces {
                all_gts.push(crate::metrics::GtInstance {
                    image_id: rec.id,
                    class: f.label,
                    bbox: f.bbox,
                    mask: Some(f.mask.clone()),
                    area: f.mask.iter().filter(|&&v| v != 0).count() as f64,
                });
            }
        }
        Ok((evaluate_detections(&all_dets, &all_gts), all_dets))
    }
}

/// Label both views, feed the key queues, pair positives, and build the
/// per-layer contrastive losses.
#[allow(clippy::too_many_arguments)]
fn coarse_losses<'t>(
    bank: &mut QueueBank,
    cfg: &Config,
    tape: &'t Tape,
    props_q: &[LevelProposals<'t>],
    props_k: &[LevelProposals<'t>],
    anns_q: &[Vec<GtFace>],
    ann_src: &[Vec<usize>],
    anns_k: &[&Vec<GtFace>],
    query_labels_out: &mut Vec<Vec<(FaceLabel, usize, LabeledProposal)>>,
) -> Result<BTreeMap<usize, Var<'t>>> {
    let thr = cfg.coarse.iou_threshold;
    let mut per_layer = BTreeMap::new();

        for (lq, lk) in props_q.iter().zip(props_k.iter()) {
            debug_assert_eq!(lq.level, lk.level);
            // Per-image labeling on both views.
            let mut key_feats: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
            // (class, image, source gt idx) -> best key proposal feature
            let mut key_by_face: BTreeMap<(u32, usize, usize), (f64, Vec<f64>)> = BTreeMap::new();
            for (ni, img_anns) in anns_k.iter().enumerate() {
                let img_props: Vec<(usize, &Proposal)> = lk
                    .props
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.cell.0 == ni)
                    .collect();
                let plain: Vec<Proposal> = img_props.iter().map(|(_, p)| (*p).clone()).collect();
                let labels = crate::coarse::label_proposals(&plain, img_anns, thr);
                for (class, class_labels) in [
                    (FaceLabel::Real, &labels.real),
                    (FaceLabel::Fake, &labels.fake),
                ] {
                    for l in class_labels {
                        let feat = plain[l.prop_idx].feature.clone();
                        key_feats.entry(class.category_id()).or_default().push(feat.clone());
                        let key = (class.category_id(), ni, l.gt_idx);
                        let slot = key_by_face.entry(key).or_insert((f64::NEG_INFINITY, Vec::new()));
                        if l.iou > slot.0 {
                            *slot = (l.iou, feat);
                        }
                    }
                }
            }
            // Queue updates happen before the loss: current keys are valid
            // negatives for the opposite class from this step on.
            for (cls, feats) in &key_feats {
                let class = FaceLabel::from_category_id(*cls).unwrap();
                bank.absorb(lq.level, class, feats)?;
            }

            // Query labels for this level.
            let mut level_labels: Vec<(FaceLabel, usize, LabeledProposal)> = Vec::new();
            for (ni, img_anns) in anns_q.iter().enumerate() {
                let img_props: Vec<(usize, &Proposal)> = lq
                    .props
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.cell.0 == ni)
                    .collect();
                let plain: Vec<Proposal> = img_props.iter().map(|(_, p)| (*p).clone()).collect();
                let labels = crate::coarse::label_proposals(&plain, img_anns, thr);
                for (class, class_labels) in [
                    (FaceLabel::Real, &labels.real),
                    (FaceLabel::Fake, &labels.fake),
                ] {
                    for l in class_labels {
                        level_labels.push((
                            class,
                            ni,
                            LabeledProposal {
                                prop_idx: img_props[l.prop_idx].0,
                                gt_idx: l.gt_idx,
                                iou: l.iou,
                            },
                        ));
                    }
                }
            }

            // Positives: the key proposal matched to the same source face,
            // falling back to the key-side class prototype.
            let mut class_losses: Vec<(usize, Var<'t>)> = Vec::new();
            for class in [FaceLabel::Real, FaceLabel::Fake] {
                let cls = class.category_id();
                let mut rows: Vec<usize> = Vec::new();
                let mut positives: Vec<Vec<f64>> = Vec::new();
                for (c, ni, l) in level_labels.iter().filter(|(c, _, _)| *c == class) {
                    let _ = c;
                    let src_gt = ann_src[*ni].get(l.gt_idx).copied();
                    let positive = src_gt
                        .and_then(|sg| key_by_face.get(&(cls, *ni, sg)))
                        .map(|(_, f)| f.clone())
                        .or_else(|| bank.proto(lq.level, class).vector.clone());
                    if let Some(p) = positive {
                        if p.iter().map(|v| v * v).sum::<f64>() > 0.0 {
                            rows.push(l.prop_idx);
                            positives.push(p);
                        }
                    }
                }
                if rows.is_empty() {
                    continue;
                }
                let negatives = bank.queue(
                    lq.level,
                    match class {
                        FaceLabel::Real => FaceLabel::Fake,
                        FaceLabel::Fake => FaceLabel::Real,
                    },
                );
                let feats = match lq.features {
                    Some(f) => f.gather_rows(rows.clone()),
                    None => continue,
                };
                let d = positives[0].len();
                let mut pos = Array2::zeros((positives.len(), d));
                for (i, p) in positives.iter().enumerate() {
                    for (j, &v) in p.iter().enumerate() {
                        pos[[i, j]] = v;
                    }
                }
                if let Some(loss) = flatnce_layer_loss(
                    tape,
                    LayerLossInputs {
                        query_feats: feats,
                        positives: pos,
                    },
                    negatives,
                    &cfg.coarse,
                ) {
                    class_losses.push((rows.len(), loss));
                }
            }
            if !class_losses.is_empty() {
                let total_n: usize = class_losses.iter().map(|(n, _)| n).sum();
                let mut acc = tape.scalar(0.0);
                for (n, l) in class_losses {
                    acc = acc.add(l.mul_scalar(n as f64 / total_n as f64));
                }
                per_layer.insert(lq.level, acc);
            }
            query_labels_out.push(level_labels);
        }
    Ok(per_layer)
}


/// Inference for one image against explicit parameter sets.
pub fn detect_with(
    detector: &Detector,
    ext_params: &ParamSet,
    head_params: &ParamSet,
    cfg: &Config,
    image: &Array3<f64>,
    image_id: u64,
) -> Result<Vec<Detection>> {
    let (_, ih, iw) = image.dim();
    let fea_on = cfg.train.fea && cfg.fea.enabled;
    let tape = Tape::new();
    let ectx = ForwardCtx::new(&tape, ext_params, false, false);
    let hctx = ForwardCtx::new(&tape, head_params, false, false);
    let pyr = detector.forward_pyramid(&ectx, std::slice::from_ref(image), fea_on)?;
    let heads = detector.forward_heads(&hctx, &pyr);
    let props = detector.proposals_from_heads(&hctx, &pyr, &heads, (ih, iw));

    // score = objectness * per-class sigmoid; class by the higher score
    let mut scored: Vec<(f64, FaceLabel, Proposal)> = Vec::new();
    for lp in props {
        for p in lp.props {
            let s_real = p.objectness * sigmoid(p.class_logits[0]);
            let s_fake = p.objectness * sigmoid(p.class_logits[1]);
            let (score, class) = if s_fake > s_real {
                (s_fake, FaceLabel::Fake)
            } else {
                (s_real, FaceLabel::Real)
            };
            if score >= cfg.model.score_threshold && p.bbox.is_valid() {
                scored.push((score, class, p));
            }
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // greedy per-class duplicate removal
    let mut kept: Vec<(f64, FaceLabel, Proposal)> = Vec::new();
    for (score, class, p) in scored {
        if kept.len() >= cfg.model.max_dets {
            break;
        }
        if kept
            .iter()
            .all(|(_, kc, kp)| *kc != class || iou(&kp.bbox, &p.bbox) < cfg.model.nms_iou)
        {
            kept.push((score, class, p));
        }
    }
    if kept.is_empty() {
        return Ok(Vec::new());
    }

    // masks at the kept boxes
    let rois: Vec<(usize, Roi)> = kept
        .iter()
        .map(|(_, _, p)| {
            let b = p.bbox.clip(iw as f64, ih as f64);
            (p.level, (0usize, b.x1, b.y1, b.x2, b.y2))
        })
        .collect();
    let mv = detector.forward_masks(&hctx, &pyr, &rois)?;
    let s = detector.cfg.mask_grid;
    let logits = mv.logits.value();
    let mut out = Vec::with_capacity(kept.len());
    for (row, (score, class, p)) in kept.iter().enumerate() {
        let b = p.bbox.clip(iw as f64, ih as f64);
        let mut mask = Array2::zeros((ih, iw));
        let bw = b.x2 - b.x1;
        let bh = b.y2 - b.y1;
        for y in b.y1.floor().max(0.0) as usize..(b.y2.ceil() as usize).min(ih) {
            for x in b.x1.floor().max(0.0) as usize..(b.x2.ceil() as usize).min(iw) {
                let gy = ((y as f64 + 0.5 - b.y1) * s as f64 / bh - 0.5)
                    .clamp(0.0, (s - 1) as f64);
                let gx = ((x as f64 + 0.5 - b.x1) * s as f64 / bw - 0.5)
                    .clamp(0.0, (s - 1) as f64);
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
                let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                let z = logits[[row, 0, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                    + logits[[row, 0, y0, x1]] * (1.0 - fy) * fx
                    + logits[[row, 0, y1, x0]] * fy * (1.0 - fx)
                    + logits[[row, 0, y1, x1]] * fy * fx;
                if sigmoid(z) >= 0.5 {
                    mask[[y, x]] = 1;
                }
            }
        }
        out.push(Detection {
            image_id,
            class: *class,
            confidence: *score,
            bbox: b,
            mask: Some(mask),
        });
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Full training runs
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps: u64,
    pub logs: Vec<StepLog>,
}

/// Train for the configured number of epochs, logging one JSON line per
/// step and checkpointing at epoch boundaries. A non-finite loss halts
/// immediately; the last epoch checkpoint stays on disk.
pub fn train(cfg: &Config, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    train_resumable(cfg, dataset, out_dir, None)
}

pub fn train_resumable(
    cfg: &Config,
    dataset: &Dataset,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid_input("training dataset is empty"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut trainer = match resume_from {
        Some(p) => Trainer::resume(cfg.clone(), p)?,
        None => Trainer::new(cfg.clone())?,
    };

    // Desk-scale datasets fit in memory; decode once.
    let mut images = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        images.push(dataset.load_image(i)?);
    }

    let n = dataset.len();
    let batch = cfg.train.batch_size.clamp(1, n);
    let steps_per_epoch = (n / batch).max(1);
    let total_steps = (steps_per_epoch * cfg.train.epochs) as u64;

    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let mut logs = Vec::new();

    while trainer.step < total_steps {
        let epoch = (trainer.step as usize) / steps_per_epoch;
        let step_in_epoch = (trainer.step as usize) % steps_per_epoch;
        // Epoch-stable shuffle so resuming replays the same order.
        let order = {
            let mut rng = crate::rng::stream(cfg.train.seed, "shuffle", epoch as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            use rand::Rng;
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            idx
        };
        let start = step_in_epoch * batch;
        let members = &order[start..start + batch];
        let batch_data: Vec<(Array3<f64>, Vec<GtFace>)> = members
            .iter()
            .map(|&i| (images[i].clone(), dataset.records[i].faces.clone()))
            .collect();
        let aug_indices: Vec<u64> = members
            .iter()
            .enumerate()
            .map(|(j, _)| (epoch * n + start + j) as u64)
            .collect();

        let lr = trainer.lr_at(trainer.step, total_steps);
        let log = match trainer.train_step(&batch_data, &aug_indices, epoch, lr) {
            Ok(log) => log,
            Err(e) => {
                // halt immediately; the last epoch checkpoint stays on disk
                return Err(e);
            }
        };
        writeln!(log_file, "{}", serde_json::to_string(&log)?)?;
        logs.push(log);

        if (trainer.step as usize) % steps_per_epoch == 0 {
            let e = (trainer.step as usize) / steps_per_epoch;
            trainer.save_checkpoint(&out_dir.join(format!("ckpt_epoch{e:03}.bin")))?;
        }
    }
    let final_path = out_dir.join("ckpt_final.bin");
    trainer.save_checkpoint(&final_path)?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        log_path,
        steps: trainer.step,
        logs,
    })
}

/// Evaluate a checkpoint against a dataset; refuses on config-hash mismatch.
pub fn evaluate_checkpoint(
    cfg: &Config,
    ckpt_path: &Path,
    dataset: &Dataset,
) -> Result<(EvalReport, Vec<Detection>)> {
    let trainer = Trainer::resume(cfg.clone(), ckpt_path)?;
    trainer.evaluate(dataset)
}
