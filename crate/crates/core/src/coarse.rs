//! Coarse-grained proposal-level contrastive learning: a momentum encoder
//! pair, IoU-based proposal labeling, per-layer per-class prototypes and
//! FIFO feature queues, a flat contrastive objective whose forward value is
//! identically 1 (all signal lives in the gradient), and the weighted
//! multi-layer ensemble.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::config::{CoarseConfig, LEVELS};
use crate::detector::{iou, FaceLabel, GtFace, Proposal};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Tape, Var};

/// Query/key feature-extractor parameter trees; the key tree only ever
/// receives exponential-moving-average updates.
pub struct MomentumEncoderPair {
    pub params_q: ParamSet,
    pub params_k: ParamSet,
    pub beta: f64,
}

impl MomentumEncoderPair {
    pub fn new(params_q: ParamSet, beta: f64) -> Self {
        let params_k = params_q.clone();
        MomentumEncoderPair {
            params_q,
            params_k,
            beta,
        }
    }

    /// `theta_k = beta * theta_k + (1 - beta) * theta_q`, elementwise.
    pub fn momentum_update(&mut self) -> Result<()> {
        let beta = self.beta;
        self.params_k.ema_update_from(&self.params_q, beta)
    }
}

/// EMA class centroid for one (level, class) pair. The first observed
/// feature seeds the average.
#[derive(Clone, Debug, Default)]
pub struct Prototype {
    pub vector: Option<Vec<f64>>,
    pub alpha: f64,
}

impl Prototype {
    pub fn new(alpha: f64) -> Self {
        Prototype {
            vector: None,
            alpha,
        }
    }

    pub fn initialized(&self) -> bool {
        self.vector.is_some()
    }

    pub fn update(&mut self, feat: &[f64]) -> Result<()> {
        if feat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("non-finite feature in prototype update"));
        }
        match &mut self.vector {
            None => self.vector = Some(feat.to_vec()),
            Some(v) => {
                let a = self.alpha;
                for (vi, &fi) in v.iter_mut().zip(feat.iter()) {
                    *vi = a * *vi + (1.0 - a) * fi;
                }
            }
        }
        Ok(())
    }
}

/// FIFO store of L2-normalized key features for one (level, class).
#[derive(Clone, Debug)]
pub struct ContrastQueue {
    entries: std::collections::VecDeque<Vec<f64>>,
    pub capacity: usize,
    pub level: usize,
    pub class: FaceLabel,
}

impl ContrastQueue {
    pub fn new(level: usize, class: FaceLabel, capacity: usize) -> Self {
        ContrastQueue {
            entries: std::collections::VecDeque::new(),
            capacity,
            level,
            class,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, feat: Vec<f64>) {
        self.entries.push_back(feat);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    /// Entries as an `[K, D]` matrix (insertion order).
    pub fn as_matrix(&self, dim: usize) -> Array2<f64> {
        let mut m = Array2::zeros((self.entries.len(), dim));
        for (i, e) in self.entries.iter().enumerate() {
            for (j, &v) in e.iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    }
}

pub fn l2_normalized(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::invalid_input("cannot normalize a zero vector"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Cosine similarity; errors on a zero vector (callers filter).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let an = l2_normalized(a)?;
    let bn = l2_normalized(b)?;
    Ok(an.iter().zip(bn.iter()).map(|(x, y)| x * y).sum())
}

/// Push the `k` candidates least similar to the prototype (all of them when
/// the batch is smaller), L2-normalized, in deterministic order.
pub fn enqueue_topk_dissimilar(
    queue: &mut ContrastQueue,
    proto: &Prototype,
    batch_feats: &[Vec<f64>],
    k: usize,
) -> Result<()> {
    let pv = proto
        .vector
        .as_ref()
        .ok_or_else(|| Error::internal("enqueue with uninitialized prototype"))?;
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(batch_feats.len());
    for (i, f) in batch_feats.iter().enumerate() {
        ranked.push((i, cosine_sim(f, pv)?));
    }
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in ranked.iter().take(k) {
        queue.push(l2_normalized(&batch_feats[i])?);
    }
    Ok(())
}

/// All per-layer queues and prototypes: one (queue, prototype) pair per
/// (level, class) — ten queues in total.
pub struct QueueBank {
    pub queues: BTreeMap<(usize, u32), ContrastQueue>,
    pub protos: BTreeMap<(usize, u32), Prototype>,
    pub cfg: CoarseConfig,
}

impl QueueBank {
    pub fn new(cfg: CoarseConfig) -> Self {
        let mut queues = BTreeMap::new();
        let mut protos = BTreeMap::new();
        for &lv in LEVELS.iter() {
            for class in [FaceLabel::Real, FaceLabel::Fake] {
                queues.insert(
                    (lv, class.category_id()),
                    ContrastQueue::new(lv, class, cfg.queue_capacity),
                );
                protos.insert((lv, class.category_id()), Prototype::new(cfg.alpha));
            }
        }
        QueueBank { queues, protos, cfg }
    }

    pub fn queue(&self, level: usize, class: FaceLabel) -> &ContrastQueue {
        &self.queues[&(level, class.category_id())]
    }

    pub fn proto(&self, level: usize, class: FaceLabel) -> &Prototype {
        &self.protos[&(level, class.category_id())]
    }

    /// Prototype EMA updates followed by a top-k dissimilar push, for one
    /// (level, class) batch of key-encoder features.
    pub fn absorb(
        &mut self,
        level: usize,
        class: FaceLabel,
        batch_feats: &[Vec<f64>],
    ) -> Result<()> {
        if batch_feats.is_empty() {
            return Ok(());
        }
        let key = (level, class.category_id());
        let proto = self.protos.get_mut(&key).unwrap();
        for f in batch_feats {
            proto.update(f)?;
        }
        let proto = self.protos[&key].clone();
        let top_k = self.cfg.top_k;
        enqueue_topk_dissimilar(self.queues.get_mut(&key).unwrap(), &proto, batch_feats, top_k)
    }

    pub fn fill_levels(&self) -> BTreeMap<(usize, u32), usize> {
        self.queues.iter().map(|(&k, q)| (k, q.len())).collect()
    }
}

/// One labeled proposal: proposal index, matched ground-truth index, IoU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledProposal {
    pub prop_idx: usize,
    pub gt_idx: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ProposalLabels {
    pub real: Vec<LabeledProposal>,
    pub fake: Vec<LabeledProposal>,
    pub unlabeled: Vec<usize>,
}

/// A proposal is real (fake) iff its best IoU against real (fake) ground
/// truth exceeds the threshold; when both classes qualify the higher IoU
/// wins. Deterministic and independent of proposal order.
pub fn label_proposals(
    props: &[Proposal],
    gts: &[GtFace],
    iou_threshold: f64,
) -> ProposalLabels {
    let mut out = ProposalLabels::default();
    for (pi, p) in props.iter().enumerate() {
        let mut best: [Option<(usize, f64)>; 2] = [None, None];
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(&p.bbox, &gt.bbox);
            let slot = &mut best[gt.label.category_id() as usize];
            if slot.map(|(_, b)| v > b).unwrap_or(true) {
                *slot = Some((gi, v));
            }
        }
        let real_best = best[0].filter(|&(_, v)| v > iou_threshold);
        let fake_best = best[1].filter(|&(_, v)| v > iou_threshold);
        match (real_best, fake_best) {
            (Some((gi, v)), None) => out.real.push(LabeledProposal {
                prop_idx: pi,
                gt_idx: gi,
                iou: v,
            }),
            (None, Some((gi, v))) => out.fake.push(LabeledProposal {
                prop_idx: pi,
                gt_idx: gi,
                iou: v,
            }),
            (Some((gri, rv)), Some((gfi, fv))) => {
                if rv >= fv {
                    out.real.push(LabeledProposal {
                        prop_idx: pi,
                        gt_idx: gri,
                        iou: rv,
                    });
                } else {
                    out.fake.push(LabeledProposal {
                        prop_idx: pi,
                        gt_idx: gfi,
                        iou: fv,
                    });
                }
            }
            (None, None) => out.unlabeled.push(pi),
        }
    }
    out
}

/// Flat contrastive loss from precomputed similarities: `sims_neg [M,K]`
/// against `sim_pos [M,1]`. Per query the forward value is exactly 1; the
/// gradient equals that of `logsumexp((sim_neg - sim_pos)/tau)`. The
/// denominator is detached, and a detached row-max shift keeps the
/// exponentials bounded without changing the gradient.
pub fn flatnce_from_sims<'t>(
    tape: &'t Tape,
    sims_neg: Var<'t>,
    sim_pos: Var<'t>,
    tau: f64,
) -> Var<'t> {
    let u = sims_neg.sub_row(sim_pos).mul_scalar(1.0 / tau);
    let shape = u.shape();
    let (m, k) = (shape[0], shape[1]);
    let mut row_max = ArrayD::zeros(IxDyn(&[m, 1]));
    {
        let uv = u.value();
        for i in 0..m {
            let mut best = f64::NEG_INFINITY;
            for j in 0..k {
                best = best.max(uv[[i, j]]);
            }
            row_max[[i, 0]] = best;
        }
    }
    let shifted = u.sub_row(tape.constant(row_max));
    let sums = shifted.exp().row_sum();
    sums.div(sums.detach()).mean_all()
}

/// Row-normalize an `[M,D]` embedding node.
pub fn l2_normalize_rows<'t>(x: Var<'t>) -> Var<'t> {
    let norms = x.mul(x).row_sum().add_scalar(1e-24).sqrt();
    x.row_scale(norms.recip())
}

pub struct LayerLossInputs<'t> {
    /// `[M,D]` query-encoder embeddings (gradient-carrying).
    pub query_feats: Var<'t>,
    /// `[M,D]` positive key features, raw (normalized internally).
    pub positives: Array2<f64>,
}

/// Per-layer loss: queries paired with their positives against the negative
/// queue. Returns `None` (skipped) when the queue is underfilled.
pub fn flatnce_layer_loss<'t>(
    tape: &'t Tape,
    inputs: LayerLossInputs<'t>,
    negative_queue: &ContrastQueue,
    cfg: &CoarseConfig,
) -> Option<Var<'t>> {
    let m = inputs.positives.nrows();
    if m == 0 || negative_queue.len() < cfg.min_queue_fill {
        return None;
    }
    let d = inputs.positives.ncols();
    let qn = l2_normalize_rows(inputs.query_feats);
    // positives: normalize rows as constants
    let mut pos = Array2::zeros((m, d));
    for i in 0..m {
        let row: Vec<f64> = inputs.positives.row(i).to_vec();
        let n = l2_normalized(&row).ok()?;
        for (j, v) in n.into_iter().enumerate() {
            pos[[i, j]] = v;
        }
    }
    let pos = tape.constant(pos.into_dyn());
    let sim_pos = qn.mul(pos).row_sum();
    let negs = tape.constant(negative_queue.as_matrix(d).into_dyn());
    let sims_neg = qn.matmul_t(negs);
    Some(flatnce_from_sims(tape, sims_neg, sim_pos, cfg.tau))
}

/// Weighted multi-layer ensemble; absent levels contribute zero.
pub fn multilayer_loss(per_layer: &BTreeMap<usize, f64>, weights: &[f64]) -> f64 {
    LEVELS
        .iter()
        .enumerate()
        .map(|(i, lv)| weights[i] * per_layer.get(lv).copied().unwrap_or(0.0))
        .sum()
}

/// Tape version of the ensemble for the training path.
pub fn multilayer_loss_var<'t>(
    tape: &'t Tape,
    per_layer: &BTreeMap<usize, Var<'t>>,
    weights: &[f64],
) -> Var<'t> {
    let mut acc = tape.scalar(0.0);
    for (i, lv) in LEVELS.iter().enumerate() {
        if let Some(&v) = per_layer.get(lv) {
            acc = acc.add(v.mul_scalar(weights[i]));
        }
    }
    acc
}
