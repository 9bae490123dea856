//! Fine-grained pixel-level contrast inside and across predicted face masks.
//!
//! Each predicted mask is binarized and split into an eroded face-interior
//! pixel set and a background pixel set; pixels within a small Chebyshev
//! distance of the mask contour are discarded because blend post-processing
//! makes them unreliable. Region similarity is the mean pairwise cosine over
//! the two pixel sets (the pair count normalization keeps the similarity in
//! [-1,1] regardless of mask size). The intra-face loss pulls real-face
//! interiors toward their backgrounds and pushes forged interiors away; the
//! inter-face loss pulls backgrounds of different faces together and pushes
//! real and fake interiors apart.

use ndarray::Array2;

use crate::config::FineConfig;
use crate::detector::{FaceLabel, PredictedMask};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Pixel-coordinate split of one mask grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSplit {
    pub face_pixels: Vec<(usize, usize)>,
    pub background_pixels: Vec<(usize, usize)>,
}

/// Feature-space split of one predicted mask.
#[derive(Clone, Debug)]
pub struct MaskRegionSplit {
    pub label: FaceLabel,
    pub face_pixels: Vec<Vec<f64>>,
    pub background_pixels: Vec<Vec<f64>>,
    pub source_proposal: usize,
}

/// Binarize at the threshold, trace the contour (8-connectivity against the
/// complement or the grid border), and keep pixels at Chebyshev distance >=
/// `erosion_radius` from the contour on both sides. Returns `None` when
/// either side ends up empty (a skip, counted by callers).
pub fn split_mask_regions(mask_prob: &Array2<f64>, cfg: &FineConfig) -> Option<RegionSplit> {
    let (h, w) = mask_prob.dim();
    let binary = mask_prob.mapv(|p| p >= cfg.binarize_threshold);

    // Contour: face pixels touching the complement or the border.
    let mut contour = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !binary[[y, x]] {
                continue;
            }
            let mut is_contour = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if !is_contour {
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if !binary[[ny as usize, nx as usize]] {
                            is_contour = true;
                            break 'scan;
                        }
                    }
                }
            }
            contour[y * w + x] = is_contour;
        }
    }

    let dist = chebyshev_distance_to(&contour, h, w);
    let r = cfg.erosion_radius as u32;
    let mut face = Vec::new();
    let mut background = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if dist[y * w + x] < r {
                continue;
            }
            if binary[[y, x]] {
                face.push((y, x));
            } else {
                background.push((y, x));
            }
        }
    }
    if face.is_empty() || background.is_empty() {
        return None;
    }
    Some(RegionSplit {
        face_pixels: face,
        background_pixels: background,
    })
}

/// Exact Chebyshev distance transform to a seed set via the two-pass
/// 8-neighborhood chamfer (all neighbor steps cost 1 under this metric).
fn chebyshev_distance_to(seed: &[bool], h: usize, w: usize) -> Vec<u32> {
    const INF: u32 = u32::MAX / 2;
    let mut dist: Vec<u32> = seed
        .iter()
        .map(|&s| if s { 0 } else { INF })
        .collect();
    if !seed.iter().any(|&s| s) {
        return dist;
    }
    // forward pass
    for y in 0..h {
        for x in 0..w {
            let mut best = dist[y * w + x];
            let relax = |ny: i64, nx: i64, best: &mut u32| {
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    *best = (*best).min(dist[ny as usize * w + nx as usize].saturating_add(1));
                }
            };
            relax(y as i64 - 1, x as i64 - 1, &mut best);
            relax(y as i64 - 1, x as i64, &mut best);
            relax(y as i64 - 1, x as i64 + 1, &mut best);
            relax(y as i64, x as i64 - 1, &mut best);
            dist[y * w + x] = best;
        }
    }
    // backward pass
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut best = dist[y * w + x];
            let relax = |ny: i64, nx: i64, best: &mut u32| {
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    *best = (*best).min(dist[ny as usize * w + nx as usize].saturating_add(1));
                }
            };
            relax(y as i64 + 1, x as i64 + 1, &mut best);
            relax(y as i64 + 1, x as i64, &mut best);
            relax(y as i64 + 1, x as i64 - 1, &mut best);
            relax(y as i64, x as i64 + 1, &mut best);
            dist[y * w + x] = best;
        }
    }
    dist
}

/// Split a predicted mask into feature-space region sets.
pub fn split_predicted_mask(
    mask: &PredictedMask,
    label: FaceLabel,
    cfg: &FineConfig,
) -> Option<MaskRegionSplit> {
    let split = split_mask_regions(&mask.mask_prob, cfg)?;
    let d = mask.feature_map.dim().0;
    let collect = |pixels: &[(usize, usize)]| {
        pixels
            .iter()
            .map(|&(y, x)| (0..d).map(|c| mask.feature_map[[c, y, x]]).collect())
            .collect()
    };
    Some(MaskRegionSplit {
        label,
        face_pixels: collect(&split.face_pixels),
        background_pixels: collect(&split.background_pixels),
        source_proposal: mask.proposal_id,
    })
}

/// Mean pairwise cosine similarity between two pixel sets, in [-1,1].
pub fn region_sim(h: &[Vec<f64>], h_prime: &[Vec<f64>]) -> Result<f64> {
    if h.is_empty() || h_prime.is_empty() {
        return Err(Error::invalid_input("region_sim on an empty pixel set"));
    }
    let mut acc = 0.0;
    for a in h {
        for b in h_prime {
            acc += crate::coarse::cosine_sim(a, b)?;
        }
    }
    Ok(acc / (h.len() * h_prime.len()) as f64)
}

fn stable_ratio_loss(numer_sims: &[f64], denom_extra_sims: &[f64], tau: f64) -> f64 {
    // -ln( S_n / (S_n + S_e) ) = softplus(lse_e - lse_n)
    let lse = |sims: &[f64]| {
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        m + sims.iter().map(|&s| (s / tau - m).exp()).sum::<f64>().ln()
    };
    if denom_extra_sims.is_empty() {
        return 0.0;
    }
    let z = lse(denom_extra_sims) - lse(numer_sims);
    // softplus
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Intra-face loss over a batch of splits. `None` means skipped (no real
/// split present). With no fake splits the loss is exactly zero.
pub fn intra_face_loss(splits: &[MaskRegionSplit], tau: f64) -> Result<Option<f64>> {
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for s in splits {
        let sim = region_sim(&s.face_pixels, &s.background_pixels)?;
        match s.label {
            FaceLabel::Real => real.push(sim),
            FaceLabel::Fake => fake.push(sim),
        }
    }
    if real.is_empty() {
        return Ok(None);
    }
    Ok(Some(stable_ratio_loss(&real, &fake, tau)))
}

/// Inter-face loss over all real x fake pairs of the batch. `None` means
/// skipped (the batch lacks one of the classes).
pub fn inter_face_loss(splits: &[MaskRegionSplit], tau: f64) -> Result<Option<f64>> {
    let reals: Vec<&MaskRegionSplit> = splits.iter().filter(|s| s.label == FaceLabel::Real).collect();
    let fakes: Vec<&MaskRegionSplit> = splits.iter().filter(|s| s.label == FaceLabel::Fake).collect();
    if reals.is_empty() || fakes.is_empty() {
        return Ok(None);
    }
    let mut bg_sims = Vec::new();
    let mut face_sims = Vec::new();
    for r in &reals {
        for f in &fakes {
            bg_sims.push(region_sim(&r.background_pixels, &f.background_pixels)?);
            face_sims.push(region_sim(&r.face_pixels, &f.face_pixels)?);
        }
    }
    Ok(Some(stable_ratio_loss(&bg_sims, &face_sims, tau)))
}

// ---------------------------------------------------------------------------
// Tape versions for the training path
// ---------------------------------------------------------------------------

/// One mask's region features on the tape: `face [p,D]`, `background [q,D]`.
pub struct RegionVars<'t> {
    pub label: FaceLabel,
    pub face: Var<'t>,
    pub background: Var<'t>,
}

/// Mean pairwise cosine as a graph node.
pub fn region_sim_var<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let an = crate::coarse::l2_normalize_rows(a);
    let bn = crate::coarse::l2_normalize_rows(b);
    an.matmul_t(bn).mean_all()
}

/// `softplus(lse(extra) - lse(numer))` over scalar similarity nodes.
fn ratio_loss_var<'t>(tape: &'t Tape, numer: &[Var<'t>], extra: &[Var<'t>], tau: f64) -> Var<'t> {
    if extra.is_empty() {
        return tape.scalar(0.0);
    }
    let lse = |terms: &[Var<'t>]| -> Var<'t> {
        let cols: Vec<Var<'t>> = terms.iter().map(|t| t.reshape(&[1, 1])).collect();
        let stacked = Var::concat(&cols, 0).mul_scalar(1.0 / tau);
        let m = stacked
            .value()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        stacked.add_scalar(-m).exp().sum_all().ln().add_scalar(m)
    };
    lse(extra).sub(lse(numer)).softplus()
}

pub fn intra_face_loss_var<'t>(
    tape: &'t Tape,
    splits: &[RegionVars<'t>],
    tau: f64,
) -> Option<Var<'t>> {
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for s in splits {
        let sim = region_sim_var(s.face, s.background);
        match s.label {
            FaceLabel::Real => real.push(sim),
            FaceLabel::Fake => fake.push(sim),
        }
    }
    if real.is_empty() {
        return None;
    }
    Some(ratio_loss_var(tape, &real, &fake, tau))
}

/// Inter-face loss over the given real x fake index pairs.
pub fn inter_face_loss_var<'t>(
    tape: &'t Tape,
    splits: &[RegionVars<'t>],
    pairs: &[(usize, usize)],
    tau: f64,
) -> Option<Var<'t>> {
    if pairs.is_empty() {
        return None;
    }
    let mut bg = Vec::new();
    let mut face = Vec::new();
    for &(ri, fi) in pairs {
        bg.push(region_sim_var(splits[ri].background, splits[fi].background));
        face.push(region_sim_var(splits[ri].face, splits[fi].face));
    }
    Some(ratio_loss_var(tape, &bg, &face, tau))
}

/// All real x fake index pairs, uniformly subsampled to `cap` when needed.
pub fn realfake_pairs(
    splits: &[MaskRegionSplit],
    cap: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(usize, usize)> {
    index_pairs(
        &splits.iter().map(|s| s.label).collect::<Vec<_>>(),
        cap,
        rng,
    )
}

/// Pair enumeration on labels only (shared by plain and tape paths).
pub fn index_pairs(
    labels: &[FaceLabel],
    cap: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(usize, usize)> {
    use rand::Rng;
    let reals: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == FaceLabel::Real).collect();
    let fakes: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == FaceLabel::Fake).collect();
    let mut pairs: Vec<(usize, usize)> = reals
        .iter()
        .flat_map(|&r| fakes.iter().map(move |&f| (r, f)))
        .collect();
    if pairs.len() > cap {
        // uniform subsample, deterministic under the step rng
        for i in 0..cap {
            let j = rng.random_range(i..pairs.len());
            pairs.swap(i, j);
        }
        pairs.truncate(cap);
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3, ArrayD, IxDyn};
    use rand::Rng;

    fn cfg() -> FineConfig {
        FineConfig::default()
    }

    fn block_mask(s: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<f64> {
        Array2::from_shape_fn((s, s), |(y, x)| {
            if y >= y0 && y <= y1 && x >= x0 && x <= x1 {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Brute-force oracle: contour by definition, then per-pixel min
    /// Chebyshev distance over the whole contour set.
    fn brute_split(mask_prob: &Array2<f64>, c: &FineConfig) -> Option<RegionSplit> {
        let (h, w) = mask_prob.dim();
        let b = mask_prob.mapv(|p| p >= c.binarize_threshold);
        if !b.iter().any(|&v| v) {
            return None;
        }
        let mut contour = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !b[[y, x]] {
                    continue;
                }
                let border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
                let mut adj = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                            && !b[[ny as usize, nx as usize]]
                        {
                            adj = true;
                        }
                    }
                }
                if border || adj {
                    contour.push((y as i64, x as i64));
                }
            }
        }
        let dist = |y: usize, x: usize| -> u32 {
            contour
                .iter()
                .map(|&(cy, cx)| {
                    ((y as i64 - cy).abs().max((x as i64 - cx).abs())) as u32
                })
                .min()
                .unwrap_or(u32::MAX / 2)
        };
        let mut face = Vec::new();
        let mut background = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if dist(y, x) < c.erosion_radius as u32 {
                    continue;
                }
                if b[[y, x]] {
                    face.push((y, x));
                } else {
                    background.push((y, x));
                }
            }
        }
        if face.is_empty() || background.is_empty() {
            None
        } else {
            Some(RegionSplit {
                face_pixels: face,
                background_pixels: background,
            })
        }
    }

    #[test]
    fn all_zero_mask_is_skipped() {
        let mask = Array2::zeros((16, 16));
        assert!(split_mask_regions(&mask, &cfg()).is_none());
    }

    #[test]
    fn six_by_six_block_keeps_central_two_by_two() {
        let mask = block_mask(16, 5, 10, 5, 10);
        let split = split_mask_regions(&mask, &cfg()).unwrap();
        let mut face = split.face_pixels.clone();
        face.sort();
        assert_eq!(face, vec![(7, 7), (7, 8), (8, 7), (8, 8)]);
        let brute = brute_split(&mask, &cfg()).unwrap();
        assert_eq!(split.background_pixels.len(), brute.background_pixels.len());
    }

    #[test]
    fn zero_radius_keeps_everything() {
        let c = FineConfig {
            erosion_radius: 0,
            ..cfg()
        };
        let mask = block_mask(12, 3, 8, 2, 9);
        let split = split_mask_regions(&mask, &c).unwrap();
        let ones = mask.iter().filter(|&&v| v >= 0.5).count();
        assert_eq!(split.face_pixels.len(), ones);
        assert_eq!(split.background_pixels.len(), 144 - ones);
    }

    #[test]
    fn split_matches_brute_force_on_random_masks() {
        let mut rng = crate::rng::stream(17, "fine", 0);
        for trial in 0..100 {
            let mask = Array2::from_shape_fn((32, 32), |_| {
                if rng.random_bool(0.5) { 1.0 } else { 0.0 }
            });
            let a = split_mask_regions(&mask, &cfg());
            let b = brute_split(&mask, &cfg());
            match (a, b) {
                (None, None) => {}
                (Some(mut a), Some(mut b)) => {
                    a.face_pixels.sort();
                    b.face_pixels.sort();
                    a.background_pixels.sort();
                    b.background_pixels.sort();
                    assert_eq!(a, b, "trial {trial}");
                }
                (a, b) => panic!("trial {trial}: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn region_sim_cases() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert!((region_sim(&[e1.clone()], &[e1.clone()]).unwrap() - 1.0).abs() < 1e-15);
        assert!(region_sim(&[e1.clone()], &[e2.clone()]).unwrap().abs() < 1e-15);
        let got = region_sim(&[e1.clone(), e2], &[e1]).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
        assert!(region_sim(&[], &[vec![1.0]]).is_err());
    }

    fn synth_split(label: FaceLabel, face_dir: &[f64], bg_dir: &[f64]) -> MaskRegionSplit {
        MaskRegionSplit {
            label,
            face_pixels: vec![face_dir.to_vec()],
            background_pixels: vec![bg_dir.to_vec()],
            source_proposal: 0,
        }
    }

    #[test]
    fn intra_loss_examples() {
        let tau = 0.7;
        // no fake: exactly 0
        let only_real = vec![synth_split(FaceLabel::Real, &[1.0, 0.0], &[1.0, 0.0])];
        assert_eq!(intra_face_loss(&only_real, tau).unwrap(), Some(0.0));
        // no real: skipped
        let only_fake = vec![synth_split(FaceLabel::Fake, &[1.0, 0.0], &[0.0, 1.0])];
        assert_eq!(intra_face_loss(&only_fake, tau).unwrap(), None);
        // delta_R = 1, delta_F = -1: -ln sigma(2/0.7)
        let both = vec![
            synth_split(FaceLabel::Real, &[1.0, 0.0], &[1.0, 0.0]),
            synth_split(FaceLabel::Fake, &[1.0, 0.0], &[-1.0, 0.0]),
        ];
        let got = intra_face_loss(&both, tau).unwrap().unwrap();
        let expect = -(1.0 / (1.0 + (-2.0f64 / 0.7).exp())).ln();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((got - 0.0558).abs() < 5e-4);
        // symmetric case: log 2
        let sym = vec![
            synth_split(FaceLabel::Real, &[1.0, 0.0], &[0.0, 1.0]),
            synth_split(FaceLabel::Fake, &[1.0, 0.0], &[0.0, 1.0]),
        ];
        let got = intra_face_loss(&sym, tau).unwrap().unwrap();
        assert!((got - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inter_loss_examples() {
        let tau = 0.7;
        // single pair with equal sims: ln 2
        let splits = vec![
            synth_split(FaceLabel::Real, &[1.0, 0.0], &[0.0, 1.0]),
            synth_split(FaceLabel::Fake, &[1.0, 0.0], &[0.0, 1.0]),
        ];
        let got = inter_face_loss(&splits, tau).unwrap().unwrap();
        assert!((got - 2.0f64.ln()).abs() < 1e-12);
        // bg aligned (+1), faces opposed (-1): -ln sigma(2/0.7)
        let splits = vec![
            synth_split(FaceLabel::Real, &[1.0, 0.0], &[0.0, 1.0]),
            synth_split(FaceLabel::Fake, &[-1.0, 0.0], &[0.0, 1.0]),
        ];
        let got = inter_face_loss(&splits, tau).unwrap().unwrap();
        let expect = -(1.0 / (1.0 + (-2.0f64 / 0.7).exp())).ln();
        assert!((got - expect).abs() < 1e-9);
        // only one class: skipped
        let only_real = vec![synth_split(FaceLabel::Real, &[1.0, 0.0], &[0.0, 1.0])];
        assert_eq!(inter_face_loss(&only_real, tau).unwrap(), None);
    }

    fn random_splits(
        rng: &mut rand_chacha::ChaCha8Rng,
        n_real: usize,
        n_fake: usize,
        d: usize,
    ) -> Vec<MaskRegionSplit> {
        let mut out = Vec::new();
        let mut mk = |label| {
            let p = rng.random_range(1..4);
            let q = rng.random_range(1..4);
            let gen = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
                (0..n)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) + 0.01).collect())
                    .collect::<Vec<Vec<f64>>>()
            };
            MaskRegionSplit {
                label,
                face_pixels: gen(rng, p),
                background_pixels: gen(rng, q),
                source_proposal: 0,
            }
        };
        for _ in 0..n_real {
            out.push(mk(FaceLabel::Real));
        }
        for _ in 0..n_fake {
            out.push(mk(FaceLabel::Fake));
        }
        out
    }

    #[test]
    fn losses_nonnegative_and_bounded_on_random_inputs() {
        let mut rng = crate::rng::stream(17, "fine", 1);
        let tau = 0.7;
        for _ in 0..50 {
            let splits = random_splits(&mut rng, 2, 2, 4);
            let li = intra_face_loss(&splits, tau).unwrap().unwrap();
            let le = inter_face_loss(&splits, tau).unwrap().unwrap();
            let bound = 4.0 * (2.0 / tau) + (4.0f64).ln();
            assert!(li.is_finite() && li >= 0.0 && li < bound);
            assert!(le.is_finite() && le >= 0.0 && le < bound);
        }
    }

    /// Direct-evaluation oracle for the intra loss from raw sims.
    fn intra_oracle(real: &[f64], fake: &[f64], tau: f64) -> f64 {
        let sn: f64 = real.iter().map(|&s| (s / tau).exp()).sum();
        let se: f64 = fake.iter().map(|&s| (s / tau).exp()).sum();
        -(sn / (sn + se)).ln()
    }

    #[test]
    fn intra_monotonicity_on_random_instances() {
        let mut rng = crate::rng::stream(17, "fine", 2);
        let tau = 0.7;
        for _ in 0..100 {
            let nr = rng.random_range(1..4);
            let nf = rng.random_range(1..4);
            let real: Vec<f64> = (0..nr).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fake: Vec<f64> = (0..nf).map(|_| rng.random_range(-1.0..1.0)).collect();
            let base = intra_oracle(&real, &fake, tau);
            // increasing any fake sim increases the loss
            for i in 0..nf {
                let mut f2 = fake.clone();
                f2[i] += 0.01;
                assert!(intra_oracle(&real, &f2, tau) > base);
            }
            // increasing any real sim decreases the loss
            for i in 0..nr {
                let mut r2 = real.clone();
                r2[i] += 0.01;
                assert!(intra_oracle(&r2, &fake, tau) < base);
            }
            // and the implementation agrees with the oracle
            let splits: Vec<MaskRegionSplit> = real
                .iter()
                .map(|&s| sim_split(FaceLabel::Real, s))
                .chain(fake.iter().map(|&s| sim_split(FaceLabel::Fake, s)))
                .collect();
            let got = intra_face_loss(&splits, tau).unwrap().unwrap();
            assert!((got - base).abs() < 1e-9);
        }
    }

    /// A split whose face/background similarity is exactly `sim`.
    fn sim_split(label: FaceLabel, sim: f64) -> MaskRegionSplit {
        // two unit vectors at angle acos(sim)
        let theta = sim.clamp(-1.0, 1.0).acos();
        MaskRegionSplit {
            label,
            face_pixels: vec![vec![1.0, 0.0]],
            background_pixels: vec![vec![theta.cos(), theta.sin()]],
            source_proposal: 0,
        }
    }

    #[test]
    fn tape_losses_match_plain_and_gradients_check_out() {
        let mut rng = crate::rng::stream(17, "fine", 3);
        let tau = 0.7;
        for _ in 0..5 {
            let splits = random_splits(&mut rng, 2, 2, 3);
            let plain_intra = intra_face_loss(&splits, tau).unwrap().unwrap();
            let plain_inter = inter_face_loss(&splits, tau).unwrap().unwrap();

            let tape = Tape::new();
            let as_mat = |rows: &Vec<Vec<f64>>| {
                let m = rows.len();
                let d = rows[0].len();
                let mut a = ArrayD::zeros(IxDyn(&[m, d]));
                for (i, r) in rows.iter().enumerate() {
                    for (j, &v) in r.iter().enumerate() {
                        a[[i, j]] = v;
                    }
                }
                a
            };
            let vars: Vec<RegionVars> = splits
                .iter()
                .map(|s| RegionVars {
                    label: s.label,
                    face: tape.param(as_mat(&s.face_pixels)),
                    background: tape.param(as_mat(&s.background_pixels)),
                })
                .collect();
            let li = intra_face_loss_var(&tape, &vars, tau).unwrap();
            assert!((li.scalar_value() - plain_intra).abs() < 1e-9);
            let labels: Vec<FaceLabel> = splits.iter().map(|s| s.label).collect();
            let mut prng = crate::rng::stream(17, "fine", 99);
            let pairs = index_pairs(&labels, 32, &mut prng);
            let le = inter_face_loss_var(&tape, &vars, &pairs, tau).unwrap();
            assert!((le.scalar_value() - plain_inter).abs() < 1e-9);

            // finite differences through region_sim on one face set
            let total = li.add(le);
            let grads = tape.backward(total);
            let target = vars[0].face;
            let analytic = grads.get(target).unwrap().clone();
            let h = 1e-6;
            let base_rows = splits[0].face_pixels.clone();
            for idx in 0..analytic.len() {
                let eval = |delta: f64| {
                    let mut rows = base_rows.clone();
                    let d = rows[0].len();
                    rows[idx / d][idx % d] += delta;
                    let mut s2 = splits.clone();
                    s2[0].face_pixels = rows;
                    let a = intra_face_loss(&s2, tau).unwrap().unwrap();
                    let b = inter_face_loss(&s2, tau).unwrap().unwrap();
                    a + b
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "idx {idx}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn pair_cap_subsamples_deterministically() {
        let labels: Vec<FaceLabel> = (0..6)
            .map(|i| if i < 3 { FaceLabel::Real } else { FaceLabel::Fake })
            .collect();
        let mut r1 = crate::rng::stream(17, "fine", 4);
        let mut r2 = crate::rng::stream(17, "fine", 4);
        let a = index_pairs(&labels, 4, &mut r1);
        let b = index_pairs(&labels, 4, &mut r2);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let all = index_pairs(&labels, 100, &mut r1);
        assert_eq!(all.len(), 9);
    }

    #[test]
    fn split_predicted_mask_carries_features() {
        let s = 8;
        let mut mask_prob = Array2::zeros((s, s));
        for y in 1..7 {
            for x in 1..7 {
                mask_prob[[y, x]] = 1.0;
            }
        }
        let feature_map = Array3::from_shape_fn((2, s, s), |(c, y, x)| {
            (c * 100 + y * 10 + x) as f64
        });
        let pm = PredictedMask {
            proposal_id: 5,
            feature_map,
            mask_prob,
        };
        let c = FineConfig {
            erosion_radius: 1,
            ..cfg()
        };
        let split = split_predicted_mask(&pm, FaceLabel::Fake, &c).unwrap();
        assert_eq!(split.source_proposal, 5);
        assert!(!split.face_pixels.is_empty());
        // interior 4x4 at radius 1 from the ring
        assert_eq!(split.face_pixels.len(), 16);
        assert_eq!(split.face_pixels[0].len(), 2);
    }
}
