//! The two contrastive views of a training image.
//!
//! The query view goes through geometric ops (random crop, flip, rotation)
//! with the annotations mapped through the exact affine transform. The key
//! view goes through photometric/noise ops only — color jitter, grayscale,
//! random blocking, bilinear down-up, Gaussian and salt-and-pepper noise —
//! so face positions stay untouched and cross-view correspondence by ground
//! truth face remains valid.
//!
//! Images are `[3,H,W]` arrays with values in [0,1]. Everything is a pure
//! function of `(input, rng)`; the op log makes a sample replayable.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AugmentConfig;
use crate::detector::{BoxF, GtFace};
use crate::error::{Error, Result};

/// Row-major 2x3 affine: `(x,y) -> (m00 x + m01 y + m02, m10 x + m11 y + m12)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translate(tx: f64, ty: f64) -> Self {
        Affine {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Horizontal flip of a width-`w` frame: `x' = w - x`.
    pub fn flip_x(w: f64) -> Self {
        Affine {
            m: [[-1.0, 0.0, w], [0.0, 1.0, 0.0]],
        }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Affine {
            m: [[sx, 0.0, 0.0], [0.0, sy, 0.0]],
        }
    }

    pub fn rotate_about(theta_rad: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = theta_rad.sin_cos();
        Affine {
            m: [
                [c, -s, cx - c * cx + s * cy],
                [s, c, cy - s * cx - c * cy],
            ],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine) -> Affine {
        let a = &self.m;
        let b = &other.m;
        let mut out = [[0.0; 3]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            row[0] = a[i][0] * b[0][0] + a[i][1] * b[1][0];
            row[1] = a[i][0] * b[0][1] + a[i][1] * b[1][1];
            row[2] = a[i][0] * b[0][2] + a[i][1] * b[1][2] + a[i][2];
        }
        Affine { m: out }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    pub fn inverse(&self) -> Affine {
        let [[a, b, c], [d, e, f]] = self.m;
        let det = a * e - b * d;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Affine {
            m: [
                [ia, ib, -(ia * c + ib * f)],
                [id, ie, -(id * c + ie * f)],
            ],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.m == Affine::identity().m
    }

    pub fn apply_box(&self, b: &BoxF) -> BoxF {
        let corners = [
            self.apply(b.x1, b.y1),
            self.apply(b.x2, b.y1),
            self.apply(b.x1, b.y2),
            self.apply(b.x2, b.y2),
        ];
        let xs: Vec<f64> = corners.iter().map(|c| c.0).collect();
        let ys: Vec<f64> = corners.iter().map(|c| c.1).collect();
        BoxF::new(
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

/// One applied augmentation with its sampled parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    Crop { x0: usize, y0: usize, w: usize, h: usize },
    Flip,
    Rotate { degrees: f64 },
    ColorJitter { brightness: f64, contrast: f64, saturation: f64, sharpness: f64 },
    Grayscale,
    Block { chunks: Vec<usize> },
    DownUp { factor: f64 },
    Gaussian { variance: f64 },
    SaltPepper { fraction: f64 },
}

/// Both views of one sample plus the applied-op logs.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub image_q: Array3<f64>,
    pub anns_q: Vec<GtFace>,
    /// Source annotation index for each entry of `anns_q` (faces can be
    /// dropped when a transform degenerates them).
    pub ann_src_idx: Vec<usize>,
    pub image_k: Array3<f64>,
    pub log_q: Vec<AugOp>,
    pub log_k: Vec<AugOp>,
    pub dropped_faces: usize,
}

pub fn augment_pair(
    img: &Array3<f64>,
    anns: &[GtFace],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> AugmentedPair {
    let (image_q, anns_q, ann_src_idx, log_q) = make_query_view(img, anns, cfg, rng);
    let dropped = anns.len() - anns_q.len();
    let (image_k, log_k) = make_key_view(img, cfg, rng);
    AugmentedPair {
        image_q,
        anns_q,
        ann_src_idx,
        image_k,
        log_q,
        log_k,
        dropped_faces: dropped,
    }
}

// ---------------------------------------------------------------------------
// Query view: geometric ops with exact annotation transform
// ---------------------------------------------------------------------------

pub fn make_query_view(
    img: &Array3<f64>,
    anns: &[GtFace],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Vec<GtFace>, Vec<usize>, Vec<AugOp>) {
    let (_, h, w) = img.dim();
    let mut log = Vec::new();

    // Crop: every face box must intersect the window; resample up to 10
    // times, otherwise skip the crop.
    let min_side = cfg.crop_min_area.sqrt();
    let mut crop: Option<(usize, usize, usize, usize)> = None;
    if cfg.crop_min_area < 1.0 {
        for _ in 0..10 {
            let fw = rng.random_range(min_side..=1.0);
            let fh = rng.random_range(min_side..=1.0);
            let cw = ((w as f64 * fw).round() as usize).clamp(1, w);
            let ch = ((h as f64 * fh).round() as usize).clamp(1, h);
            let x0 = rng.random_range(0..=(w - cw));
            let y0 = rng.random_range(0..=(h - ch));
            let window = BoxF::new(x0 as f64, y0 as f64, (x0 + cw) as f64, (y0 + ch) as f64);
            let ok = anns.iter().all(|f| {
                f.bbox.x1 < window.x2
                    && f.bbox.x2 > window.x1
                    && f.bbox.y1 < window.y2
                    && f.bbox.y2 > window.y1
            });
            if ok {
                crop = Some((x0, y0, cw, ch));
                break;
            }
        }
    }
    // The crop window is scaled back to the source frame so every view in a
    // batch keeps the same dimensions.
    let (x0, y0, crop_w, crop_h) = crop.unwrap_or((0, 0, w, h));
    let (out_w, out_h) = (w, h);
    let mut t = Affine::scale(w as f64 / crop_w as f64, h as f64 / crop_h as f64)
        .compose(&Affine::translate(-(x0 as f64), -(y0 as f64)));
    if crop.is_some() {
        log.push(AugOp::Crop { x0, y0, w: crop_w, h: crop_h });
    }

    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        t = Affine::flip_x(out_w as f64).compose(&t);
        log.push(AugOp::Flip);
    }

    if cfg.rotation_max_deg > 0.0 {
        let deg = rng.random_range(-cfg.rotation_max_deg..=cfg.rotation_max_deg);
        t = Affine::rotate_about(
            deg.to_radians(),
            out_w as f64 / 2.0,
            out_h as f64 / 2.0,
        )
        .compose(&t);
        log.push(AugOp::Rotate { degrees: deg });
    }

    let image_q = if t.is_identity() {
        img.clone()
    } else {
        warp_image(img, &t, out_w, out_h)
    };

    let mut anns_q = Vec::new();
    let mut src_idx = Vec::new();
    for (fi, face) in anns.iter().enumerate() {
        let bb = t
            .apply_box(&face.bbox)
            .clip(out_w as f64, out_h as f64);
        let mask = warp_mask(&face.mask, &t, out_w, out_h);
        if !bb.is_valid() || mask.iter().all(|&v| v == 0) {
            continue;
        }
        anns_q.push(GtFace {
            bbox: bb,
            label: face.label,
            mask,
        });
        src_idx.push(fi);
    }
    (image_q, anns_q, src_idx, log)
}

fn warp_image(img: &Array3<f64>, t: &Affine, out_w: usize, out_h: usize) -> Array3<f64> {
    let inv = t.inverse();
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sx, sy) = inv.apply(ox as f64 + 0.5, oy as f64 + 0.5);
            let (px, py) = (sx - 0.5, sy - 0.5);
            if px < -0.5 || py < -0.5 || px > w as f64 - 0.5 || py > h as f64 - 0.5 {
                continue; // outside: stays zero
            }
            let px = px.clamp(0.0, (w - 1) as f64);
            let py = py.clamp(0.0, (h - 1) as f64);
            let x1 = px.floor() as usize;
            let y1 = py.floor() as usize;
            let x2 = (x1 + 1).min(w - 1);
            let y2 = (y1 + 1).min(h - 1);
            let fx = px - x1 as f64;
            let fy = py - y1 as f64;
            for ci in 0..c {
                out[[ci, oy, ox]] = img[[ci, y1, x1]] * (1.0 - fy) * (1.0 - fx)
                    + img[[ci, y1, x2]] * (1.0 - fy) * fx
                    + img[[ci, y2, x1]] * fy * (1.0 - fx)
                    + img[[ci, y2, x2]] * fy * fx;
            }
        }
    }
    out
}

fn warp_mask(mask: &Array2<u8>, t: &Affine, out_w: usize, out_h: usize) -> Array2<u8> {
    let inv = t.inverse();
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sx, sy) = inv.apply(ox as f64 + 0.5, oy as f64 + 0.5);
            let (px, py) = (sx.floor(), sy.floor());
            if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                continue;
            }
            out[[oy, ox]] = mask[[py as usize, px as usize]];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Key view: photometric / noise ops, geometry untouched
// ---------------------------------------------------------------------------

pub fn make_key_view(
    img: &Array3<f64>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Vec<AugOp>) {
    let mut out = img.clone();
    let mut log = Vec::new();
    let fire = |rng: &mut ChaCha8Rng, p: f64| p > 0.0 && rng.random_bool(p.min(1.0));

    if cfg.enable_color_jitter && fire(rng, cfg.op_prob) {
        let brightness = rng.random_range(cfg.bright_contrast_min..=cfg.bright_contrast_max);
        let contrast = rng.random_range(cfg.bright_contrast_min..=cfg.bright_contrast_max);
        let saturation = rng.random_range(cfg.sat_sharp_min..=cfg.sat_sharp_max);
        let sharpness = rng.random_range(cfg.sat_sharp_min..=cfg.sat_sharp_max);
        out = color_jitter(&out, brightness, contrast, saturation, sharpness);
        log.push(AugOp::ColorJitter {
            brightness,
            contrast,
            saturation,
            sharpness,
        });
    }
    if cfg.enable_grayscale && fire(rng, cfg.op_prob) {
        out = grayscale(&out);
        log.push(AugOp::Grayscale);
    }
    if cfg.enable_block && fire(rng, cfg.op_prob) {
        let (blocked, chunks) = random_block(&out, cfg, rng);
        out = blocked;
        log.push(AugOp::Block { chunks });
    }
    if cfg.enable_downup && fire(rng, cfg.op_prob) {
        out = down_up(&out, cfg.downscale_factor);
        log.push(AugOp::DownUp {
            factor: cfg.downscale_factor,
        });
    }
    if cfg.enable_gaussian && fire(rng, cfg.op_prob) {
        let variance = cfg.gaussian_vars[rng.random_range(0..cfg.gaussian_vars.len())];
        out = add_gaussian(&out, variance, rng);
        log.push(AugOp::Gaussian { variance });
    }
    if cfg.enable_salt_pepper && fire(rng, cfg.op_prob) {
        let fraction = cfg.salt_pepper_fracs[rng.random_range(0..cfg.salt_pepper_fracs.len())];
        out = add_salt_pepper(&out, fraction, rng);
        log.push(AugOp::SaltPepper { fraction });
    }
    (out, log)
}

fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn lum(img: &Array3<f64>, y: usize, x: usize) -> f64 {
    0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]]
}

/// Brightness, contrast, saturation, sharpness in that fixed order; a factor
/// of exactly 1.0 leaves the image bit-identical.
pub fn color_jitter(
    img: &Array3<f64>,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    sharpness: f64,
) -> Array3<f64> {
    let mut out = img.clone();
    let (c, h, w) = out.dim();
    if brightness != 1.0 {
        out.mapv_inplace(|v| clip01(v * brightness));
    }
    if contrast != 1.0 {
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean += lum(&out, y, x);
            }
        }
        mean /= (h * w) as f64;
        out.mapv_inplace(|v| clip01(mean + contrast * (v - mean)));
    }
    if saturation != 1.0 {
        let mut next = out.clone();
        for y in 0..h {
            for x in 0..w {
                let g = lum(&out, y, x);
                for ci in 0..c {
                    next[[ci, y, x]] = clip01(g + saturation * (out[[ci, y, x]] - g));
                }
            }
        }
        out = next;
    }
    if sharpness != 1.0 {
        let smooth = smooth3(&out);
        let mut next = out.clone();
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let s = smooth[[ci, y, x]];
                    next[[ci, y, x]] = clip01(s + sharpness * (out[[ci, y, x]] - s));
                }
            }
        }
        out = next;
    }
    out
}

/// 3x3 smoothing with the center-weighted kernel, symmetric padding.
fn smooth3(img: &Array3<f64>) -> Array3<f64> {
    const K: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i >= len as isize {
            2 * len - 1 - i as usize
        } else {
            i as usize
        }
    };
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, row) in K.iter().enumerate() {
                    for (dx, &kv) in row.iter().enumerate() {
                        let sy = reflect(y as isize + dy as isize - 1, h);
                        let sx = reflect(x as isize + dx as isize - 1, w);
                        acc += kv * img[[ci, sy, sx]];
                    }
                }
                out[[ci, y, x]] = acc / 13.0;
            }
        }
    }
    out
}

pub fn grayscale(img: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let g = lum(img, y, x);
            for c in 0..3 {
                out[[c, y, x]] = g;
            }
        }
    }
    out
}

/// Zero out a random 2..6% of the 10x10 grid chunks (bounds from config).
/// Returns the blocked image and the chosen chunk indices (row-major).
pub fn random_block(
    img: &Array3<f64>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Vec<usize>) {
    let g = cfg.block_grid;
    let total = g * g;
    let lo = (cfg.block_frac_min * total as f64).ceil() as usize;
    let hi = (cfg.block_frac_max * total as f64).floor() as usize;
    let m = rng.random_range(lo..=hi);
    // partial Fisher-Yates for m distinct chunks
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..m {
        let j = rng.random_range(i..total);
        idx.swap(i, j);
    }
    let chunks: Vec<usize> = idx[..m].to_vec();
    let (c, h, w) = img.dim();
    let mut out = img.clone();
    for &chunk in &chunks {
        let gy = chunk / g;
        let gx = chunk % g;
        let y_lo = gy * h / g;
        let y_hi = (gy + 1) * h / g;
        let x_lo = gx * w / g;
        let x_hi = (gx + 1) * w / g;
        for ci in 0..c {
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    out[[ci, y, x]] = 0.0;
                }
            }
        }
    }
    (out, chunks)
}

/// Downscale to `factor` of the size and bilinearly upscale back.
pub fn down_up(img: &Array3<f64>, factor: f64) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let dh = ((h as f64 * factor).round() as usize).max(1);
    let dw = ((w as f64 * factor).round() as usize).max(1);
    let as_batch = |a: &Array3<f64>| {
        let mut v = ArrayD::zeros(IxDyn(&[1, c, a.dim().1, a.dim().2]));
        for ci in 0..c {
            for y in 0..a.dim().1 {
                for x in 0..a.dim().2 {
                    v[[0, ci, y, x]] = a[[ci, y, x]];
                }
            }
        }
        v
    };
    let down = crate::tensor::bilinear_resize_forward(&as_batch(img), dh, dw);
    let mut down3 = Array3::zeros((c, dh, dw));
    for ci in 0..c {
        for y in 0..dh {
            for x in 0..dw {
                down3[[ci, y, x]] = down[[0, ci, y, x]];
            }
        }
    }
    let up = crate::tensor::bilinear_resize_forward(&as_batch(&down3), h, w);
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = up[[0, ci, y, x]];
            }
        }
    }
    out
}

/// Zero-mean Gaussian noise field, exposed for statistical tests.
pub fn gaussian_field(shape: (usize, usize, usize), variance: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, variance.sqrt()).expect("valid std");
    Array3::from_shape_fn(shape, |_| normal.sample(rng))
}

pub fn add_gaussian(img: &Array3<f64>, variance: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let field = gaussian_field(img.dim(), variance, rng);
    let mut out = img + &field;
    out.mapv_inplace(clip01);
    out
}

pub fn add_salt_pepper(img: &Array3<f64>, fraction: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(fraction) {
                let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                for ci in 0..c {
                    out[[ci, y, x]] = v;
                }
            }
        }
    }
    out
}

/// Noise entry point with a string kind, mirroring the config surface.
pub fn add_noise(
    img: &Array3<f64>,
    kind: &str,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    match kind {
        "gaussian" => {
            let variance = cfg.gaussian_vars[rng.random_range(0..cfg.gaussian_vars.len())];
            Ok(add_gaussian(img, variance, rng))
        }
        "salt_pepper" => {
            let fraction = cfg.salt_pepper_fracs[rng.random_range(0..cfg.salt_pepper_fracs.len())];
            Ok(add_salt_pepper(img, fraction, rng))
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown noise kind `{other}` (expected gaussian or salt_pepper)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn rng(i: u64) -> ChaCha8Rng {
        crate::rng::stream(7, "augment-test", i)
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut r = rng(seed);
        Array3::from_shape_fn((3, h, w), |_| r.random_range(0.0..1.0))
    }

    fn one_face(h: usize, w: usize, bb: BoxF) -> Vec<GtFace> {
        let mut mask = Array2::zeros((h, w));
        for y in bb.y1 as usize..bb.y2 as usize {
            for x in bb.x1 as usize..bb.x2 as usize {
                mask[[y, x]] = 1;
            }
        }
        vec![GtFace {
            bbox: bb,
            label: crate::detector::FaceLabel::Real,
            mask,
        }]
    }

    #[test]
    fn identity_transform_keeps_annotations() {
        let cfg = AugmentConfig {
            crop_min_area: 1.0,
            flip_prob: 0.0,
            rotation_max_deg: 0.0,
            ..AugmentConfig::default()
        };
        let img = noise_image(64, 64, 0);
        let anns = one_face(64, 64, BoxF::new(10.0, 12.0, 30.0, 40.0));
        let (q, anns_q, src_idx, log) = make_query_view(&img, &anns, &cfg, &mut rng(1));
        assert_eq!(q, img);
        assert!(log.is_empty());
        assert_eq!(src_idx, vec![0]);
        assert_eq!(anns_q[0].bbox, anns[0].bbox);
        assert_eq!(anns_q[0].mask, anns[0].mask);
    }

    #[test]
    fn horizontal_flip_maps_box_exactly() {
        let t = Affine::flip_x(100.0);
        let b = t.apply_box(&BoxF::new(10.0, 0.0, 30.0, 10.0));
        assert_eq!(b, BoxF::new(70.0, 0.0, 90.0, 10.0));
    }

    #[test]
    fn query_view_deterministic_under_seed() {
        let cfg = AugmentConfig::default();
        let img = noise_image(80, 96, 2);
        let anns = one_face(80, 96, BoxF::new(20.0, 20.0, 50.0, 52.0));
        let a = make_query_view(&img, &anns, &cfg, &mut rng(3));
        let b = make_query_view(&img, &anns, &cfg, &mut rng(3));
        assert_eq!(a.0, b.0);
        assert_eq!(a.3, b.3);
        assert_eq!(a.1.len(), b.1.len());
        for (fa, fb) in a.1.iter().zip(b.1.iter()) {
            assert_eq!(fa.bbox, fb.bbox);
            assert_eq!(fa.mask, fb.mask);
        }
    }

    #[test]
    fn transformed_masks_match_transformed_boxes() {
        // rasterizing the transformed mask stays inside the transformed box
        // within a 1-pixel band
        let cfg = AugmentConfig::default();
        let img = noise_image(96, 96, 4);
        let anns = one_face(96, 96, BoxF::new(24.0, 30.0, 60.0, 70.0));
        for i in 0..10 {
            let (_, anns_q, _, _) = make_query_view(&img, &anns, &cfg, &mut rng(100 + i));
            for f in &anns_q {
                let (h, w) = f.mask.dim();
                for y in 0..h {
                    for x in 0..w {
                        if f.mask[[y, x]] != 0 {
                            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                            assert!(
                                xf >= f.bbox.x1 - 1.0
                                    && xf <= f.bbox.x2 + 1.0
                                    && yf >= f.bbox.y1 - 1.0
                                    && yf <= f.bbox.y2 + 1.0,
                                "mask pixel ({x},{y}) escapes box {:?}",
                                f.bbox
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn key_view_all_ops_off_is_identity() {
        let cfg = AugmentConfig {
            op_prob: 0.0,
            ..AugmentConfig::default()
        };
        let img = noise_image(64, 64, 5);
        let (k, log) = make_key_view(&img, &cfg, &mut rng(6));
        assert_eq!(k, img);
        assert!(log.is_empty());
    }

    #[test]
    fn neutral_color_jitter_is_bit_identical() {
        let img = noise_image(32, 32, 7);
        let out = color_jitter(&img, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(out, img);
    }

    #[test]
    fn key_view_deterministic_and_geometry_free() {
        let cfg = AugmentConfig {
            op_prob: 1.0,
            ..AugmentConfig::default()
        };
        let img = noise_image(70, 50, 8);
        let (a, log_a) = make_key_view(&img, &cfg, &mut rng(9));
        let (b, log_b) = make_key_view(&img, &cfg, &mut rng(9));
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(a.dim(), img.dim());
        assert_eq!(log_a.len(), 6); // all ops fired
    }

    #[test]
    fn block_counts_and_locality() {
        let cfg = AugmentConfig::default();
        let img = Array3::from_elem((3, 100, 100), 0.8);
        for i in 0..20 {
            let (out, chunks) = random_block(&img, &cfg, &mut rng(200 + i));
            assert!((2..=6).contains(&chunks.len()), "chunk count {}", chunks.len());
            let zeroed = out.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeroed, chunks.len() * 100 * 3);
            // pixels outside blocked chunks bit-identical
            let mut blocked = vec![false; 100 * 100];
            for &chunk in &chunks {
                let (gy, gx) = (chunk / 10, chunk % 10);
                for y in gy * 10..(gy + 1) * 10 {
                    for x in gx * 10..(gx + 1) * 10 {
                        blocked[y * 100 + x] = true;
                    }
                }
            }
            for y in 0..100 {
                for x in 0..100 {
                    if !blocked[y * 100 + x] {
                        for c in 0..3 {
                            assert_eq!(out[[c, y, x]], img[[c, y, x]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gaussian_variance_in_band() {
        // 5-sigma statistical band on 10^6 samples
        let mut r = rng(10);
        let field = gaussian_field((1, 1000, 1000), 0.01, &mut r);
        let n = field.len() as f64;
        let mean = field.sum() / n;
        let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((0.008..=0.012).contains(&var), "variance {var}");
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn salt_pepper_changed_fraction_in_band() {
        let img = Array3::from_elem((3, 1000, 1000), 0.5);
        let mut r = rng(11);
        let out = add_salt_pepper(&img, 0.1, &mut r);
        let changed = (0..1000 * 1000)
            .filter(|&i| {
                let (y, x) = (i / 1000, i % 1000);
                out[[0, y, x]] != 0.5
            })
            .count();
        let frac = changed as f64 / 1e6;
        assert!((0.08..=0.12).contains(&frac), "changed fraction {frac}");
    }

    #[test]
    fn unknown_noise_kind_rejected() {
        let cfg = AugmentConfig::default();
        let img = noise_image(16, 16, 12);
        let err = add_noise(&img, "speckle", &cfg, &mut rng(13)).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidArgument(_)));
        assert!(err.to_string().contains("speckle"));
    }

    #[test]
    fn noise_deterministic_under_seed() {
        let cfg = AugmentConfig::default();
        let img = noise_image(32, 32, 14);
        let a = add_noise(&img, "gaussian", &cfg, &mut rng(15)).unwrap();
        let b = add_noise(&img, "gaussian", &cfg, &mut rng(15)).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&img, "salt_pepper", &cfg, &mut rng(16)).unwrap();
        let d = add_noise(&img, "salt_pepper", &cfg, &mut rng(16)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn down_up_cuts_high_frequency_energy() {
        // FFT band-energy oracle on white noise: energy above Nyquist/4
        // should drop by more than half after the 1/4 down-up.
        use rustfft::{num_complex::Complex, FftPlanner};
        let n = 256usize;
        let img = noise_image(n, n, 17);
        let out = down_up(&img, 0.25);

        let band_energy = |a: &Array3<f64>| -> f64 {
            // 1-D FFTs over every row of the luminance plane
            let mut planner = FftPlanner::new();
            let fft = planner.plan_fft_forward(n);
            let mut total = 0.0;
            for y in 0..n {
                let mut row: Vec<Complex<f64>> = (0..n)
                    .map(|x| Complex::new(lum(a, y, x), 0.0))
                    .collect();
                fft.process(&mut row);
                // frequencies above Nyquist/4: indices in (n/8, n/2]
                for (k, v) in row.iter().enumerate().take(n / 2 + 1) {
                    if k > n / 8 {
                        total += v.norm_sqr();
                    }
                }
            }
            total
        };
        let before = band_energy(&img);
        let after = band_energy(&out);
        assert!(
            after < 0.5 * before,
            "expected >50% reduction, got {after} vs {before}"
        );
    }

    #[test]
    fn augment_pair_keeps_key_annotations_identical() {
        let cfg = AugmentConfig::default();
        let img = noise_image(96, 96, 18);
        let anns = one_face(96, 96, BoxF::new(30.0, 30.0, 60.0, 60.0));
        let pair = augment_pair(&img, &anns, &cfg, &mut rng(19));
        // key view has the source geometry by construction: same dims and
        // the caller keeps using the source annotations for it
        assert_eq!(pair.image_k.dim(), img.dim());
        // full pipeline deterministic
        let pair2 = augment_pair(&img, &anns, &cfg, &mut rng(19));
        assert_eq!(pair.image_q, pair2.image_q);
        assert_eq!(pair.image_k, pair2.image_k);
        assert_eq!(pair.log_q, pair2.log_q);
        assert_eq!(pair.log_k, pair2.log_k);
    }

    #[test]
    fn op_log_serializes_to_json_lines() {
        let cfg = AugmentConfig {
            op_prob: 1.0,
            ..AugmentConfig::default()
        };
        let img = noise_image(40, 40, 20);
        let (_, log) = make_key_view(&img, &cfg, &mut rng(21));
        for op in &log {
            let line = serde_json::to_string(op).unwrap();
            let back: AugOp = serde_json::from_str(&line).unwrap();
            assert_eq!(&back, op);
        }
    }
}
