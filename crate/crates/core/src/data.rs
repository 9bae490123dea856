//! Synthetic multi-face toy dataset plus COCO-style annotation IO.
//!
//! Images are PNG; annotations live in a single COCO JSON manifest with the
//! two fixed categories {0: real, 1: fake}. Run-length masks (column-major,
//! uncompressed counts) are the canonical encoding; polygons are accepted on
//! input and rasterized. A real dataset in the same layout plugs in without
//! code changes.
//!
//! Each toy face is a textured ellipse; fake faces get their interior
//! replaced by a color-shifted, high-frequency-suppressed copy alpha-blended
//! over a boundary band — a pixel-level interior discrepancy plus a subtle
//! boundary, the two signals the contrastive losses target.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ToyGenConfig;
use crate::detector::{iou, BoxF, FaceLabel, GtFace};
use crate::error::{Error, Result};
use crate::metrics::Detection;

// ---------------------------------------------------------------------------
// Run-length encoding (column-major, leading zero-run count)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

pub fn rle_encode(mask: &Array2<u8>) -> Rle {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = if mask[[y, x]] != 0 { 1 } else { 0 };
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<Array2<u8>> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::invalid_input(format!(
            "rle counts sum to {total}, expected {}",
            h * w
        )));
    }
    let mut mask = Array2::zeros((h, w));
    let mut idx = 0usize;
    let mut value = 0u8;
    for &c in &rle.counts {
        for _ in 0..c {
            let (x, y) = (idx / h, idx % h);
            mask[[y, x]] = value;
            idx += 1;
        }
        value = 1 - value;
    }
    Ok(mask)
}

pub fn rle_area(rle: &Rle) -> u64 {
    rle.counts
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 2 == 1)
        .map(|(_, &c)| c as u64)
        .sum()
}

/// Even-odd scanline rasterization of a COCO polygon list.
pub fn rasterize_polygons(polys: &[Vec<f64>], h: usize, w: usize) -> Array2<u8> {
    let mut mask = Array2::zeros((h, w));
    for poly in polys {
        let n = poly.len() / 2;
        if n < 3 {
            continue;
        }
        for y in 0..h {
            let py = y as f64 + 0.5;
            let mut crossings: Vec<f64> = Vec::new();
            for i in 0..n {
                let (x1, y1) = (poly[2 * i], poly[2 * i + 1]);
                let j = (i + 1) % n;
                let (x2, y2) = (poly[2 * j], poly[2 * j + 1]);
                if (y1 <= py && y2 > py) || (y2 <= py && y1 > py) {
                    crossings.push(x1 + (py - y1) / (y2 - y1) * (x2 - x1));
                }
            }
            crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in crossings.chunks(2) {
                if pair.len() < 2 {
                    continue;
                }
                let x_lo = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let x_hi = ((pair[1] - 0.5).floor() as i64).min(w as i64 - 1);
                for x in x_lo as i64..=x_hi {
                    if x >= 0 {
                        mask[[y, x as usize]] = 1;
                    }
                }
            }
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// COCO manifest structures
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Rle(Rle),
    Polygons(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub segmentation: Segmentation,
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoManifest {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

pub fn default_categories() -> Vec<CocoCategory> {
    vec![
        CocoCategory {
            id: 0,
            name: "real".to_string(),
        },
        CocoCategory {
            id: 1,
            name: "fake".to_string(),
        },
    ]
}

// ---------------------------------------------------------------------------
// Dataset handle
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub faces: Vec<GtFace>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_image(&self, idx: usize) -> Result<Array3<f64>> {
        let rec = &self.records[idx];
        read_png(&self.root.join(&rec.file_name))
    }
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Parse {
            file: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Internal(e.to_string()))
}

/// Parse and validate a COCO manifest; masks decode to full-image rasters.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let manifest: CocoManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let file = path.display().to_string();
    let parse_err = |message: String| Error::Parse {
        file: file.clone(),
        message,
    };

    for cat in &manifest.categories {
        if FaceLabel::from_category_id(cat.id).is_none() {
            return Err(parse_err(format!(
                "unknown category id {} (only 0=real, 1=fake are defined)",
                cat.id
            )));
        }
    }

    let mut records: Vec<ImageRecord> = manifest
        .images
        .iter()
        .map(|im| ImageRecord {
            id: im.id,
            file_name: im.file_name.clone(),
            width: im.width,
            height: im.height,
            faces: Vec::new(),
        })
        .collect();
    let index_of: std::collections::HashMap<u64, usize> = manifest
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id, i))
        .collect();

    for (ai, ann) in manifest.annotations.iter().enumerate() {
        let label = FaceLabel::from_category_id(ann.category_id).ok_or_else(|| {
            parse_err(format!(
                "annotation {ai}: unknown category id {}",
                ann.category_id
            ))
        })?;
        let &img_idx = index_of.get(&ann.image_id).ok_or_else(|| {
            parse_err(format!("annotation {ai}: unknown image id {}", ann.image_id))
        })?;
        let (h, w) = (records[img_idx].height, records[img_idx].width);
        let mask = match &ann.segmentation {
            Segmentation::Rle(rle) => {
                if rle.size != [h, w] {
                    return Err(parse_err(format!(
                        "annotation {ai}: rle size {:?} does not match image {}x{}",
                        rle.size, h, w
                    )));
                }
                rle_decode(rle).map_err(|e| parse_err(format!("annotation {ai}: {e}")))?
            }
            Segmentation::Polygons(polys) => rasterize_polygons(polys, h, w),
        };
        if mask.iter().all(|&v| v == 0) {
            return Err(parse_err(format!("annotation {ai}: empty mask")));
        }
        let bbox = BoxF::new(
            ann.bbox[0],
            ann.bbox[1],
            ann.bbox[0] + ann.bbox[2],
            ann.bbox[1] + ann.bbox[3],
        );
        if !bbox.is_valid() {
            return Err(parse_err(format!("annotation {ai}: degenerate bbox")));
        }
        // mask must stay within the box dilated by 2 px
        let (mut my1, mut mx1, mut my2, mut mx2) = (h, w, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] != 0 {
                    my1 = my1.min(y);
                    mx1 = mx1.min(x);
                    my2 = my2.max(y);
                    mx2 = mx2.max(x);
                }
            }
        }
        if (mx1 as f64) < bbox.x1 - 2.0
            || (my1 as f64) < bbox.y1 - 2.0
            || (mx2 as f64 + 1.0) > bbox.x2 + 2.0
            || (my2 as f64 + 1.0) > bbox.y2 + 2.0
        {
            return Err(parse_err(format!(
                "annotation {ai}: mask extends beyond its box by more than 2 px"
            )));
        }
        records[img_idx].faces.push(GtFace { bbox, label, mask });
    }

    Ok(Dataset {
        root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        records,
    })
}

/// Serialize a dataset back to a COCO manifest (masks as RLE).
pub fn save_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for rec in &dataset.records {
        images.push(CocoImage {
            id: rec.id,
            file_name: rec.file_name.clone(),
            width: rec.width,
            height: rec.height,
        });
        for face in &rec.faces {
            let rle = rle_encode(&face.mask);
            let area = rle_area(&rle) as f64;
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: rec.id,
                category_id: face.label.category_id(),
                bbox: [
                    face.bbox.x1,
                    face.bbox.y1,
                    face.bbox.x2 - face.bbox.x1,
                    face.bbox.y2 - face.bbox.y1,
                ],
                segmentation: Segmentation::Rle(rle),
                area,
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    let manifest = CocoManifest {
        images,
        annotations,
        categories: default_categories(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// COCO results (predictions) interchange
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u32,
    pub score: f64,
    pub bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Rle>,
}

pub fn load_predictions(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let results: Vec<CocoResult> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let class = FaceLabel::from_category_id(r.category_id).ok_or_else(|| Error::Parse {
                file: path.display().to_string(),
                message: format!("result {i}: unknown category id {}", r.category_id),
            })?;
            let mask = r.segmentation.as_ref().map(rle_decode).transpose()?;
            Ok(Detection {
                image_id: r.image_id,
                class,
                confidence: r.score,
                bbox: BoxF::new(r.bbox[0], r.bbox[1], r.bbox[0] + r.bbox[2], r.bbox[1] + r.bbox[3]),
                mask,
            })
        })
        .collect()
}

pub fn save_predictions(dets: &[Detection], path: &Path) -> Result<()> {
    let results: Vec<CocoResult> = dets
        .iter()
        .map(|d| CocoResult {
            image_id: d.image_id,
            category_id: d.class.category_id(),
            score: d.confidence,
            bbox: [
                d.bbox.x1,
                d.bbox.y1,
                d.bbox.x2 - d.bbox.x1,
                d.bbox.y2 - d.bbox.y1,
            ],
            segmentation: d.mask.as_ref().map(rle_encode),
        })
        .collect();
    std::fs::write(path, serde_json::to_string(&results)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Toy generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ToyImage {
    pub image: Array3<f64>,
    pub faces: Vec<GtFace>,
}

/// Deterministic toy image: textured background, 1..6 non-overlapping
/// textured ellipse "faces", each fake with probability `fake_fraction`.
pub fn generate_toy_image(cfg: &ToyGenConfig, index: u64) -> ToyImage {
    for attempt in 0..64 {
        let seed = crate::rng::sub_seed(cfg.seed, "toy-image", index * 64 + attempt);
        let mut rng = crate::rng::stream(seed, "toy-draw", 0);
        if let Some(img) = try_generate(cfg, &mut rng) {
            return img;
        }
    }
    unreachable!("face placement cannot fail indefinitely on a sane config");
}

fn try_generate(cfg: &ToyGenConfig, rng: &mut ChaCha8Rng) -> Option<ToyImage> {
    let s = cfg.image_size;
    let mut image = background(s, rng);
    let n_faces = rng.random_range(cfg.faces_min..=cfg.faces_max);
    let mut faces: Vec<GtFace> = Vec::new();
    for _ in 0..n_faces {
        let mut placed = false;
        for _try in 0..50 {
            let fw = rng.random_range(cfg.face_min..=cfg.face_max.min(s - 4));
            let aspect = rng.random_range(0.85..1.18);
            let fh = ((fw as f64 * aspect) as usize).clamp(cfg.face_min, s - 4);
            if fw + 4 >= s || fh + 4 >= s {
                continue;
            }
            let x0 = rng.random_range(2..s - fw - 2);
            let y0 = rng.random_range(2..s - fh - 2);
            let bbox = BoxF::new(x0 as f64, y0 as f64, (x0 + fw) as f64, (y0 + fh) as f64);
            if faces.iter().any(|f| iou(&f.bbox, &bbox) > 0.1) {
                continue;
            }
            let fake = rng.random_bool(cfg.fake_fraction.clamp(0.0, 1.0));
            let label = if fake { FaceLabel::Fake } else { FaceLabel::Real };
            let mask = draw_face(&mut image, bbox, label, cfg, rng);
            faces.push(GtFace { bbox, label, mask });
            placed = true;
            break;
        }
        if !placed {
            return None; // regenerate the whole image under a new sub-seed
        }
    }
    Some(ToyImage { image, faces })
}

fn background(s: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    // coarse 8x8 color noise upsampled bilinearly, plus fine grain
    let base: [f64; 3] = [
        rng.random_range(0.2..0.7),
        rng.random_range(0.2..0.7),
        rng.random_range(0.2..0.7),
    ];
    let coarse = Array3::from_shape_fn((3, 8, 8), |(c, _, _)| {
        (base[c] + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0)
    });
    let mut out = Array3::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let fy = (y as f64 + 0.5) * 8.0 / s as f64 - 0.5;
            let fx = (x as f64 + 0.5) * 8.0 / s as f64 - 0.5;
            let (fy, fx) = (fy.clamp(0.0, 7.0), fx.clamp(0.0, 7.0));
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(7), (x0 + 1).min(7));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            for c in 0..3 {
                out[[c, y, x]] = coarse[[c, y0, x0]] * (1.0 - wy) * (1.0 - wx)
                    + coarse[[c, y0, x1]] * (1.0 - wy) * wx
                    + coarse[[c, y1, x0]] * wy * (1.0 - wx)
                    + coarse[[c, y1, x1]] * wy * wx;
            }
        }
    }
    for v in out.iter_mut() {
        *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    out
}

/// Draw one elliptical face into the image; returns its binary mask.
fn draw_face(
    image: &mut Array3<f64>,
    bbox: BoxF,
    label: FaceLabel,
    cfg: &ToyGenConfig,
    rng: &mut ChaCha8Rng,
) -> Array2<u8> {
    let (_, s, _) = image.dim();
    let (cx, cy) = bbox.center();
    let a = (bbox.x2 - bbox.x1) / 2.0;
    let b = (bbox.y2 - bbox.y1) / 2.0;
    // skin-ish base with per-face variation
    let base = [
        rng.random_range(0.60..0.85),
        rng.random_range(0.45..0.65),
        rng.random_range(0.35..0.55),
    ];
    let tex_freq = rng.random_range(0.5..1.4);
    let tex_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let x_lo = bbox.x1.floor().max(0.0) as usize;
    let x_hi = (bbox.x2.ceil() as usize).min(s);
    let y_lo = bbox.y1.floor().max(0.0) as usize;
    let y_hi = (bbox.y2.ceil() as usize).min(s);

    let mut mask = Array2::zeros((s, s));
    // real-face texture: base + sinusoid grain + rim darkening + noise
    let texture = |y: usize, x: usize, rng: &mut ChaCha8Rng| -> [f64; 3] {
        let rho = (((x as f64 + 0.5 - cx) / a).powi(2) + ((y as f64 + 0.5 - cy) / b).powi(2)).sqrt();
        let grain = 0.06
            * ((x as f64 * tex_freq + tex_phase).sin() * (y as f64 * tex_freq * 0.8).cos());
        let rim = if rho > 0.8 { -0.12 * (rho - 0.8) / 0.2 } else { 0.0 };
        let n = rng.random_range(-0.02..0.02);
        [
            (base[0] + grain + rim + n).clamp(0.0, 1.0),
            (base[1] + grain + rim + n).clamp(0.0, 1.0),
            (base[2] + grain * 0.6 + rim + n).clamp(0.0, 1.0),
        ]
    };

    // first pass: paint the true face, record mask
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let rho =
                (((x as f64 + 0.5 - cx) / a).powi(2) + ((y as f64 + 0.5 - cy) / b).powi(2)).sqrt();
            if rho > 1.0 {
                continue;
            }
            mask[[y, x]] = 1;
            let t = texture(y, x, rng);
            for c in 0..3 {
                image[[c, y, x]] = t[c];
            }
        }
    }
    // eyes and mouth so real faces carry stable structure
    let eye_y = (cy - b * 0.25) as usize;
    for ex in [cx - a * 0.35, cx + a * 0.35] {
        let ex = ex as usize;
        for dy in 0..2usize {
            for dx in 0..2usize {
                let (yy, xx) = (eye_y + dy, ex + dx);
                if yy < s && xx < s && mask[[yy, xx]] == 1 {
                    for c in 0..3 {
                        image[[c, yy, xx]] *= 0.35;
                    }
                }
            }
        }
    }
    let mouth_y = (cy + b * 0.4) as usize;
    for xx in (cx - a * 0.3) as usize..=(cx + a * 0.3) as usize {
        if mouth_y < s && xx < s && mask[[mouth_y, xx]] == 1 {
            for c in 0..3 {
                image[[c, mouth_y, xx]] *= 0.55;
            }
        }
    }

    if label == FaceLabel::Fake {
        forge_interior(image, &mask, bbox, cfg, rng);
    }
    mask
}

/// Replace the face interior with a color-shifted, smoothed copy, alpha
/// blended over `blend_band` pixels at the boundary. A self-check enforces a
/// visible luminance gap across the boundary band.
fn forge_interior(
    image: &mut Array3<f64>,
    mask: &Array2<u8>,
    bbox: BoxF,
    cfg: &ToyGenConfig,
    rng: &mut ChaCha8Rng,
) {
    let (cx, cy) = bbox.center();
    let a = (bbox.x2 - bbox.x1) / 2.0;
    let b = (bbox.y2 - bbox.y1) / 2.0;
    let (s_h, s_w) = mask.dim();
    let original = image.clone();

    for attempt in 0..5 {
        let magnitude = cfg.texture_shift * (1.0 + attempt as f64 * 0.5);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let shift = [
            sign * magnitude * rng.random_range(0.8..1.2),
            sign * magnitude * rng.random_range(0.8..1.2),
            sign * magnitude * rng.random_range(0.6..1.0),
        ];
        // smooth the interior twice to suppress high-frequency content
        let mut forged = original.clone();
        for _ in 0..2 {
            let src = forged.clone();
            for y in 1..s_h - 1 {
                for x in 1..s_w - 1 {
                    if mask[[y, x]] == 0 {
                        continue;
                    }
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += src[[c, y + dy - 1, x + dx - 1]];
                            }
                        }
                        forged[[c, y, x]] = acc / 9.0;
                    }
                }
            }
        }
        for y in 0..s_h {
            for x in 0..s_w {
                if mask[[y, x]] == 0 {
                    continue;
                }
                let rho = (((x as f64 + 0.5 - cx) / a).powi(2)
                    + ((y as f64 + 0.5 - cy) / b).powi(2))
                .sqrt();
                // approximate distance to the ellipse boundary, in pixels
                let depth = ((1.0 - rho) * a.min(b)).max(0.0);
                let alpha = (depth / cfg.blend_band).clamp(0.0, 1.0);
                for c in 0..3 {
                    let f = (forged[[c, y, x]] + shift[c]).clamp(0.0, 1.0);
                    image[[c, y, x]] =
                        original[[c, y, x]] * (1.0 - alpha) + f * alpha;
                }
            }
        }
        if boundary_band_gap(image, mask, bbox, cfg.blend_band) > 0.05 {
            return;
        }
        // visible gap not reached (e.g. shift clipped away): restore and retry
        for y in 0..s_h {
            for x in 0..s_w {
                if mask[[y, x]] == 1 {
                    for c in 0..3 {
                        image[[c, y, x]] = original[[c, y, x]];
                    }
                }
            }
        }
    }
    // last resort: hard shift without clipping headroom issues
    for y in 0..s_h {
        for x in 0..s_w {
            if mask[[y, x]] == 1 {
                for c in 0..3 {
                    let v = original[[c, y, x]];
                    image[[c, y, x]] = if v > 0.5 { v - 0.25 } else { v + 0.25 };
                }
            }
        }
    }
}

/// Mean absolute luminance gap between the inner ring (just past the blend
/// band) and the outer ring (just outside the mask).
pub fn boundary_band_gap(
    image: &Array3<f64>,
    mask: &Array2<u8>,
    bbox: BoxF,
    band: f64,
) -> f64 {
    let (cx, cy) = bbox.center();
    let a = (bbox.x2 - bbox.x1) / 2.0;
    let b = (bbox.y2 - bbox.y1) / 2.0;
    let (h, w) = mask.dim();
    let mut inner = (0.0, 0usize);
    let mut outer = (0.0, 0usize);
    let x_lo = (bbox.x1 - 3.0).floor().max(0.0) as usize;
    let x_hi = ((bbox.x2 + 3.0).ceil() as usize).min(w);
    let y_lo = (bbox.y1 - 3.0).floor().max(0.0) as usize;
    let y_hi = ((bbox.y2 + 3.0).ceil() as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let rho =
                (((x as f64 + 0.5 - cx) / a).powi(2) + ((y as f64 + 0.5 - cy) / b).powi(2)).sqrt();
            let depth = (1.0 - rho) * a.min(b);
            let l = 0.299 * image[[0, y, x]] + 0.587 * image[[1, y, x]] + 0.114 * image[[2, y, x]];
            if mask[[y, x]] == 1 && depth >= band && depth <= band + 2.0 {
                inner.0 += l;
                inner.1 += 1;
            } else if mask[[y, x]] == 0 && depth >= -2.0 && depth < 0.0 {
                outer.0 += l;
                outer.1 += 1;
            }
        }
    }
    if inner.1 == 0 || outer.1 == 0 {
        return 0.0;
    }
    (inner.0 / inner.1 as f64 - outer.0 / outer.1 as f64).abs()
}

/// Generate `n` toy images in memory.
pub fn generate_toy_images(cfg: &ToyGenConfig, n: usize) -> Vec<ToyImage> {
    (0..n).map(|i| generate_toy_image(cfg, i as u64)).collect()
}

/// Generate a dataset on disk: PNGs plus a COCO manifest, deterministic
/// under the config seed.
pub fn generate_toy_dataset(cfg: &ToyGenConfig, n: usize, dir: &Path) -> Result<Dataset> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(n);
    for (i, toy) in generate_toy_images(cfg, n).into_iter().enumerate() {
        let file_name = format!("img_{i:05}.png");
        write_png(&dir.join(&file_name), &toy.image)?;
        records.push(ImageRecord {
            id: i as u64 + 1,
            file_name,
            width: cfg.image_size,
            height: cfg.image_size,
            faces: toy.faces,
        });
    }
    let dataset = Dataset {
        root: dir.to_path_buf(),
        records,
    };
    save_manifest(&dataset, &dir.join("manifest.json"))?;
    Ok(dataset)
}
