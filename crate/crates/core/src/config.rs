//! Configuration blocks and the flat `key = value` config file format.
//!
//! Every key is a dotted path mirroring the struct layout (`coarse.tau = 0.7`).
//! Lines starting with `#` are comments. Lists are comma-separated. Unknown
//! keys are rejected with the offending name. The full key list is documented
//! in the README.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pyramid levels the detector operates on.
pub const LEVELS: [usize; 5] = [3, 4, 5, 6, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel count shared by all pyramid levels.
    pub channels: usize,
    /// Proposal embedding and mask-pixel feature dimension.
    pub embed_dim: usize,
    /// Mask head output resolution S (S x S grid).
    pub mask_grid: usize,
    /// Channels inside the attention branch conv blocks.
    pub attn_channels: usize,
    /// Upper bounds on max(l,t,r,b) for levels 3..6; level 7 takes the rest.
    pub level_cuts: Vec<f64>,
    /// Minimum detection score kept at evaluation time.
    pub score_threshold: f64,
    /// Greedy duplicate-removal IoU at evaluation time.
    pub nms_iou: f64,
    /// Detections kept per image at evaluation time.
    pub max_dets: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            embed_dim: 16,
            mask_grid: 28,
            attn_channels: 8,
            level_cuts: vec![24.0, 48.0, 96.0, 192.0],
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaConfig {
    pub enabled: bool,
    /// Fixed high-pass kernel set; only `standard3` is defined.
    pub kernel_set: String,
    /// Pyramid levels the attention map gates.
    pub apply_levels: Vec<usize>,
}

impl Default for FeaConfig {
    fn default() -> Self {
        FeaConfig {
            enabled: true,
            kernel_set: "standard3".to_string(),
            apply_levels: LEVELS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub sat_sharp_min: f64,
    pub sat_sharp_max: f64,
    pub bright_contrast_min: f64,
    pub bright_contrast_max: f64,
    /// The image is split into `block_grid x block_grid` chunks.
    pub block_grid: usize,
    pub block_frac_min: f64,
    pub block_frac_max: f64,
    pub gaussian_vars: Vec<f64>,
    pub salt_pepper_fracs: Vec<f64>,
    pub downscale_factor: f64,
    /// Query-view crop keeps at least this fraction of the area.
    pub crop_min_area: f64,
    pub flip_prob: f64,
    pub rotation_max_deg: f64,
    /// Each key-view op fires independently with this probability.
    pub op_prob: f64,
    pub enable_color_jitter: bool,
    pub enable_grayscale: bool,
    pub enable_block: bool,
    pub enable_downup: bool,
    pub enable_gaussian: bool,
    pub enable_salt_pepper: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sat_sharp_min: 0.0,
            sat_sharp_max: 3.1,
            bright_contrast_min: 1.0,
            bright_contrast_max: 2.1,
            block_grid: 10,
            block_frac_min: 0.02,
            block_frac_max: 0.06,
            gaussian_vars: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            salt_pepper_fracs: vec![0.05, 0.1, 0.15],
            downscale_factor: 0.25,
            crop_min_area: 0.8,
            flip_prob: 0.5,
            rotation_max_deg: 15.0,
            op_prob: 0.5,
            enable_color_jitter: true,
            enable_grayscale: true,
            enable_block: true,
            enable_downup: true,
            enable_gaussian: true,
            enable_salt_pepper: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseConfig {
    pub tau: f64,
    /// Momentum-encoder EMA rate.
    pub beta: f64,
    /// Prototype EMA rate.
    pub alpha: f64,
    pub iou_threshold: f64,
    pub top_k: usize,
    pub queue_capacity: usize,
    pub min_queue_fill: usize,
    /// Weights for levels 3..7.
    pub layer_weights: Vec<f64>,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            tau: 0.7,
            beta: 0.999,
            alpha: 0.9,
            iou_threshold: 0.6,
            top_k: 5,
            queue_capacity: 4096,
            min_queue_fill: 64,
            layer_weights: vec![0.1, 0.2, 0.4, 0.7, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineConfig {
    pub tau: f64,
    /// Pixels within this Chebyshev distance of the mask contour are
    /// discarded before region contrast.
    pub erosion_radius: usize,
    pub binarize_threshold: f64,
    /// Cap on real x fake pairs per batch for the inter-face loss.
    pub pair_cap: usize,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            tau: 0.7,
            erosion_radius: 2,
            binarize_threshold: 0.5,
            pair_cap: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Epoch fractions at which the learning rate drops by 10x.
    pub lr_drops: Vec<f64>,
    pub seed: u64,
    /// Component toggles for the ablation grid.
    pub augment: bool,
    pub fea: bool,
    pub coarse: bool,
    pub fine: bool,
    /// During the first N epochs the ground-truth mask substitutes when a
    /// predicted face region is empty, keeping the fine losses active.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.5,
            lambda2: 0.1,
            lambda3: 0.1,
            lr: 0.01,
            epochs: 12,
            batch_size: 8,
            momentum: 0.9,
            lr_drops: vec![2.0 / 3.0, 5.0 / 6.0],
            seed: 0,
            augment: true,
            fea: true,
            coarse: true,
            fine: true,
            warmup_epochs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGenConfig {
    pub image_size: usize,
    pub faces_min: usize,
    pub faces_max: usize,
    pub fake_fraction: f64,
    pub face_min: usize,
    pub face_max: usize,
    /// Width of the alpha-blended boundary band on fake faces, pixels.
    pub blend_band: f64,
    /// Strength of the interior color shift on fake faces.
    pub texture_shift: f64,
    pub seed: u64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        ToyGenConfig {
            image_size: 256,
            faces_min: 1,
            faces_max: 6,
            fake_fraction: 0.5,
            face_min: 40,
            face_max: 96,
            blend_band: 3.0,
            texture_shift: 0.18,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub fea: FeaConfig,
    pub augment: AugmentConfig,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub train: TrainConfig,
    pub data: ToyGenConfig,
}

impl Config {
    pub fn from_file(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Config::default();
        cfg.apply_text(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.coarse;
        if c.tau <= 0.0 || self.fine.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&c.alpha) && c.alpha != 1.0 {
            return Err(Error::Config("coarse.alpha must be in (0,1]".into()));
        }
        if c.layer_weights.len() != LEVELS.len() {
            return Err(Error::Config("coarse.layer_weights needs 5 entries".into()));
        }
        if c.layer_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("layer weights must be non-negative".into()));
        }
        if self.train.lambda1 < 0.0 || self.train.lambda2 < 0.0 || self.train.lambda3 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.model.level_cuts.len() != 4 {
            return Err(Error::Config("model.level_cuts needs 4 entries".into()));
        }
        if self.data.faces_min < 1 || self.data.faces_min > self.data.faces_max {
            return Err(Error::Config("invalid faces_per_image range".into()));
        }
        Ok(())
    }

    /// Hash of the architecture-determining fields; checkpoints refuse to
    /// load under a different hash.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct ArchView<'a> {
            model: &'a ModelConfig,
            kernel_set: &'a str,
        }
        let view = ArchView {
            model: &self.model,
            kernel_set: &self.fea.kernel_set,
        };
        let json = serde_json::to_string(&view).expect("config serialization");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize()[..8])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! kv {
            ($field:expr) => {
                $field = parse_value(key, value)?
            };
        }
        match key {
            "model.channels" => kv!(self.model.channels),
            "model.embed_dim" => kv!(self.model.embed_dim),
            "model.mask_grid" => kv!(self.model.mask_grid),
            "model.attn_channels" => kv!(self.model.attn_channels),
            "model.level_cuts" => kv!(self.model.level_cuts),
            "model.score_threshold" => kv!(self.model.score_threshold),
            "model.nms_iou" => kv!(self.model.nms_iou),
            "model.max_dets" => kv!(self.model.max_dets),
            "fea.enabled" => kv!(self.fea.enabled),
            "fea.kernel_set" => self.fea.kernel_set = value.to_string(),
            "fea.apply_levels" => kv!(self.fea.apply_levels),
            "augment.sat_sharp_min" => kv!(self.augment.sat_sharp_min),
            "augment.sat_sharp_max" => kv!(self.augment.sat_sharp_max),
            "augment.bright_contrast_min" => kv!(self.augment.bright_contrast_min),
            "augment.bright_contrast_max" => kv!(self.augment.bright_contrast_max),
            "augment.block_grid" => kv!(self.augment.block_grid),
            "augment.block_frac_min" => kv!(self.augment.block_frac_min),
            "augment.block_frac_max" => kv!(self.augment.block_frac_max),
            "augment.gaussian_vars" => kv!(self.augment.gaussian_vars),
            "augment.salt_pepper_fracs" => kv!(self.augment.salt_pepper_fracs),
            "augment.downscale_factor" => kv!(self.augment.downscale_factor),
            "augment.crop_min_area" => kv!(self.augment.crop_min_area),
            "augment.flip_prob" => kv!(self.augment.flip_prob),
            "augment.rotation_max_deg" => kv!(self.augment.rotation_max_deg),
            "augment.op_prob" => kv!(self.augment.op_prob),
            "augment.enable_color_jitter" => kv!(self.augment.enable_color_jitter),
            "augment.enable_grayscale" => kv!(self.augment.enable_grayscale),
            "augment.enable_block" => kv!(self.augment.enable_block),
            "augment.enable_downup" => kv!(self.augment.enable_downup),
            "augment.enable_gaussian" => kv!(self.augment.enable_gaussian),
            "augment.enable_salt_pepper" => kv!(self.augment.enable_salt_pepper),
            "augment.seed" => kv!(self.augment.seed),
            "coarse.tau" => kv!(self.coarse.tau),
            "coarse.beta" => kv!(self.coarse.beta),
            "coarse.alpha" => kv!(self.coarse.alpha),
            "coarse.iou_threshold" => kv!(self.coarse.iou_threshold),
            "coarse.top_k" => kv!(self.coarse.top_k),
            "coarse.queue_capacity" => kv!(self.coarse.queue_capacity),
            "coarse.min_queue_fill" => kv!(self.coarse.min_queue_fill),
            "coarse.layer_weights" => kv!(self.coarse.layer_weights),
            "fine.tau" => kv!(self.fine.tau),
            "fine.erosion_radius" => kv!(self.fine.erosion_radius),
            "fine.binarize_threshold" => kv!(self.fine.binarize_threshold),
            "fine.pair_cap" => kv!(self.fine.pair_cap),
            "train.lambda1" => kv!(self.train.lambda1),
            "train.lambda2" => kv!(self.train.lambda2),
            "train.lambda3" => kv!(self.train.lambda3),
            "train.lr" => kv!(self.train.lr),
            "train.epochs" => kv!(self.train.epochs),
            "train.batch_size" => kv!(self.train.batch_size),
            "train.momentum" => kv!(self.train.momentum),
            "train.lr_drops" => kv!(self.train.lr_drops),
            "train.seed" => kv!(self.train.seed),
            "train.augment" => kv!(self.train.augment),
            "train.fea" => kv!(self.train.fea),
            "train.coarse" => kv!(self.train.coarse),
            "train.fine" => kv!(self.train.fine),
            "train.warmup_epochs" => kv!(self.train.warmup_epochs),
            "data.image_size" => kv!(self.data.image_size),
            "data.faces_min" => kv!(self.data.faces_min),
            "data.faces_max" => kv!(self.data.faces_max),
            "data.fake_fraction" => kv!(self.data.fake_fraction),
            "data.face_min" => kv!(self.data.face_min),
            "data.face_max" => kv!(self.data.face_max),
            "data.blend_band" => kv!(self.data.blend_band),
            "data.texture_shift" => kv!(self.data.texture_shift),
            "data.seed" => kv!(self.data.seed),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

trait FromConfigValue: Sized {
    fn parse_cv(s: &str) -> Option<Self>;
}

impl FromConfigValue for f64 {
    fn parse_cv(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}
impl FromConfigValue for usize {
    fn parse_cv(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}
impl FromConfigValue for u64 {
    fn parse_cv(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}
impl FromConfigValue for bool {
    fn parse_cv(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        }
    }
}
impl<T: FromConfigValue> FromConfigValue for Vec<T> {
    fn parse_cv(s: &str) -> Option<Self> {
        s.split(',').map(|p| T::parse_cv(p.trim())).collect()
    }
}

fn parse_value<T: FromConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_cv(value).ok_or_else(|| Error::Config(format!("bad value `{value}` for `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_paper_settings() {
        let cfg = Config::default();
        assert_eq!(cfg.coarse.tau, 0.7);
        assert_eq!(cfg.coarse.beta, 0.999);
        assert_eq!(cfg.coarse.alpha, 0.9);
        assert_eq!(cfg.coarse.iou_threshold, 0.6);
        assert_eq!(cfg.coarse.top_k, 5);
        assert_eq!(cfg.coarse.layer_weights, vec![0.1, 0.2, 0.4, 0.7, 1.0]);
        assert_eq!(
            (cfg.train.lambda1, cfg.train.lambda2, cfg.train.lambda3),
            (0.5, 0.1, 0.1)
        );
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.fine.erosion_radius, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn parse_roundtrip_and_unknown_key() {
        let mut cfg = Config::default();
        cfg.apply_text(
            "# comment\n\
             coarse.tau = 0.5\n\
             coarse.layer_weights = 1,1,1,1,1\n\
             train.fea = false\n\
             fea.apply_levels = 3,4\n",
        )
        .unwrap();
        assert_eq!(cfg.coarse.tau, 0.5);
        assert_eq!(cfg.coarse.layer_weights, vec![1.0; 5]);
        assert!(!cfg.train.fea);
        assert_eq!(cfg.fea.apply_levels, vec![3, 4]);

        let err = cfg.apply_text("nope.key = 1").unwrap_err();
        assert!(err.to_string().contains("nope.key"));
    }

    #[test]
    fn hash_tracks_architecture_only(){
        let a = Config::default();
        let mut b = Config::default();
        b.train.lr = 0.5;
        assert_eq!(a.config_hash(), b.config_hash());
        b.model.channels = 32;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
