//! Run configuration: one structured, versioned document holding every
//! module's settings. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::DomainStyle;
use crate::error::{Error, Result};
use crate::geometry::JitterParams;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input side length in pixels (square images).
    pub image_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enhancer_layers: usize,
    pub decoder_layers: usize,
    pub n_queries: usize,
    /// Width of the frozen class-name embeddings.
    pub d_text: usize,
    /// Temperature of the text projection.
    pub tau_t: f64,
    pub alpha_txt: f64,
    pub alpha_vis: f64,
    pub tau_txt: f64,
    pub tau_vis: f64,
    pub roi_output: usize,
    pub roi_samples: usize,
    /// Pyramid level used for support RoIs.
    pub proto_level: usize,
    /// Pyramid level used for hard-negative RoIs.
    pub neg_level: usize,
    /// One content embedding for all queries (otherwise one per query slot).
    pub shared_content: bool,
    pub per_layer_heads: bool,
    pub freeze_prototypes: bool,
    pub text_salt: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            enhancer_layers: 6,
            decoder_layers: 3,
            n_queries: 50,
            d_text: 32,
            tau_t: 0.1,
            alpha_txt: 1.0,
            alpha_vis: 1.0,
            tau_txt: 0.1,
            tau_vis: 0.1,
            roi_output: 7,
            roi_samples: 2,
            proto_level: 0,
            neg_level: 0,
            shared_content: true,
            per_layer_heads: false,
            freeze_prototypes: false,
            text_salt: "lmp-text-v1".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalNorm {
    MatchedGt,
    Queries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub cost_cls: f64,
    pub cost_l1: f64,
    pub cost_giou: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the visual-branch loss in the total.
    pub branch_alpha: f64,
    pub focal_norm: FocalNorm,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            cost_cls: 1.0,
            cost_l1: 5.0,
            cost_giou: 2.0,
            loss_cls: 2.0,
            loss_l1: 5.0,
            loss_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            branch_alpha: 1.0,
            focal_norm: FocalNorm::MatchedGt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub lr: f64,
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_stage1: 100,
            steps_stage2: 100,
            lr: 1e-4,
            backbone_lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Union of both branches followed by class-wise NMS.
    Union,
    /// As `Union`, but cross-branch near-duplicates average their scores.
    ScoreAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub top_k: usize,
    pub nms_iou: f64,
    pub ensemble: EnsembleMode,
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 100,
            nms_iou: 0.5,
            ensemble: EnsembleMode::Union,
            iou_thresholds: coco_iou_thresholds(),
        }
    }
}

/// 0.50:0.05:0.95
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub style: DomainStyle,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { n_way: 3, k_shot: 5, n_query: 3, style: DomainStyle::PhotoLike }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub jitter: JitterParams,
    pub matching: MatchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub episode: EpisodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            jitter: JitterParams::default(),
            matching: MatchConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a `section.key=value` override, parsed as TOML.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::BadConfig(format!("override {assignment:?} is not key=value")))?;
        let mut doc: toml::Value =
            toml::Value::try_from(&*self).map_err(|e| Error::BadConfig(e.to_string()))?;
        let parsed: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .map(|mut t| t.remove("v").expect("key present"))
            .or_else(|_| Ok::<_, Error>(toml::Value::String(raw.to_string())))?;
        let mut slot = &mut doc;
        for key in path.trim().split('.') {
            slot = slot
                .get_mut(key)
                .ok_or_else(|| Error::BadConfig(format!("unknown config key {path:?}")))?;
        }
        *slot = parsed;
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::BadConfig(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || !m.d_model.is_multiple_of(m.n_heads) {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", m.d_model, m.n_heads));
        }
        if !m.d_model.is_multiple_of(8) {
            return bad(format!("d_model {} must be a multiple of 8 for the box embedding", m.d_model));
        }
        if m.n_queries == 0 || m.decoder_layers == 0 || m.roi_output == 0 || m.roi_samples == 0 {
            return bad("n_queries, decoder_layers, roi_output, roi_samples must be positive".into());
        }
        if m.proto_level > 3 || m.neg_level > 3 {
            return bad("pyramid levels are 0..=3".into());
        }
        if m.image_size < 8 {
            return bad("image_size must be at least 8".into());
        }
        if !(m.tau_t > 0.0 && m.tau_txt > 0.0 && m.tau_vis > 0.0) {
            return bad("temperatures must be positive".into());
        }
        let c = &self.matching;
        let weights = [c.cost_cls, c.cost_l1, c.cost_giou, c.loss_cls, c.loss_l1, c.loss_giou, c.branch_alpha];
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return bad("matching and loss weights must be non-negative".into());
        }
        self.jitter.validate()?;
        if self.episode.n_way == 0 || self.episode.k_shot == 0 {
            return bad("episodes need n_way >= 1 and k_shot >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.eval.nms_iou) {
            return bad("nms_iou must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
