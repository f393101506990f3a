//! Run configuration: a flat TOML document covering the image encoder, the
//! text stack, losses, rerank and sweep settings, the seed and file paths.
//!
//! Unknown keys are rejected and type errors name the offending key. Missing
//! keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gswin::{GswinConfig, NUM_STAGES};
use crate::losses::{DEFAULT_ALPHA, DEFAULT_MOMENTUM, DEFAULT_TAU, DESK_QUEUE_CAPACITY, PRODUCTION_QUEUE_CAPACITY};
use crate::smr::Positivity;
use crate::text::TextConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // image encoder
    pub image_size: usize,
    pub patch_size: usize,
    pub window: usize,
    pub base_channels: usize,
    pub stage_depths: [usize; NUM_STAGES],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads_per_stage: Option<[usize; NUM_STAGES]>,
    pub proj_dim: usize,
    pub mlp_ratio: f64,
    pub rel_pos_bias: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<usize>,
    pub share_gwg_weights: bool,
    pub mean_pool_feature: bool,

    // text and fusion stack
    pub text_width: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub max_text_len: usize,
    pub text_mlp_ratio: f64,
    pub mlm_prob: f64,

    // losses
    pub alpha: f64,
    pub tau: f64,
    pub queue_capacity: usize,
    pub momentum: f64,
    pub batch_size: usize,

    // rerank and sweep
    pub smr_k: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub positivity: Positivity,
    pub sweep_min: f64,
    pub sweep_max: f64,
    pub sweep_step: f64,

    pub seed: u64,

    // paths
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GswinConfig::default();
        let t = TextConfig::default();
        Self {
            image_size: 256,
            patch_size: g.patch_size,
            window: g.win,
            base_channels: g.base_channels,
            stage_depths: g.stage_depths,
            heads_per_stage: g.heads_per_stage,
            proj_dim: g.proj_dim,
            mlp_ratio: g.mlp_ratio,
            rel_pos_bias: g.rel_pos_bias,
            shift: g.shift,
            share_gwg_weights: g.share_gwg_weights,
            mean_pool_feature: g.mean_pool_feature,
            text_width: t.width,
            text_heads: t.heads,
            text_layers: t.total_layers,
            max_text_len: t.max_len,
            text_mlp_ratio: t.mlp_ratio,
            mlm_prob: 0.15,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            queue_capacity: PRODUCTION_QUEUE_CAPACITY,
            momentum: DEFAULT_MOMENTUM,
            batch_size: 8,
            smr_k: 10,
            gamma1: 0.9,
            gamma2: 1.9,
            positivity: Positivity::Auto,
            sweep_min: 0.5,
            sweep_max: 2.0,
            sweep_step: 0.1,
            seed: 0,
            vocab: None,
            image: None,
            matrix: None,
            ground_truth: None,
            out: None,
        }
    }
}

fn config_err<T>(msg: String) -> Result<T> {
    Err(Error::Config(msg))
}

impl RunConfig {
    /// Defaults with the small queue used for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            queue_capacity: DESK_QUEUE_CAPACITY,
            ..Self::default()
        }
    }

    pub fn gswin(&self) -> GswinConfig {
        GswinConfig {
            patch_size: self.patch_size,
            win: self.window,
            base_channels: self.base_channels,
            stage_depths: self.stage_depths,
            heads_per_stage: self.heads_per_stage,
            proj_dim: self.proj_dim,
            mlp_ratio: self.mlp_ratio,
            rel_pos_bias: self.rel_pos_bias,
            shift: self.shift,
            share_gwg_weights: self.share_gwg_weights,
            mean_pool_feature: self.mean_pool_feature,
        }
    }

    pub fn text(&self) -> TextConfig {
        TextConfig {
            width: self.text_width,
            heads: self.text_heads,
            total_layers: self.text_layers,
            max_len: self.max_text_len,
            proj_dim: self.proj_dim,
            mlp_ratio: self.text_mlp_ratio,
        }
    }

    /// γ values on one sweep axis, endpoints included.
    pub fn sweep_grid(&self) -> Vec<f64> {
        let n = ((self.sweep_max - self.sweep_min) / self.sweep_step + 1e-9).floor() as usize + 1;
        // Index-based values avoid accumulating step error.
        (0..n)
            .map(|i| {
                let v = self.sweep_min + i as f64 * self.sweep_step;
                (v * 1e9).round() / 1e9
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.gswin().validate(self.image_size)?;
        self.text().validate()?;
        if !(0.0..=1.0).contains(&self.mlm_prob) {
            return config_err(format!("mlm_prob = {} must lie in [0, 1]", self.mlm_prob));
        }
        if !(self.alpha >= 0.0) {
            return config_err(format!("alpha = {} must be ≥ 0", self.alpha));
        }
        if !(self.tau > 0.0) {
            return config_err(format!("tau = {} must be > 0", self.tau));
        }
        if self.queue_capacity == 0 {
            return config_err("queue_capacity must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size < 2 {
            return config_err(format!("batch_size = {} must be ≥ 2", self.batch_size));
        }
        if self.smr_k == 0 {
            return config_err("smr_k must be ≥ 1".into());
        }
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(g >= 0.0 && g.is_finite()) {
                return config_err(format!("{name} = {g} must be a finite value ≥ 0"));
            }
        }
        if !(self.sweep_min >= 0.0 && self.sweep_max >= self.sweep_min && self.sweep_step > 0.0) {
            return config_err(format!(
                "sweep range [{}, {}] step {} is not a valid grid",
                self.sweep_min, self.sweep_max, self.sweep_step
            ));
        }
        Ok(())
    }

    /// Parse and validate a TOML document.
    pub fn parse(src: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(src)
            .map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." {
                Error::Config(msg)
            } else {
                Error::Config(format!("key `{path}`: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_text(path)?)
    }

    /// The fully resolved configuration as TOML.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.momentum, 0.995);
        assert_eq!(cfg.queue_capacity, 65_536);
        assert_eq!(RunConfig::desk().queue_capacity, 512);
        assert_eq!((cfg.patch_size, cfg.window, cfg.stage_depths), (4, 8, [1, 1, 3, 1]));
        assert_eq!((cfg.text().text_layers(), cfg.text().fusion_layers()), (6, 6));
    }

    #[test]
    fn bad_window_is_a_config_error() {
        assert!(matches!(RunConfig::parse("window = 7"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let err = RunConfig::parse("windw = 8").unwrap_err().to_string();
        assert!(err.contains("windw"), "{err}");
        let err = RunConfig::parse("tau = \"hot\"").unwrap_err().to_string();
        assert!(err.contains("tau"), "{err}");
        assert!(matches!(RunConfig::parse("tau = "), Err(Error::Config(_))));
    }

    #[test]
    fn dump_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.gamma1 = 1.3;
        cfg.shift = Some(2);
        cfg.positivity = Positivity::Always;
        cfg.out = Some("results".into());
        assert_eq!(RunConfig::parse(&cfg.dump()).unwrap(), cfg);
        let plain = RunConfig::default();
        assert_eq!(RunConfig::parse(&plain.dump()).unwrap(), plain);
    }

    #[test]
    fn sweep_grid_has_sixteen_points() {
        let g = RunConfig::default().sweep_grid();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], 0.5);
        assert_eq!(g[15], 2.0);
        assert_eq!(g[4], 0.9);
    }
}
