//! Model and training hyperparameters, loadable from a TOML file.

use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. Defaults are the full-scale settings;
/// desk-scale runs shrink the channel counts via config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels of the finest backbone level.
    pub backbone_channels: usize,
    /// Triplane feature channels C.
    pub triplane_channels: usize,
    /// Depth bin count d.
    pub depth_bins: usize,
    /// Positional-encoding frequency bands L (output dim 6L).
    pub bands: usize,
    /// Correlation neighborhood radius r; grid is (2r+1)^2 per plane.
    pub corr_radius: usize,
    /// Transformer model width.
    pub width: usize,
    /// Attention heads.
    pub heads: usize,
    /// Transformer blocks, each with temporal and spatial attention.
    pub blocks: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// Iterative refinement steps M.
    pub iters: usize,
    /// Sliding window length T_s (even).
    pub window: usize,
    /// Rigidity embedding dimension.
    pub embed_dim: usize,
    /// Hidden width of the visibility MLP.
    pub vis_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: 64,
            triplane_channels: 128,
            depth_bins: 256,
            bands: 10,
            corr_radius: 3,
            width: 384,
            heads: 8,
            blocks: 6,
            ff_mult: 4,
            iters: 6,
            window: 8,
            embed_dim: 128,
            vis_hidden: 128,
        }
    }
}

impl ModelConfig {
    /// A configuration small enough to train on a single CPU core in
    /// minutes rather than days. Iteration count, window length, and
    /// block count keep their full-scale values.
    pub fn desk() -> Self {
        ModelConfig {
            backbone_channels: 16,
            triplane_channels: 32,
            depth_bins: 32,
            bands: 10,
            corr_radius: 3,
            width: 96,
            heads: 4,
            blocks: 6,
            ff_mult: 4,
            iters: 6,
            window: 8,
            embed_dim: 32,
            vis_hidden: 32,
        }
    }

    pub fn gamma_dim(&self) -> usize {
        6 * self.bands
    }

    /// Featured-cloud dimension: image feature plus positional embedding.
    pub fn cloud_dim(&self) -> usize {
        self.backbone_channels + self.gamma_dim()
    }

    /// Correlation feature dimension over the three planes.
    pub fn corr_dim(&self) -> usize {
        let side = 2 * self.corr_radius + 1;
        3 * side * side
    }

    /// Track-token dimension D = 6L + C + corr + 6L.
    pub fn token_dim(&self) -> usize {
        self.gamma_dim() + self.triplane_channels + self.corr_dim() + self.gamma_dim()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window < 2 || self.window % 2 != 0 {
            return Err(format!("window length must be even and >= 2, got {}", self.window));
        }
        if self.iters < 1 {
            return Err("need at least one refinement iteration".into());
        }
        if self.width % self.heads != 0 {
            return Err(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.depth_bins < 2 {
            return Err("need at least 2 depth bins".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims_match_architecture_contract() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.gamma_dim(), 60);
        assert_eq!(cfg.corr_dim(), 147);
        assert_eq!(cfg.token_dim(), 60 + 128 + 147 + 60);
        assert_eq!(cfg.token_dim(), 395);
        cfg.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = ModelConfig::desk();
        let text = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_odd_window() {
        let cfg = ModelConfig {
            window: 7,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
