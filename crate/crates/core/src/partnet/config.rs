//! Model configuration records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone geometry: a stack of 3x3 conv stages with ReLU, each optionally
/// downsampling by its stride. The default desk configuration maps a 32x16x3
/// image to a 4x2x64 feature map, keeping the 2:1 tall person box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels per stage.
    pub channels: Vec<usize>,
    /// Stride per stage, same length as `channels`.
    pub strides: Vec<usize>,
    /// Square kernel extent, padding fixed to keep geometry simple.
    pub kernel: usize,
    pub padding: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_h: 32,
            input_w: 16,
            channels: vec![16, 32, 64],
            strides: vec![2, 2, 2],
            kernel: 3,
            padding: 1,
        }
    }
}

impl BackboneConfig {
    /// Keeps the final stage at stride 1, doubling the feature map relative
    /// to the default. With a 40x20 input this yields a 10x5 map, which is
    /// what the 5-stripe and 5x5-grid baselines need to stay well formed.
    pub fn doubled_map(mut self) -> Self {
        if let Some(last) = self.strides.last_mut() {
            *last = 1;
        }
        self
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_h = h;
        self.input_w = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::InvalidConfig(format!(
                "backbone needs matching non-empty channels/strides, got {} and {}",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("backbone strides must be >= 1".into()));
        }
        if self.kernel == 0 || self.kernel > self.input_h.min(self.input_w) + 2 * self.padding {
            return Err(Error::InvalidConfig(format!(
                "kernel {} too large for {}x{} input",
                self.kernel, self.input_h, self.input_w
            )));
        }
        let (h, w, _) = self.feature_shape();
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "backbone collapses {}x{} input to an empty map",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Output (H, W, C) after all stages, by the usual conv arithmetic.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let mut h = self.input_h;
        let mut w = self.input_w;
        for &s in &self.strides {
            h = (h + 2 * self.padding).saturating_sub(self.kernel) / s + 1;
            w = (w + 2 * self.padding).saturating_sub(self.kernel) / s + 1;
        }
        (h, w, *self.channels.last().unwrap_or(&0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// 1x1 conv followed by an elementwise sigmoid; map entries in (0,1).
    Sigmoid,
    /// 1x1 conv followed by a softmax over all spatial positions.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadKind {
    /// K learned part detectors (the part net).
    Partnet,
    /// Fixed horizontal stripe masks.
    Stripe { bands: usize },
    /// Fixed GxG grid masks.
    Grid { side: usize },
    /// Global average pooling plus one linear layer.
    GlobalPool,
    /// One fully-connected layer over the flattened feature map.
    Fc,
    /// Externally supplied constant masks (e.g. ground-truth parts).
    FixedMask,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Partnet => "partnet",
            HeadKind::Stripe { .. } => "stripe",
            HeadKind::Grid { .. } => "grid",
            HeadKind::GlobalPool => "pool",
            HeadKind::Fc => "fc",
            HeadKind::FixedMask => "fixed-mask",
        }
    }
}

/// Head configuration. All heads emit `parts * part_dim` wide embeddings so
/// they are directly comparable; `part_dim` defaults to the total width
/// divided by the number of parts (floored, at least 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartNetConfig {
    /// Number of part branches K.
    pub parts: usize,
    /// Per-part reduced dimension d.
    pub part_dim: usize,
    pub attention: AttentionKind,
    pub head: HeadKind,
}

impl PartNetConfig {
    /// Learned part head with K branches sharing a total embedding width.
    pub fn partnet(parts: usize, total_width: usize, attention: AttentionKind) -> Self {
        PartNetConfig {
            parts,
            part_dim: per_part_dim(total_width, parts),
            attention,
            head: HeadKind::Partnet,
        }
    }

    /// Baseline head with the same nominal width as a part net of
    /// `total_width`.
    pub fn baseline(head: HeadKind, total_width: usize) -> Self {
        let parts = match head {
            HeadKind::Partnet => 8,
            HeadKind::Stripe { bands } => bands,
            HeadKind::Grid { side } => side * side,
            HeadKind::GlobalPool | HeadKind::Fc => 1,
            HeadKind::FixedMask => 3,
        };
        PartNetConfig {
            parts,
            part_dim: per_part_dim(total_width, parts),
            attention: AttentionKind::Sigmoid,
            head,
        }
    }

    /// Fixed-mask head for `parts` externally supplied masks.
    pub fn fixed_mask(parts: usize, total_width: usize) -> Self {
        PartNetConfig {
            parts,
            part_dim: per_part_dim(total_width, parts),
            attention: AttentionKind::Sigmoid,
            head: HeadKind::FixedMask,
        }
    }

    pub fn embedding_width(&self) -> usize {
        self.parts * self.part_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 || self.part_dim == 0 {
            return Err(Error::InvalidConfig(
                "part count and per-part dimension must be >= 1".into(),
            ));
        }
        match self.head {
            HeadKind::Stripe { bands } if bands != self.parts => Err(Error::InvalidConfig(
                format!("stripe({bands}) head disagrees with parts={}", self.parts),
            )),
            HeadKind::Grid { side } if side * side != self.parts => Err(Error::InvalidConfig(
                format!("grid({side}x{side}) head disagrees with parts={}", self.parts),
            )),
            _ => Ok(()),
        }
    }
}

fn per_part_dim(total_width: usize, parts: usize) -> usize {
    (total_width / parts.max(1)).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_feature_shape() {
        // Shape arithmetic from the configured strides: 32x16x3 -> 4x2x64.
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.feature_shape(), (4, 2, 64));
        cfg.validate().unwrap();
    }

    #[test]
    fn doubled_map_keeps_last_stage_dense() {
        let cfg = BackboneConfig::default().doubled_map();
        assert_eq!(cfg.feature_shape(), (8, 4, 64));
        let wide = BackboneConfig::default().with_input(40, 20).doubled_map();
        assert_eq!(wide.feature_shape(), (10, 5, 64));
    }

    #[test]
    fn per_part_dims_floor_with_minimum() {
        assert_eq!(PartNetConfig::partnet(8, 64, AttentionKind::Sigmoid).part_dim, 8);
        assert_eq!(PartNetConfig::partnet(1, 64, AttentionKind::Sigmoid).part_dim, 64);
        assert_eq!(PartNetConfig::partnet(12, 64, AttentionKind::Sigmoid).part_dim, 5);
        let grid = PartNetConfig::baseline(HeadKind::Grid { side: 5 }, 64);
        assert_eq!(grid.parts, 25);
        assert_eq!(grid.part_dim, 2);
    }

    #[test]
    fn head_width_matches_baselines() {
        let partnet = PartNetConfig::partnet(8, 64, AttentionKind::Sigmoid);
        let pool = PartNetConfig::baseline(HeadKind::GlobalPool, 64);
        let fc = PartNetConfig::baseline(HeadKind::Fc, 64);
        assert_eq!(partnet.embedding_width(), 64);
        assert_eq!(pool.embedding_width(), 64);
        assert_eq!(fc.embedding_width(), 64);
    }
}
