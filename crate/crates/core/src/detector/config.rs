use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::conv_output_size;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerConfig {
    pub fn down(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }
}

/// One detection scale: which backbone layer is encoded and which anchors
/// (width, height in px) its head predicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub tap_layer: usize,
    pub anchors: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerConfig>,
    pub scales: Vec<ScaleConfig>,
    pub convlstm_kernel: usize,
}

impl Default for DetectorConfig {
    /// 64×64 RGB, four stride-2 3×3 layers (8, 16, 32, 32 channels), one
    /// 4×4 scale with a single 24×24 anchor.
    fn default() -> Self {
        Self::with_channels(64, &[8, 16, 32, 32], 24.0)
    }
}

impl DetectorConfig {
    /// Stride-2 3×3 stack with one scale on the last layer.
    pub fn with_channels(input_size: usize, channels: &[usize], anchor: f64) -> Self {
        Self {
            input_size,
            input_channels: 3,
            layers: channels.iter().map(|&c| LayerConfig::down(c)).collect(),
            scales: vec![ScaleConfig {
                tap_layer: channels.len() - 1,
                anchors: vec![[anchor, anchor]],
            }],
            convlstm_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("backbone needs at least one layer"));
        }
        if self.scales.is_empty() {
            return Err(Error::contract("at least one detection scale is required"));
        }
        if self.convlstm_kernel.is_multiple_of(2) {
            return Err(Error::contract("ConvLSTM kernel size must be odd"));
        }
        let mut size = self.input_size;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::contract(format!("invalid layer {i}: {l:?}")));
            }
            if size + 2 * l.padding < l.kernel {
                return Err(Error::shape(format!("layer {i} kernel exceeds {size}px input")));
            }
            size = conv_output_size(size, l.kernel, l.stride, l.padding);
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.tap_layer >= self.layers.len() {
                return Err(Error::contract(format!(
                    "scale {i} taps layer {} of {}",
                    s.tap_layer,
                    self.layers.len()
                )));
            }
            if s.anchors.is_empty() || s.anchors.iter().any(|a| !(a[0] > 0.0 && a[1] > 0.0)) {
                return Err(Error::contract(format!("scale {i} has invalid anchors")));
            }
        }
        Ok(())
    }

    /// Spatial size after `layer`.
    pub fn layer_size(&self, layer: usize) -> usize {
        self.layers[..=layer].iter().fold(self.input_size, |s, l| {
            conv_output_size(s, l.kernel, l.stride, l.padding)
        })
    }

    pub fn layer_in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_channels
        } else {
            self.layers[layer - 1].out_channels
        }
    }

    pub fn tap_channels(&self, scale: usize) -> usize {
        self.layers[self.scales[scale].tap_layer].out_channels
    }

    pub fn grid_size(&self, scale: usize) -> usize {
        self.layer_size(self.scales[scale].tap_layer)
    }

    pub fn head_outputs(&self, scale: usize) -> usize {
        self.scales[scale].anchors.len() * 5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        // 64 → 32 → 16 → 8 → 4
        assert_eq!(
            (0..4).map(|l| c.layer_size(l)).collect::<Vec<_>>(),
            vec![32, 16, 8, 4]
        );
        assert_eq!(c.grid_size(0), 4);
        assert_eq!(c.tap_channels(0), 32);
        assert_eq!(c.head_outputs(0), 5);
    }

    #[test]
    fn rejects_bad_tap() {
        let mut c = DetectorConfig::default();
        c.scales[0].tap_layer = 7;
        assert!(c.validate().is_err());
    }
}
