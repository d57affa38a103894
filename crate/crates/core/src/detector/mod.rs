//! Toy single-stage grid detector and its temporal modification.
//!
//! The base network is a plain convolutional backbone followed by a 1×1
//! prediction layer per scale. The temporal network keeps the backbone and,
//! per scale, encodes the tapped feature maps of all *previous* frames with a
//! ConvLSTM. The hidden map is concatenated after the current frame's
//! features, so the prediction layer sees `2·C` input channels:
//!
//! ```text
//! frame_t ─ backbone ─┬──────────────── concat ─ 1×1 head ─ grid_t
//!                     │                   ▲
//!                     └─ ConvLSTM ─ h_t ──┘ (h_t encodes frames < t)
//! ```

mod bbox;
pub mod checkpoint;
mod config;
mod decode;

pub use bbox::BBox;
pub use config::{DetectorConfig, LayerConfig, ScaleConfig};
pub use decode::{decode, nms, Detection, NMS_IOU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convlstm::{convlstm_step, encode_history, ConvLstmState, ConvLstmWeights};
use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// History encoding is forced to the zero state.
    Plain,
    /// The ConvLSTM has consumed every previous frame.
    Sequenced,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Mode::Plain),
            "sequenced" => Ok(Mode::Sequenced),
            other => Err(Error::contract(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::Sequenced => "sequenced",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[C_out, C_in, k, k]`
    pub kernel: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
    pub frozen: bool,
}

/// 1×1 prediction layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `[A·5, C_in, 1, 1]`
    pub kernel: Tensor,
    /// `[A·5]`
    pub bias: Tensor,
}

impl Head {
    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        ops::add_channel_bias(&ops::conv2d(features, &self.kernel, 1, 0)?, &self.bias)
    }

    fn init<R: Rng + ?Sized>(outputs: usize, in_channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_channels as f64).sqrt();
        let mut bias = Tensor::zeros(&[outputs]);
        // low initial objectness
        for a in 0..outputs / 5 {
            bias.data_mut()[a * 5 + 4] = -4.0;
        }
        Self {
            kernel: Tensor::uniform(&[outputs, in_channels, 1, 1], bound, rng),
            bias,
        }
    }
}

/// Raw prediction map of one scale, `[A·5, S, S]`: per cell and anchor
/// `tx, ty, tw, th, objectness logit`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub tensor: Tensor,
    pub anchors: Vec<[f64; 2]>,
}

impl RawGrid {
    pub fn size(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn value(&self, anchor: usize, field: usize, row: usize, col: usize) -> f64 {
        let s = self.size();
        self.tensor.data()[((anchor * 5 + field) * s + row) * s + col]
    }
}

fn check_frame(config: &DetectorConfig, frame: &Tensor) -> Result<()> {
    let n = config.input_size;
    if frame.shape() != [config.input_channels, n, n] {
        return Err(Error::shape(format!(
            "frame {:?} does not match the configured {}x{}x{} input",
            frame.shape(),
            config.input_channels,
            n,
            n
        )));
    }
    Ok(())
}

/// Runs the backbone and returns the tapped feature map of every scale.
pub fn run_backbone(config: &DetectorConfig, layers: &[ConvLayer], frame: &Tensor) -> Result<Vec<Tensor>> {
    check_frame(config, frame)?;
    let last_tap = config.scales.iter().map(|s| s.tap_layer).max().unwrap_or(0);
    let mut x = frame.clone();
    let mut outputs = Vec::with_capacity(last_tap + 1);
    for (l, cfg) in layers.iter().zip(&config.layers).take(last_tap + 1) {
        let y = ops::conv2d(&x, &l.kernel, cfg.stride, cfg.padding)?;
        x = ops::leaky_relu(&ops::add_channel_bias(&y, &l.bias)?);
        outputs.push(x.clone());
    }
    Ok(config.scales.iter().map(|s| outputs[s.tap_layer].clone()).collect())
}

fn init_backbone<R: Rng + ?Sized>(config: &DetectorConfig, rng: &mut R) -> Vec<ConvLayer> {
    config
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let c_in = config.layer_in_channels(i);
            let fan_in = (c_in * l.kernel * l.kernel) as f64;
            // He-uniform for leaky ReLU
            let bound = (6.0 / ((1.0 + ops::LEAKY_SLOPE * ops::LEAKY_SLOPE) * fan_in)).sqrt();
            ConvLayer {
                kernel: Tensor::uniform(&[l.out_channels, c_in, l.kernel, l.kernel], bound, rng),
                bias: Tensor::zeros(&[l.out_channels]),
                frozen: false,
            }
        })
        .collect()
}

fn check_backbone(config: &DetectorConfig, layers: &[ConvLayer]) -> Result<()> {
    if layers.len() != config.layers.len() {
        return Err(Error::shape(format!(
            "{} backbone layers for a {}-layer config",
            layers.len(),
            config.layers.len()
        )));
    }
    for (i, (l, cfg)) in layers.iter().zip(&config.layers).enumerate() {
        let expected = [cfg.out_channels, config.layer_in_channels(i), cfg.kernel, cfg.kernel];
        if l.kernel.shape() != expected || l.bias.shape() != [cfg.out_channels] {
            return Err(Error::shape(format!(
                "backbone layer {i} has kernel {:?}, expected {expected:?}",
                l.kernel.shape()
            )));
        }
    }
    Ok(())
}

/// The unmodified single-frame detector.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams {
    pub config: DetectorConfig,
    pub backbone: Vec<ConvLayer>,
    pub heads: Vec<Head>,
}

impl BaseParams {
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = init_backbone(&config, &mut rng);
        let heads = (0..config.scales.len())
            .map(|s| Head::init(config.head_outputs(s), config.tap_channels(s), &mut rng))
            .collect();
        Ok(Self {
            config,
            backbone,
            heads,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        check_backbone(&self.config, &self.backbone)?;
        if self.heads.len() != self.config.scales.len() {
            return Err(Error::shape("one head per scale required"));
        }
        for (s, h) in self.heads.iter().enumerate() {
            let expected = [self.config.head_outputs(s), self.config.tap_channels(s), 1, 1];
            if h.kernel.shape() != expected || h.bias.shape() != [expected[0]] {
                return Err(Error::shape(format!(
                    "base head {s} is {:?}, expected {expected:?}",
                    h.kernel.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn backbone_features(&self, frame: &Tensor) -> Result<Vec<Tensor>> {
        run_backbone(&self.config, &self.backbone, frame)
    }

    pub fn forward(&self, frame: &Tensor) -> Result<Vec<RawGrid>> {
        let feats = self.backbone_features(frame)?;
        feats
            .iter()
            .zip(&self.heads)
            .zip(&self.config.scales)
            .map(|((f, h), sc)| {
                Ok(RawGrid {
                    tensor: h.apply(f)?,
                    anchors: sc.anchors.clone(),
                })
            })
            .collect()
    }
}

/// ConvLSTM and widened prediction layer of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalScale {
    pub convlstm: ConvLstmWeights,
    /// `[A·5, 2C, 1, 1]`: current-frame channels first, history channels second.
    pub head: Head,
}

/// The temporally modified detector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: DetectorConfig,
    pub backbone: Vec<ConvLayer>,
    pub scales: Vec<TemporalScale>,
}

impl ModelParams {
    /// Checks shapes, including that every head takes exactly twice the
    /// channels of the layer its ConvLSTM encodes.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        check_backbone(&self.config, &self.backbone)?;
        if self.scales.len() != self.config.scales.len() {
            return Err(Error::shape("one temporal head per scale required"));
        }
        for (s, ts) in self.scales.iter().enumerate() {
            let c = self.config.tap_channels(s);
            if ts.convlstm.filters() != c || ts.convlstm.in_channels() != c {
                return Err(Error::shape(format!(
                    "scale {s}: ConvLSTM has {} filters, encoded layer has {c} channels",
                    ts.convlstm.filters()
                )));
            }
            if ts.convlstm.kernel_size() != self.config.convlstm_kernel {
                return Err(Error::shape(format!(
                    "scale {s}: ConvLSTM kernel {} vs configured {}",
                    ts.convlstm.kernel_size(),
                    self.config.convlstm_kernel
                )));
            }
            let expected = [self.config.head_outputs(s), 2 * c, 1, 1];
            if ts.head.kernel.shape() != expected || ts.head.bias.shape() != [expected[0]] {
                return Err(Error::shape(format!(
                    "scale {s}: head is {:?}, expected {expected:?} (input channels must double)",
                    ts.head.kernel.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn backbone_features(&self, frame: &Tensor) -> Result<Vec<Tensor>> {
        run_backbone(&self.config, &self.backbone, frame)
    }

    pub fn zero_states(&self) -> Vec<ConvLstmState> {
        (0..self.scales.len())
            .map(|s| {
                let n = self.config.grid_size(s);
                ConvLstmState::zeros(self.config.tap_channels(s), n, n)
            })
            .collect()
    }

    /// Prediction for one frame given its features and the history encoding
    /// of each scale.
    pub fn predict(&self, features: &[Tensor], history: &[ConvLstmState]) -> Result<Vec<RawGrid>> {
        if features.len() != self.scales.len() || history.len() != self.scales.len() {
            return Err(Error::shape("features/history do not match scale count"));
        }
        self.scales
            .iter()
            .zip(features.iter().zip(history))
            .zip(&self.config.scales)
            .map(|((ts, (f, st)), sc)| {
                let joined = ops::concat_channels(f, &st.h)?;
                Ok(RawGrid {
                    tensor: ts.head.apply(&joined)?,
                    anchors: sc.anchors.clone(),
                })
            })
            .collect()
    }

    /// Prediction for the last of `frames`.
    pub fn forward(&self, frames: &[Tensor], mode: Mode) -> Result<Vec<RawGrid>> {
        let (last, earlier) = frames
            .split_last()
            .ok_or_else(|| Error::contract("forward needs at least one frame"))?;
        let current = self.backbone_features(last)?;
        let history = match mode {
            Mode::Plain => self.zero_states(),
            Mode::Sequenced => {
                let feats = earlier
                    .iter()
                    .map(|f| self.backbone_features(f))
                    .collect::<Result<Vec<_>>>()?;
                self.encode(&feats)?
            }
        };
        self.predict(&current, &history)
    }

    /// Per-scale history encoding of per-frame feature lists.
    pub fn encode(&self, per_frame: &[Vec<Tensor>]) -> Result<Vec<ConvLstmState>> {
        (0..self.scales.len())
            .map(|s| {
                let seq: Vec<Tensor> = per_frame.iter().map(|f| f[s].clone()).collect();
                let n = self.config.grid_size(s);
                encode_history(&seq, &self.scales[s].convlstm, (n, n))
            })
            .collect()
    }

    /// Frame-by-frame inference over a video.
    pub fn stream(&self, mode: Mode) -> InferenceStream<'_> {
        InferenceStream {
            model: self,
            mode,
            states: self.zero_states(),
        }
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.backbone
            .iter()
            .flat_map(|l| [l.kernel.checksum(), l.bias.checksum()])
            .fold(0u64, |acc, c| acc.rotate_left(7) ^ c)
    }
}

/// Carries the ConvLSTM state of one video stream across frames.
pub struct InferenceStream<'a> {
    model: &'a ModelParams,
    mode: Mode,
    states: Vec<ConvLstmState>,
}

impl InferenceStream<'_> {
    pub fn step(&mut self, frame: &Tensor) -> Result<Vec<RawGrid>> {
        let feats = self.model.backbone_features(frame)?;
        self.step_features(&feats)
    }

    /// Same as [`step`](Self::step) for precomputed backbone features.
    pub fn step_features(&mut self, features: &[Tensor]) -> Result<Vec<RawGrid>> {
        let grids = self.model.predict(features, &self.states)?;
        if self.mode == Mode::Sequenced {
            for (s, st) in self.states.iter_mut().enumerate() {
                *st = convlstm_step(&features[s], st, &self.model.scales[s].convlstm)?;
            }
        }
        Ok(grids)
    }
}

/// Builds the temporal network from a base network: the backbone is copied
/// and frozen, each head is widened from `C` to `2C` inputs with the new
/// (history) channels zeroed, and the ConvLSTMs are freshly initialized.
pub fn transfer_weights(base: &BaseParams, init_seed: u64) -> Result<ModelParams> {
    base.validate()?;
    let config = base.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let backbone = base
        .backbone
        .iter()
        .map(|l| ConvLayer {
            frozen: true,
            ..l.clone()
        })
        .collect();
    let mut scales = Vec::with_capacity(base.heads.len());
    for (s, head) in base.heads.iter().enumerate() {
        let c = config.tap_channels(s);
        if head.in_channels() != c {
            return Err(Error::shape(format!(
                "base head {s} expects {} channels, encoded layer has {c}",
                head.in_channels()
            )));
        }
        let outputs = head.kernel.shape()[0];
        let mut kernel = Tensor::zeros(&[outputs, 2 * c, 1, 1]);
        for o in 0..outputs {
            kernel.data_mut()[o * 2 * c..o * 2 * c + c]
                .copy_from_slice(&head.kernel.data()[o * c..(o + 1) * c]);
        }
        scales.push(TemporalScale {
            convlstm: ConvLstmWeights::init(c, config.convlstm_kernel, &mut rng)?,
            head: Head {
                kernel,
                bias: head.bias.clone(),
            },
        });
    }
    let model = ModelParams {
        config,
        backbone,
        scales,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, size, size], |_| rng.gen_range(0.0..1.0))
    }

    fn model(seed: u64) -> ModelParams {
        let base = BaseParams::init(DetectorConfig::default(), seed).unwrap();
        let mut m = transfer_weights(&base, seed + 1).unwrap();
        // make the history channels matter
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for ts in &mut m.scales {
            ts.head.kernel = Tensor::uniform(ts.head.kernel.shape(), 0.3, &mut rng);
        }
        m
    }

    #[test]
    fn backbone_shapes_and_determinism() {
        let base = BaseParams::init(DetectorConfig::default(), 1).unwrap();
        let f = frame(2, 64);
        let a = base.backbone_features(&f).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].shape(), &[32, 4, 4]);
        let b = base.backbone_features(&f).unwrap();
        assert_eq!(a[0].checksum(), b[0].checksum());
        assert!(matches!(base.backbone_features(&frame(2, 32)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_frame_zero_weights_gives_zero_features() {
        let mut base = BaseParams::init(DetectorConfig::default(), 1).unwrap();
        for l in &mut base.backbone {
            l.kernel = Tensor::zeros(l.kernel.shape());
            l.bias = Tensor::zeros(l.bias.shape());
        }
        let f = base.backbone_features(&Tensor::zeros(&[3, 64, 64])).unwrap();
        assert!(f[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_modes_agree() {
        let m = model(3);
        let f = vec![frame(4, 64)];
        assert_eq!(
            m.forward(&f, Mode::Plain).unwrap(),
            m.forward(&f, Mode::Sequenced).unwrap()
        );
    }

    #[test]
    fn history_changes_sequenced_output() {
        let m = model(5);
        let frames = vec![frame(6, 64), frame(7, 64)];
        let seq = m.forward(&frames, Mode::Sequenced).unwrap();
        let plain = m.forward(&frames[1..], Mode::Plain).unwrap();
        assert_ne!(seq, plain);
        assert_eq!(m.forward(&frames, Mode::Plain).unwrap(), plain);
    }

    #[test]
    fn sequenced_equals_manual_pipeline() {
        let m = model(8);
        let f = frame(9, 64);
        let frames = vec![f.clone(); 5];
        let out = m.forward(&frames, Mode::Sequenced).unwrap();

        let feat = m.backbone_features(&f).unwrap().remove(0);
        let w = &m.scales[0].convlstm;
        let mut st = ConvLstmState::zeros(32, 4, 4);
        for _ in 0..4 {
            st = convlstm_step(&feat, &st, w).unwrap();
        }
        let joined = ops::concat_channels(&feat, &st.h).unwrap();
        let manual = m.scales[0].head.apply(&joined).unwrap();
        assert_eq!(out[0].tensor, manual);
    }

    #[test]
    fn stream_matches_forward() {
        let m = model(10);
        let frames: Vec<Tensor> = (0..4).map(|i| frame(20 + i, 64)).collect();
        for mode in [Mode::Plain, Mode::Sequenced] {
            let mut s = m.stream(mode);
            for t in 0..frames.len() {
                let got = s.step(&frames[t]).unwrap();
                assert_eq!(got, m.forward(&frames[..=t], mode).unwrap());
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let m = model(11);
        assert!(matches!(m.forward(&[], Mode::Plain), Err(Error::Contract(_))));
    }

    #[test]
    fn transfer_copies_and_widens() {
        let base = BaseParams::init(DetectorConfig::default(), 12).unwrap();
        let m = transfer_weights(&base, 13).unwrap();
        for (a, b) in base.backbone.iter().zip(&m.backbone) {
            assert_eq!(a.kernel.checksum(), b.kernel.checksum());
            assert_eq!(a.bias.checksum(), b.bias.checksum());
            assert!(b.frozen);
        }
        let head = &m.scales[0].head;
        assert_eq!(head.kernel.shape(), &[5, 64, 1, 1]);
        for o in 0..5 {
            let row = &head.kernel.data()[o * 64..(o + 1) * 64];
            assert_eq!(&row[..32], &base.heads[0].kernel.data()[o * 32..(o + 1) * 32]);
            assert!(row[32..].iter().all(|&v| v == 0.0));
        }
        let f = frame(14, 64);
        let plain = m.forward(std::slice::from_ref(&f), Mode::Plain).unwrap();
        assert_eq!(plain, base.forward(&f).unwrap());
        let seq = m
            .forward(&[frame(15, 64), frame(16, 64), f.clone()], Mode::Sequenced)
            .unwrap();
        assert_eq!(seq, base.forward(&f).unwrap());
    }

    #[test]
    fn doubling_contract_is_enforced() {
        let base = BaseParams::init(DetectorConfig::default(), 1).unwrap();
        let mut m = transfer_weights(&base, 2).unwrap();
        m.scales[0].head.kernel = Tensor::zeros(&[5, 32, 1, 1]);
        assert!(matches!(m.validate(), Err(Error::Shape(_))));

        let mut bad = base.clone();
        bad.heads[0].kernel = Tensor::zeros(&[5, 16, 1, 1]);
        assert!(transfer_weights(&bad, 0).is_err());
    }

    #[test]
    fn two_scale_config() {
        let mut cfg = DetectorConfig::default();
        cfg.scales.push(ScaleConfig {
            tap_layer: 2,
            anchors: vec![[12.0, 12.0], [16.0, 8.0]],
        });
        let base = BaseParams::init(cfg, 3).unwrap();
        let m = transfer_weights(&base, 4).unwrap();
        let frames = vec![frame(1, 64), frame(2, 64)];
        let out = m.forward(&frames, Mode::Sequenced).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].tensor.shape(), &[10, 8, 8]);
        assert_eq!(m.scales[1].head.kernel.shape(), &[10, 64, 1, 1]);
    }
}
