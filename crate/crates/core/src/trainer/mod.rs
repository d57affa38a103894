//! Weakly supervised sequence training of the temporal detector.
//!
//! Each step draws a window of `T` frames and one annotated position `s`
//! inside it. Frames `0..=s` of the window go through the frozen backbone
//! outside the tape; only the ConvLSTM recurrence over frames `< s`, the
//! concatenation and the prediction layer at `s` are recorded. Frames after
//! `s` are never used.

mod loss;
mod pretrain;

pub use loss::{
    best_anchor, detection_loss, record_loss, scale_loss, softplus, LossOutput, IGNORE_IOU,
    LAMBDA_COORD, LAMBDA_NOOBJ,
};
pub use pretrain::{pretrain_base, PretrainConfig};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convlstm::{TapeConvLstm, TAPE_NODES_PER_STEP};
use crate::data::{GroundTruth, Video};
use crate::detector::{DetectorConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NONFINITE_STEPS: usize = 3;
const MAX_RESAMPLES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Window length `T`.
    pub seq_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Windows drawn per video and epoch; `None` draws one per annotated
    /// frame, so an epoch sees as many supervised frames as the video has
    /// annotations.
    pub samples_per_video: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 8,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
            samples_per_video: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.epochs == 0 {
            return Err(Error::contract("seq_len and epochs must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::contract(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// A window `start..start + seq_len` supervised only at
/// `start + supervised_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub start: usize,
    pub seq_len: usize,
    pub supervised_index: usize,
    /// Ground truth of the supervised frame.
    pub gt: Vec<GroundTruth>,
}

impl TrainingSample {
    pub fn frames<'a>(&self, video: &'a Video) -> &'a [Tensor] {
        &video.frames[self.start..self.start + self.seq_len]
    }

    /// Absolute index of the supervised frame.
    pub fn target_frame(&self) -> usize {
        self.start + self.supervised_index
    }
}

/// Draws a window uniformly, then a supervised position uniformly among the
/// annotated frames of that window.
pub fn sample_sequence<R: Rng + ?Sized>(video: &Video, seq_len: usize, rng: &mut R) -> Result<TrainingSample> {
    if seq_len == 0 || video.len() < seq_len {
        return Err(Error::contract(format!(
            "cannot draw a {seq_len}-frame window from {} frames",
            video.len()
        )));
    }
    let start = rng.gen_range(0..=video.len() - seq_len);
    let annotated: Vec<usize> = (0..seq_len).filter(|&j| video.annotated[start + j]).collect();
    let Some(&s) = annotated.choose(rng) else {
        return Err(Error::SampleRejected);
    };
    let gt = video.gt.iter().filter(|g| g.frame_index == start + s).copied().collect();
    Ok(TrainingSample {
        start,
        seq_len,
        supervised_index: s,
        gt,
    })
}

/// Assigns each box to the scale holding its best-fitting anchor.
pub fn assign_scales(config: &DetectorConfig, gt: &[GroundTruth]) -> Vec<Vec<GroundTruth>> {
    let mut out = vec![Vec::new(); config.scales.len()];
    if config.scales.len() == 1 {
        out[0] = gt.to_vec();
        return out;
    }
    let flat: Vec<(usize, [f64; 2])> = config
        .scales
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| sc.anchors.iter().map(move |&a| (s, a)))
        .collect();
    let anchors: Vec<[f64; 2]> = flat.iter().map(|&(_, a)| a).collect();
    for g in gt {
        let (s, _) = flat[best_anchor(g.bbox.w, g.bbox.h, &anchors)];
        out[s].push(*g);
    }
    out
}

/// Adam over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            learning_rate,
            step: 0,
            m,
            v,
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract("Adam parameter list changed"));
        }
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[k].len() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                *w -= self.learning_rate * step;
            }
        }
        Ok(())
    }
}

/// Trainable tensors of a temporal model in tape registration order: per
/// scale the twelve ConvLSTM tensors, head kernel, head bias.
pub fn trainable_tensors(params: &ModelParams) -> Vec<&Tensor> {
    params
        .scales
        .iter()
        .flat_map(|s| {
            let mut v = s.convlstm.tensors();
            v.extend([&s.head.kernel, &s.head.bias]);
            v
        })
        .collect()
}

pub fn trainable_tensors_mut(params: &mut ModelParams) -> Vec<&mut Tensor> {
    params
        .scales
        .iter_mut()
        .flat_map(|s| {
            let mut v = s.convlstm.tensors_mut();
            v.extend([&mut s.head.kernel, &mut s.head.bias]);
            v
        })
        .collect()
}

/// Recorded graph of one training sample.
pub struct SequenceGraph {
    pub tape: Tape,
    pub loss: Var,
    /// In [`trainable_tensors`] order.
    pub params: Vec<Var>,
    pub skipped: usize,
    pub outside: usize,
}

/// Records the loss of predicting the last entry of `features` (backbone
/// features per frame, per scale) with the earlier entries as history.
pub fn record_sequence(params: &ModelParams, features: &[Vec<Tensor>], gt: &[GroundTruth]) -> Result<SequenceGraph> {
    let (current, history) = features
        .split_last()
        .ok_or_else(|| Error::contract("a training sequence needs at least one frame"))?;
    let assigned = assign_scales(&params.config, gt);
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    let mut total: Option<Var> = None;
    let (mut skipped, mut outside) = (0, 0);
    for (s, ts) in params.scales.iter().enumerate() {
        let lstm = TapeConvLstm::register(&mut tape, &ts.convlstm, true);
        vars.extend(lstm.vars());
        let hk = tape.param(ts.head.kernel.clone());
        let hb = tape.param(ts.head.bias.clone());
        vars.extend([hk, hb]);

        let n = params.config.grid_size(s);
        let mut state = lstm.zero_state(&mut tape, n, n);
        for f in history {
            let x = tape.constant(f[s].clone());
            state = lstm.step(&mut tape, x, state)?;
        }
        let x = tape.constant(current[s].clone());
        let joined = tape.concat_channels(x, state.h)?;
        let out = tape.conv2d(joined, hk, 1, 0)?;
        let grid = tape.add_bias(out, hb)?;
        let anchors = &params.config.scales[s].anchors;
        let (l, stats) = record_loss(&mut tape, grid, anchors, &assigned[s], gt, params.config.input_size)?;
        skipped += stats.skipped;
        outside += stats.outside;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(SequenceGraph {
        tape,
        loss: total.expect("validated configs have a scale"),
        params: vars,
        skipped,
        outside,
    })
}

/// Closed-form tape size of [`record_sequence`] with `history` frames
/// before the supervised one. Backbone depth does not enter.
pub fn expected_tape_nodes(config: &DetectorConfig, history: usize) -> usize {
    // 12 ConvLSTM + 2 head leaves, zero h and c, per-frame input leaf and
    // recurrence, current features, concat, conv, bias, loss
    let per_scale = 14 + 2 + history * (1 + TAPE_NODES_PER_STEP) + 1 + 3 + 1;
    let scales = config.scales.len();
    scales * per_scale + scales - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    /// Mean loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Steps dropped for a non-finite loss or gradient.
    pub nonfinite_steps: usize,
    /// Ground-truth boxes dropped by the loss (shared cell or center outside).
    pub skipped_gt: usize,
    pub max_tape_nodes: usize,
}

/// Backbone features of every frame, computed once per video.
pub fn cache_features(params: &ModelParams, videos: &[Video]) -> Result<Vec<Vec<Vec<Tensor>>>> {
    videos
        .iter()
        .map(|v| v.frames.par_iter().map(|f| params.backbone_features(f)).collect())
        .collect()
}

pub fn train(videos: &[Video], config: &TrainConfig, params: ModelParams) -> Result<(ModelParams, TrainReport)> {
    train_with(videos, config, params, |_, _, _| Ok(()))
}

/// [`train`] with a callback after every epoch receiving the epoch number
/// (1-based), the current parameters and the epoch's mean loss.
pub fn train_with<F>(
    videos: &[Video],
    config: &TrainConfig,
    mut params: ModelParams,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(usize, &ModelParams, f64) -> Result<()>,
{
    config.validate()?;
    params.validate()?;
    if params.backbone.iter().any(|l| !l.frozen) {
        return Err(Error::contract("train expects a transferred model with a frozen backbone"));
    }
    let usable: Vec<&Video> = videos
        .iter()
        .filter(|v| v.len() >= config.seq_len && v.annotated.iter().any(|&a| a))
        .collect();
    if usable.is_empty() {
        return Err(Error::contract(format!(
            "no video has {} frames and an annotation",
            config.seq_len
        )));
    }
    let owned: Vec<Video> = usable.iter().map(|v| (*v).clone()).collect();
    let features = cache_features(&params, &owned)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, trainable_tensors(&params).iter().map(|t| t.len()));
    let mut report = TrainReport::default();
    let mut nonfinite_run = 0;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = Vec::new();
        for (i, v) in usable.iter().enumerate() {
            let k = config
                .samples_per_video
                .unwrap_or_else(|| v.annotated.iter().filter(|&&a| a).count());
            order.extend(std::iter::repeat_n(i, k));
        }
        order.shuffle(&mut rng);

        let (mut sum, mut count) = (0.0, 0usize);
        for vi in order {
            let video = usable[vi];
            let mut sample = None;
            for _ in 0..MAX_RESAMPLES {
                match sample_sequence(video, config.seq_len, &mut rng) {
                    Ok(s) => {
                        sample = Some(s);
                        break;
                    }
                    Err(Error::SampleRejected) => continue,
                    Err(e) => return Err(e),
                }
            }
            let Some(sample) = sample else {
                log::warn!("{}: no annotated window after {MAX_RESAMPLES} draws", video.name);
                continue;
            };
            let feats = &features[vi][sample.start..=sample.target_frame()];
            let graph = record_sequence(&params, feats, &sample.gt)?;
            report.max_tape_nodes = report.max_tape_nodes.max(graph.tape.len());
            report.skipped_gt += graph.skipped + graph.outside;
            step += 1;

            let loss = graph.tape.value(graph.loss).item()?;
            let grads = graph.tape.backward(graph.loss)?;
            // parameters the loss does not reach (no history frames) get zeros
            let grads: Vec<Tensor> = graph
                .params
                .iter()
                .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.tape.value(v).shape())))
                .collect();
            let grads: Vec<&Tensor> = grads.iter().collect();
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                nonfinite_run += 1;
                report.nonfinite_steps += 1;
                log::warn!("epoch {epoch} step {step}: non-finite loss {loss}, step skipped");
                if nonfinite_run >= MAX_NONFINITE_STEPS {
                    return Err(Error::Diverged(format!(
                        "{nonfinite_run} consecutive non-finite steps ending at epoch {epoch} step {step} \
                         (video {}, window {}..{}, supervised frame {})",
                        video.name,
                        sample.start,
                        sample.start + sample.seq_len,
                        sample.target_frame()
                    )));
                }
                continue;
            }
            nonfinite_run = 0;
            adam.update(trainable_tensors_mut(&mut params), &grads)?;
            report.losses.push(LossRecord { epoch, step, loss });
            sum += loss;
            count += 1;
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        log::info!("epoch {epoch}: mean loss {mean:.4} over {count} steps");
        report.epoch_loss.push(mean);
        on_epoch(epoch, &params, mean)?;
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_video, SyntheticSceneConfig};
    use crate::detector::{transfer_weights, BBox, BaseParams};
    use crate::tensor::relative_error;

    fn video(frames: usize, seed: u64) -> Video {
        generate_video(&SyntheticSceneConfig {
            frames,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn model(config: DetectorConfig, seed: u64) -> ModelParams {
        transfer_weights(&BaseParams::init(config, seed).unwrap(), seed + 1).unwrap()
    }

    #[test]
    fn single_frame_window_supervises_position_zero() {
        let v = video(12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = sample_sequence(&v, 1, &mut rng).unwrap();
            assert_eq!(s.supervised_index, 0);
            assert!(s.gt.iter().all(|g| g.frame_index == s.start));
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let v = video(30, 2);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| sample_sequence(&v, 8, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn supervised_position_is_uniform() {
        let v = video(40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0f64; 8];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_sequence(&v, 8, &mut rng).unwrap().supervised_index] += 1.0;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 7 degrees of freedom, p = 0.01
        assert!(chi2 < 18.475, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn sparse_annotations_restrict_the_supervised_frame() {
        let mut v = video(20, 4);
        v.annotated = (0..20).map(|f| f == 13).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut ok, mut rejected) = (0, 0);
        for _ in 0..200 {
            match sample_sequence(&v, 4, &mut rng) {
                Ok(s) => {
                    assert_eq!(s.target_frame(), 13);
                    ok += 1;
                }
                Err(Error::SampleRejected) => rejected += 1,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(ok > 0 && rejected > 0);
        assert!(sample_sequence(&v, 21, &mut rng).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.3, -5.0]).unwrap();
        let mut adam = Adam::new(0.01, [2]);
        adam.update(vec![&mut p], &[&g]).unwrap();
        // bias-corrected first step is lr·sign(g) up to ε
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn tape_size_matches_closed_form() {
        let params = model(DetectorConfig::default(), 3);
        let v = video(6, 5);
        let feats = cache_features(&params, std::slice::from_ref(&v)).unwrap().remove(0);
        for h in 0..5 {
            let graph = record_sequence(&params, &feats[..=h], &v.gt_by_frame()[h]).unwrap();
            assert_eq!(graph.tape.len(), expected_tape_nodes(&params.config, h));
            assert_eq!(graph.params.len(), 14);
        }
    }

    #[test]
    fn tape_size_ignores_backbone_depth() {
        let shallow = model(DetectorConfig::with_channels(64, &[8, 16, 32, 32], 24.0), 1);
        let deep = model(DetectorConfig::with_channels(64, &[8, 16, 32, 32, 32, 32], 24.0), 1);
        let v = video(4, 6);
        let sizes: Vec<usize> = [&shallow, &deep]
            .iter()
            .map(|p| {
                let f = cache_features(p, std::slice::from_ref(&v)).unwrap().remove(0);
                record_sequence(p, &f, &v.gt_by_frame()[3]).unwrap().tape.len()
            })
            .collect();
        assert_eq!(sizes[0], sizes[1]);
    }

    /// A small geometry with every trainable tensor live: 16px input, one
    /// 4×4 scale with 3 channels.
    pub(crate) fn toy_model(seed: u64) -> ModelParams {
        let mut m = model(DetectorConfig::with_channels(16, &[4, 3], 6.0), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in trainable_tensors_mut(&mut m) {
            *t = Tensor::uniform(t.shape(), 0.5, &mut rng);
        }
        m
    }

    #[test]
    fn bptt_gradients_match_finite_differences() {
        let params = toy_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[3, 16, 16], 1.0, &mut rng)).collect();
        let feats: Vec<Vec<Tensor>> = frames.iter().map(|f| params.backbone_features(f).unwrap()).collect();
        let gt = [GroundTruth {
            frame_index: 2,
            track_id: 1,
            bbox: BBox::new(3.0, 4.0, 7.0, 5.0),
            visibility: 1.0,
            class_id: 1,
        }];
        let graph = record_sequence(&params, &feats, &gt).unwrap();
        let grads = graph.tape.backward(graph.loss).unwrap();
        let loss_at = |p: &ModelParams| {
            let g = record_sequence(p, &feats, &gt).unwrap();
            g.tape.value(g.loss).item().unwrap()
        };
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for (k, &var) in graph.params.iter().enumerate() {
            let analytic = grads.get(var).unwrap();
            for i in 0..analytic.len() {
                let mut plus = params.clone();
                trainable_tensors_mut(&mut plus)[k].data_mut()[i] += eps;
                let mut minus = params.clone();
                trainable_tensors_mut(&mut minus)[k].data_mut()[i] -= eps;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                worst = worst.max(relative_error(analytic.data()[i], numeric));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let params = model(DetectorConfig::default(), 4);
        let videos = [video(12, 7)];
        let cfg = TrainConfig {
            seq_len: 4,
            epochs: 2,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (trained, report) = train(&videos, &cfg, params.clone()).unwrap();
        assert_eq!(trained, params);
        assert!(!report.losses.is_empty());
    }

    #[test]
    fn training_keeps_the_backbone_and_is_reproducible() {
        let params = model(DetectorConfig::default(), 5);
        let before = params.frozen_checksum();
        let videos = [video(16, 8), video(16, 9)];
        let cfg = TrainConfig {
            seq_len: 4,
            epochs: 2,
            ..Default::default()
        };
        let (a, ra) = train(&videos, &cfg, params.clone()).unwrap();
        let (b, rb) = train(&videos, &cfg, params.clone()).unwrap();
        assert_eq!(a.frozen_checksum(), before);
        assert_eq!(a.backbone, params.backbone);
        assert_ne!(a.scales, params.scales);
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a, b);
    }

    #[test]
    fn overfits_a_single_sequence() {
        let params = model(DetectorConfig::default(), 6);
        let videos = [video(8, 10)];
        let cfg = TrainConfig {
            seq_len: 8,
            epochs: 500,
            learning_rate: 3e-3,
            samples_per_video: Some(1),
            ..Default::default()
        };
        let (_, report) = train(&videos, &cfg, params).unwrap();
        assert_eq!(report.losses.len(), 500);
        let first = report.losses[0].loss;
        let tail: f64 = report.losses[490..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(tail < 0.1 * first, "initial {first}, final {tail}");
    }

    #[test]
    fn rejects_unfrozen_backbones() {
        let mut params = model(DetectorConfig::default(), 7);
        params.backbone[0].frozen = false;
        assert!(train(&[video(8, 1)], &TrainConfig::default(), params).is_err());
    }
}
