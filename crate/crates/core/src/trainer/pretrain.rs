//! Still-image training of the base detector, which supplies the frozen
//! backbone of the temporal model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assign_scales, record_loss, Adam, LossRecord, TrainReport, MAX_NONFINITE_STEPS};
use crate::data::Video;
use crate::detector::BaseParams;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

fn tensors_mut(base: &mut BaseParams) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = Vec::new();
    for l in base.backbone.iter_mut().filter(|l| !l.frozen) {
        out.extend([&mut l.kernel, &mut l.bias]);
    }
    for h in &mut base.heads {
        out.extend([&mut h.kernel, &mut h.bias]);
    }
    out
}

fn record_frame(
    base: &BaseParams,
    frame: &Tensor,
    gt: &[crate::data::GroundTruth],
) -> Result<(Tape, Var, Vec<Var>, usize)> {
    let cfg = &base.config;
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    let mut x = tape.constant(frame.clone());
    let mut taps = Vec::with_capacity(cfg.layers.len());
    let mut layer_vars = Vec::with_capacity(base.backbone.len());
    for l in &base.backbone {
        let (k, b) = if l.frozen {
            (tape.constant(l.kernel.clone()), tape.constant(l.bias.clone()))
        } else {
            let k = tape.param(l.kernel.clone());
            let b = tape.param(l.bias.clone());
            vars.extend([k, b]);
            (k, b)
        };
        layer_vars.push((k, b));
    }
    let last_tap = cfg.scales.iter().map(|s| s.tap_layer).max().unwrap_or(0);
    for ((k, b), lc) in layer_vars.into_iter().zip(&cfg.layers).take(last_tap + 1) {
        let y = tape.conv2d(x, k, lc.stride, lc.padding)?;
        let y = tape.add_bias(y, b)?;
        x = tape.leaky_relu(y);
        taps.push(x);
    }
    let assigned = assign_scales(cfg, gt);
    let mut total: Option<Var> = None;
    let mut skipped = 0;
    for (s, (h, sc)) in base.heads.iter().zip(&cfg.scales).enumerate() {
        let hk = tape.param(h.kernel.clone());
        let hb = tape.param(h.bias.clone());
        vars.extend([hk, hb]);
        let y = tape.conv2d(taps[sc.tap_layer], hk, 1, 0)?;
        let grid = tape.add_bias(y, hb)?;
        let (l, stats) = record_loss(&mut tape, grid, &sc.anchors, &assigned[s], gt, cfg.input_size)?;
        skipped += stats.skipped + stats.outside;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok((tape, total.expect("validated configs have a scale"), vars, skipped))
}

/// Trains the backbone (layers not marked frozen) and heads on individual
/// annotated frames, one frame per Adam step.
pub fn pretrain_base(videos: &[Video], config: &PretrainConfig, mut base: BaseParams) -> Result<(BaseParams, TrainReport)> {
    base.validate()?;
    if config.epochs == 0 || !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(Error::contract("pretraining needs epochs ≥ 1 and a finite learning rate"));
    }
    let frames: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, video)| (0..video.len()).filter(|&f| video.annotated[f]).map(move |f| (v, f)))
        .collect();
    if frames.is_empty() {
        return Err(Error::contract("no annotated frames to pretrain on"));
    }
    let gt: Vec<_> = videos.iter().map(Video::gt_by_frame).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, tensors_mut(&mut base).iter().map(|t| t.len()));
    let mut report = TrainReport::default();
    let (mut step, mut nonfinite_run) = (0, 0);
    for epoch in 1..=config.epochs {
        let mut order = frames.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (v, f) in order {
            let (tape, loss_var, vars, skipped) = record_frame(&base, &videos[v].frames[f], &gt[v][f])?;
            report.max_tape_nodes = report.max_tape_nodes.max(tape.len());
            report.skipped_gt += skipped;
            step += 1;
            let loss = tape.value(loss_var).item()?;
            let grads = tape.backward(loss_var)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
                .collect();
            let grads: Vec<&Tensor> = grads.iter().collect();
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                nonfinite_run += 1;
                report.nonfinite_steps += 1;
                log::warn!("pretrain epoch {epoch} step {step}: non-finite loss {loss}, step skipped");
                if nonfinite_run >= MAX_NONFINITE_STEPS {
                    return Err(Error::Diverged(format!(
                        "{nonfinite_run} consecutive non-finite pretraining steps ending at epoch {epoch} \
                         step {step} ({} frame {f})",
                        videos[v].name
                    )));
                }
                continue;
            }
            nonfinite_run = 0;
            adam.update(tensors_mut(&mut base), &grads)?;
            report.losses.push(LossRecord { epoch, step, loss });
            sum += loss;
            count += 1;
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        log::info!("pretrain epoch {epoch}: mean loss {mean:.4} over {count} frames");
        report.epoch_loss.push(mean);
    }
    Ok((base, report))
}
