//! YOLO-style detection loss with an analytic gradient.

use crate::data::GroundTruth;
use crate::detector::{BBox, RawGrid};
use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

pub const LAMBDA_COORD: f64 = 5.0;
pub const LAMBDA_NOOBJ: f64 = 0.5;
/// Non-responsible anchors whose decoded box overlaps a ground-truth box by
/// more than this get no objectness penalty.
pub const IGNORE_IOU: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// d loss / d grid, same shape as the grid tensor.
    pub grad: Tensor,
    /// Boxes dropped because an earlier box already claimed their cell and anchor.
    pub skipped: usize,
    /// Boxes dropped because their center lies outside the image.
    pub outside: usize,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// IoU of two boxes sharing a center.
fn shape_iou(w: f64, h: f64, anchor: [f64; 2]) -> f64 {
    let inter = w.min(anchor[0]) * h.min(anchor[1]);
    inter / (w * h + anchor[0] * anchor[1] - inter)
}

/// Anchor index (among `anchors`) whose shape best fits a `w×h` box; ties go
/// to the lower index.
pub fn best_anchor(w: f64, h: f64, anchors: &[[f64; 2]]) -> usize {
    let mut best = 0;
    for (a, &anchor) in anchors.iter().enumerate() {
        if shape_iou(w, h, anchor) > shape_iou(w, h, anchors[best]) {
            best = a;
        }
    }
    best
}

/// Loss of one grid when every box in `gt` is predicted by this grid.
pub fn detection_loss(grid: &RawGrid, gt: &[GroundTruth], input_size: usize) -> Result<LossOutput> {
    scale_loss(grid, gt, gt, input_size)
}

/// Loss of one scale: `assigned` boxes get responsible anchors here, `all`
/// boxes (every scale) drive the ignore rule.
pub fn scale_loss(
    grid: &RawGrid,
    assigned: &[GroundTruth],
    all: &[GroundTruth],
    input_size: usize,
) -> Result<LossOutput> {
    let shape = grid.tensor.shape();
    let n_anchors = grid.anchors.len();
    if shape.len() != 3 || shape[0] != n_anchors * 5 || shape[1] != shape[2] || shape[1] == 0 {
        return Err(Error::shape(format!(
            "grid {shape:?} does not hold 5 fields for {n_anchors} anchors on a square map"
        )));
    }
    let s = shape[1];
    let stride = input_size as f64 / s as f64;
    let n = input_size as f64;
    let at = |a: usize, f: usize, row: usize, col: usize| ((a * 5 + f) * s + row) * s + col;

    let mut owner: Vec<Option<&GroundTruth>> = vec![None; n_anchors * s * s];
    let (mut skipped, mut outside) = (0, 0);
    for g in assigned {
        let (cx, cy) = g.bbox.center();
        if !g.bbox.is_valid() || !(0.0..n).contains(&cx) || !(0.0..n).contains(&cy) {
            outside += 1;
            continue;
        }
        let col = ((cx / stride).floor() as usize).min(s - 1);
        let row = ((cy / stride).floor() as usize).min(s - 1);
        let a = best_anchor(g.bbox.w, g.bbox.h, &grid.anchors);
        let slot = &mut owner[(row * s + col) * n_anchors + a];
        if slot.is_some() {
            skipped += 1;
        } else {
            *slot = Some(g);
        }
    }

    let t = grid.tensor.data();
    let mut grad = vec![0.0; t.len()];
    let mut value = 0.0;
    for row in 0..s {
        for col in 0..s {
            for (a, &anchor) in grid.anchors.iter().enumerate() {
                let [ix, iy, iw, ih, io] = [0, 1, 2, 3, 4].map(|f| at(a, f, row, col));
                let obj = t[io];
                if let Some(g) = owner[(row * s + col) * n_anchors + a] {
                    let (cx, cy) = g.bbox.center();
                    let targets = [
                        (ix, cx / stride - col as f64),
                        (iy, cy / stride - row as f64),
                    ];
                    for (i, target) in targets {
                        let sv = sigmoid_scalar(t[i]);
                        let d = sv - target;
                        value += LAMBDA_COORD * d * d;
                        grad[i] = 2.0 * LAMBDA_COORD * d * sv * (1.0 - sv);
                    }
                    for (i, target) in [(iw, (g.bbox.w / anchor[0]).ln()), (ih, (g.bbox.h / anchor[1]).ln())] {
                        let d = t[i] - target;
                        value += LAMBDA_COORD * d * d;
                        grad[i] = 2.0 * LAMBDA_COORD * d;
                    }
                    value += softplus(-obj);
                    grad[io] = sigmoid_scalar(obj) - 1.0;
                } else {
                    let decoded = BBox::from_center(
                        (col as f64 + sigmoid_scalar(t[ix])) * stride,
                        (row as f64 + sigmoid_scalar(t[iy])) * stride,
                        anchor[0] * t[iw].exp(),
                        anchor[1] * t[ih].exp(),
                    );
                    if all.iter().any(|g| decoded.iou(&g.bbox) > IGNORE_IOU) {
                        continue;
                    }
                    value += LAMBDA_NOOBJ * softplus(obj);
                    grad[io] = LAMBDA_NOOBJ * sigmoid_scalar(obj);
                }
            }
        }
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(shape.to_vec(), grad)?,
        skipped,
        outside,
    })
}

struct LossOp {
    grad: Tensor,
}

impl CustomOp for LossOp {
    fn name(&self) -> &str {
        "detection_loss"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad_out.item()?;
        Ok(vec![Some(self.grad.map(|v| v * g))])
    }
}

/// Records [`scale_loss`] of the grid held by `grid` as one tape node.
pub fn record_loss(
    tape: &mut Tape,
    grid: Var,
    anchors: &[[f64; 2]],
    assigned: &[GroundTruth],
    all: &[GroundTruth],
    input_size: usize,
) -> Result<(Var, LossOutput)> {
    let raw = RawGrid {
        tensor: tape.value(grid).clone(),
        anchors: anchors.to_vec(),
    };
    let out = scale_loss(&raw, assigned, all, input_size)?;
    let var = tape.custom(
        &[grid],
        Tensor::scalar(out.value),
        Box::new(LossOp {
            grad: out.grad.clone(),
        }),
    );
    Ok((var, out))
}
