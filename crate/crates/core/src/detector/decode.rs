use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{BBox, RawGrid};
use crate::tensor::ops::sigmoid_scalar;

/// IoU above which evaluation-time NMS suppresses a box.
pub const NMS_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// `σ(objectness logit)`
    pub confidence: f64,
    pub frame_index: usize,
    pub scale: usize,
    /// `(row·S + col)·A + anchor` within its scale.
    pub cell: usize,
}

impl Detection {
    /// Descending confidence, then frame, scale and cell.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .confidence
            .total_cmp(&self.confidence)
            .then(self.frame_index.cmp(&other.frame_index))
            .then(self.scale.cmp(&other.scale))
            .then(self.cell.cmp(&other.cell))
    }
}

/// Converts one scale's raw grid into boxes with confidence at least
/// `conf_threshold`.
pub fn decode(
    grid: &RawGrid,
    conf_threshold: f64,
    input_size: usize,
    frame_index: usize,
    scale: usize,
) -> Vec<Detection> {
    let s = grid.size();
    let stride = input_size as f64 / s as f64;
    let n_anchors = grid.anchors.len();
    let mut out = Vec::new();
    for row in 0..s {
        for col in 0..s {
            for (a, anchor) in grid.anchors.iter().enumerate() {
                let confidence = sigmoid_scalar(grid.value(a, 4, row, col));
                if confidence < conf_threshold {
                    continue;
                }
                let cx = (col as f64 + sigmoid_scalar(grid.value(a, 0, row, col))) * stride;
                let cy = (row as f64 + sigmoid_scalar(grid.value(a, 1, row, col))) * stride;
                let w = anchor[0] * grid.value(a, 2, row, col).exp();
                let h = anchor[1] * grid.value(a, 3, row, col).exp();
                out.push(Detection {
                    bbox: BBox::from_center(cx, cy, w, h),
                    confidence,
                    frame_index,
                    scale,
                    cell: (row * s + col) * n_anchors + a,
                });
            }
        }
    }
    out
}

/// Greedy per-frame non-maximum suppression.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(Detection::rank_cmp);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.frame_index == d.frame_index && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from(t: Tensor) -> RawGrid {
        RawGrid {
            tensor: t,
            anchors: vec![[24.0, 24.0]],
        }
    }

    fn det(x: f64, conf: f64, cell: usize) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
            confidence: conf,
            frame_index: 0,
            scale: 0,
            cell,
        }
    }

    #[test]
    fn background_grid_is_empty() {
        let g = grid_from(Tensor::from_fn(&[5, 4, 4], |i| if i / 16 == 4 { -1e6 } else { 0.3 }));
        for thr in [1e-9, 0.1, 0.5, 1.0] {
            assert!(decode(&g, thr, 64, 0, 0).is_empty());
        }
        assert_eq!(decode(&g, 0.0, 64, 0, 0).len(), 16);
    }

    #[test]
    fn cell_origin_center() {
        let g = grid_from(Tensor::zeros(&[5, 4, 4]));
        let d = decode(&g, 0.0, 64, 3, 0);
        let first = d.iter().find(|d| d.cell == 0).unwrap();
        assert_eq!(first.bbox.center(), (8.0, 8.0));
        assert_eq!(first.bbox.w, 24.0);
        assert_eq!(first.confidence, 0.5);
        assert_eq!(first.frame_index, 3);
    }

    /// Independent per-cell decode written against the raw tensor layout.
    fn naive_decode(t: &Tensor, thr: f64, input: usize, anchor: [f64; 2]) -> Vec<(usize, [f64; 5])> {
        let s = t.shape()[1];
        let st = input as f64 / s as f64;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let at = |c: usize, i: usize, j: usize| t.data()[c * s * s + i * s + j];
        let mut out = vec![];
        for i in 0..s {
            for j in 0..s {
                let conf = sig(at(4, i, j));
                if conf >= thr {
                    let w = anchor[0] * at(2, i, j).exp();
                    let h = anchor[1] * at(3, i, j).exp();
                    let cx = (j as f64 + sig(at(0, i, j))) * st;
                    let cy = (i as f64 + sig(at(1, i, j))) * st;
                    out.push((i * s + j, [cx - w / 2.0, cy - h / 2.0, w, h, conf]));
                }
            }
        }
        out
    }

    #[test]
    fn random_grid_matches_naive_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = Tensor::uniform(&[5, 4, 4], 3.0, &mut rng);
            let thr = rng.gen_range(0.0..1.0);
            let got = decode(&grid_from(t.clone()), thr, 64, 0, 0);
            let want = naive_decode(&t, thr, 64, [24.0, 24.0]);
            assert_eq!(got.len(), want.len());
            for (g, (cell, v)) in got.iter().zip(&want) {
                assert_eq!(g.cell, *cell);
                let gv = [g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h, g.confidence];
                for (a, b) in gv.iter().zip(v) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nms_examples() {
        let kept = nms(&[det(0.0, 0.8, 1), det(0.0, 0.9, 2)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let disjoint = [det(0.0, 0.3, 0), det(20.0, 0.4, 1), det(40.0, 0.5, 2)];
        assert_eq!(nms(&disjoint, 0.5).len(), 3);

        let mut other_frame = det(0.0, 0.7, 0);
        other_frame.frame_index = 1;
        assert_eq!(nms(&[det(0.0, 0.9, 0), other_frame], 0.5).len(), 2);
    }

    /// Exhaustive reference: a box survives iff no higher-ranked *surviving*
    /// box overlaps it, evaluated by recursion over the ranking.
    fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        // selection sort on the rank key
        for i in 0..order.len() {
            let mut best = i;
            for j in i + 1..order.len() {
                if dets[order[j]].rank_cmp(&dets[order[best]]) == Ordering::Less {
                    best = j;
                }
            }
            order.swap(i, best);
        }
        let mut alive = vec![true; dets.len()];
        for (pos, &i) in order.iter().enumerate() {
            for &j in &order[..pos] {
                if alive[j] && dets[j].frame_index == dets[i].frame_index && dets[j].bbox.iou(&dets[i].bbox) > thr {
                    alive[i] = false;
                }
            }
        }
        order.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
    }

    fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
        (0..n)
            .map(|k| Detection {
                bbox: BBox::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), rng.gen_range(5.0..25.0), rng.gen_range(5.0..25.0)),
                // coarse confidences so ties occur
                confidence: f64::from(rng.gen_range(0..5u8)) / 4.0,
                frame_index: rng.gen_range(0..2),
                scale: 0,
                cell: k,
            })
            .collect()
    }

    #[test]
    fn random_sets_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let d = random_dets(&mut rng, 20);
            assert_eq!(nms(&d, 0.5), reference_nms(&d, 0.5));
        }
    }

    proptest! {
        #[test]
        fn nms_is_permutation_invariant(seed in any::<u64>(), n in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_dets(&mut rng, n);
            let mut shuffled = d.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            prop_assert_eq!(nms(&d, 0.5), nms(&shuffled, 0.5));
        }
    }
}
