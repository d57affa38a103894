//! Detection evaluation with a hidden/visible split of true positives.
//!
//! Detections are matched per frame in descending confidence at IoU 0.7.
//! Every true positive inherits the visibility of its ground-truth box and is
//! counted as hidden below 0.5 and visible otherwise. Along the ranked sweep,
//! with `FN = total_gt − TP`:
//!
//! ```text
//! all      P = TP / (TP + FP)              R = TP / (TP + FN)
//! visible  P = TPv / (TPv + FP)            R = TPv / (TPv + FN)
//! hidden   P = TPh / (TPh + FP)            R = TPh / (TPh + FN)
//! ```
//!
//! The variants share the unfiltered FP stream and the overall FN, so their
//! recall generally stays below 1.

mod report;

pub use report::{curve_csv, proneness_csv, read_report, write_report, EvalReport, TpCounts};

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, Video, HIDDEN_BELOW};
use crate::detector::{decode, nms, BBox, Detection, Mode, ModelParams, NMS_IOU};
use crate::error::{Error, Result};

/// IoU a detection needs with a ground-truth box to count as a true positive.
pub const MATCH_IOU: f64 = 0.7;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// Index into the detections passed to [`match_detections`].
    pub detection: usize,
    pub confidence: f64,
    pub outcome: Outcome,
    /// Index of the matched ground-truth box.
    pub gt: Option<usize>,
    pub visibility: Option<f64>,
}

impl MatchRecord {
    pub fn is_tp(&self) -> bool {
        self.outcome == Outcome::TruePositive
    }

    pub fn is_hidden_tp(&self) -> bool {
        self.is_tp() && self.visibility.is_some_and(|v| v < HIDDEN_BELOW)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// One record per detection, in rank order.
    pub records: Vec<MatchRecord>,
    pub false_negatives: usize,
    pub total_gt: usize,
}

/// Greedy matching: detections in rank order, each taking the unmatched box
/// of its frame with the highest IoU (lower index on ties) if that IoU
/// reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Matching {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[a].rank_cmp(&dets[b]).then(a.cmp(&b)));

    let mut by_frame: HashMap<usize, Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_frame.entry(g.frame_index).or_default().push(j);
    }
    let mut taken = vec![false; gts.len()];
    let mut records = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for &j in by_frame.get(&d.frame_index).map(Vec::as_slice).unwrap_or(&[]) {
            if taken[j] {
                continue;
            }
            let o = d.bbox.iou(&gts[j].bbox);
            if best.is_none_or(|(b, _)| o > b) {
                best = Some((o, j));
            }
        }
        let matched = best.filter(|&(o, _)| o >= iou_threshold).map(|(_, j)| j);
        if let Some(j) = matched {
            taken[j] = true;
        }
        records.push(MatchRecord {
            detection: i,
            confidence: d.confidence,
            outcome: if matched.is_some() {
                Outcome::TruePositive
            } else {
                Outcome::FalsePositive
            },
            gt: matched,
            visibility: matched.map(|j| gts[j].visibility),
        });
    }
    let tp = taken.iter().filter(|&&t| t).count();
    Matching {
        records,
        false_negatives: gts.len() - tp,
        total_gt: gts.len(),
    }
}

/// Cumulative `(TP_hidden, TP_visible)` after each rank.
pub fn split_tp(records: &[MatchRecord]) -> Vec<(usize, usize)> {
    let (mut h, mut v) = (0, 0);
    records
        .iter()
        .map(|r| {
            if r.is_hidden_tp() {
                h += 1;
            } else if r.is_tp() {
                v += 1;
            }
            (h, v)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    All,
    Hidden,
    Visible,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::All, Variant::Hidden, Variant::Visible];

    pub fn name(self) -> &'static str {
        match self {
            Variant::All => "all",
            Variant::Hidden => "hidden",
            Variant::Visible => "visible",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// 1-based position in the confidence ranking.
    pub rank: usize,
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall after every rank; ranks with a zero denominator are
/// left out.
pub fn pr_curve(records: &[MatchRecord], total_gt: usize, variant: Variant) -> Vec<PrPoint> {
    let split = split_tp(records);
    let mut fp = 0usize;
    let mut out = Vec::with_capacity(records.len());
    for (k, (r, &(th, tv))) in records.iter().zip(&split).enumerate() {
        if !r.is_tp() {
            fp += 1;
        }
        let tp = th + tv;
        let fneg = total_gt - tp;
        let num = match variant {
            Variant::All => tp,
            Variant::Hidden => th,
            Variant::Visible => tv,
        };
        let (pd, rd) = (num + fp, num + fneg);
        if pd == 0 || rd == 0 {
            continue;
        }
        out.push(PrPoint {
            rank: k + 1,
            confidence: r.confidence,
            precision: num as f64 / pd as f64,
            recall: num as f64 / rd as f64,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ap {
    pub value: f64,
    /// Set when the curve had no points and the value is a placeholder 0.
    pub empty: bool,
}

/// All-point interpolated average precision: for every distinct recall
/// `r_k` (ascending, `r_0 = 0`), `(r_k − r_{k−1})` times the best precision
/// at recall `≥ r_k`.
pub fn interpolated_ap(curve: &[PrPoint]) -> Ap {
    if curve.is_empty() {
        return Ap {
            value: 0.0,
            empty: true,
        };
    }
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best_after = vec![0.0f64; pts.len()];
    let mut run = 0.0f64;
    for i in (0..pts.len()).rev() {
        run = run.max(pts[i].1);
        best_after[i] = run;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        if r > prev {
            ap += (r - prev) * best_after[i];
            prev = r;
        }
    }
    Ap { value: ap, empty: false }
}

/// `(overall recall, TP_visible / TP)` after each rank with at least one TP.
pub fn proneness_curve(records: &[MatchRecord], total_gt: usize) -> Vec<(f64, f64)> {
    split_tp(records)
        .into_iter()
        .filter(|&(h, v)| h + v > 0)
        .map(|(h, v)| {
            let tp = (h + v) as f64;
            (tp / total_gt as f64, v as f64 / tp)
        })
        .collect()
}

/// Detections of one video, frame by frame: every anchor of every scale
/// decoded, per-frame NMS at [`NMS_IOU`], only annotated frames kept.
/// Detections with exactly zero confidence are dropped.
pub fn detect_video(model: &ModelParams, video: &Video, mode: Mode) -> Result<Vec<Detection>> {
    let mut stream = model.stream(mode);
    let mut out = Vec::new();
    for (f, frame) in video.frames.iter().enumerate() {
        let grids = stream.step(frame)?;
        if !video.annotated[f] {
            continue;
        }
        let mut dets = Vec::new();
        for (s, g) in grids.iter().enumerate() {
            dets.extend(decode(g, 0.0, model.config.input_size, f, s).into_iter().filter(|d| d.confidence > 0.0));
        }
        out.extend(nms(&dets, NMS_IOU));
    }
    Ok(out)
}

/// Full report from detections and ground truth sharing a frame key space.
pub fn build_report(dets: &[Detection], gts: &[GroundTruth], mode: Mode) -> EvalReport {
    let matching = match_detections(dets, gts, MATCH_IOU);
    EvalReport::from_matching(&matching, gts, mode, MATCH_IOU)
}

/// Evaluates `model` on `videos`; each video is streamed from its first
/// frame, with state threaded through in sequenced mode.
pub fn evaluate(model: &ModelParams, videos: &[Video], mode: Mode) -> Result<EvalReport> {
    if videos.iter().all(|v| v.is_empty()) {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let per_video: Vec<Vec<Detection>> = videos
        .par_iter()
        .map(|v| detect_video(model, v, mode))
        .collect::<Result<_>>()?;
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    let mut offset = 0;
    for (v, d) in videos.iter().zip(per_video) {
        dets.extend(d.into_iter().map(|d| Detection {
            frame_index: d.frame_index + offset,
            ..d
        }));
        gts.extend(v.gt.iter().filter(|g| g.frame_index < v.len()).map(|g| GroundTruth {
            frame_index: g.frame_index + offset,
            ..*g
        }));
        offset += v.len();
    }
    Ok(build_report(&dets, &gts, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{transfer_weights, BaseParams, DetectorConfig};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn det(frame: usize, bbox: BBox, confidence: f64) -> Detection {
        Detection {
            bbox,
            confidence,
            frame_index: frame,
            scale: 0,
            cell: 0,
        }
    }

    fn gt(frame: usize, bbox: BBox, visibility: f64) -> GroundTruth {
        GroundTruth {
            frame_index: frame,
            track_id: 0,
            bbox,
            visibility,
            class_id: 1,
        }
    }

    fn rec(tp: bool, vis: f64) -> MatchRecord {
        MatchRecord {
            detection: 0,
            confidence: 0.5,
            outcome: if tp { Outcome::TruePositive } else { Outcome::FalsePositive },
            gt: tp.then_some(0),
            visibility: tp.then_some(vis),
        }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_and_missing_matches() {
        let b = BBox::new(1.0, 2.0, 10.0, 12.0);
        let m = match_detections(&[det(0, b, 0.9)], &[gt(0, b, 1.0)], MATCH_IOU);
        assert!(m.records[0].is_tp());
        assert_eq!(m.false_negatives, 0);
        let m = match_detections(&[], &[gt(0, b, 1.0), gt(1, b, 0.2)], MATCH_IOU);
        assert_eq!(m.false_negatives, 2);
    }

    #[test]
    fn never_matches_across_frames() {
        let b = BBox::new(1.0, 2.0, 10.0, 12.0);
        let m = match_detections(&[det(1, b, 0.9)], &[gt(0, b, 1.0)], MATCH_IOU);
        assert!(!m.records[0].is_tp());
        assert_eq!(m.false_negatives, 1);
    }

    #[test]
    fn confident_detection_claims_the_box_first() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let close = BBox::new(0.5, 0.0, 10.0, 10.0);
        let exact = g;
        let m = match_detections(&[det(0, close, 0.9), det(0, exact, 0.3)], &[gt(0, g, 1.0)], MATCH_IOU);
        assert_eq!(m.records[0].detection, 0);
        assert!(m.records[0].is_tp());
        assert!(!m.records[1].is_tp());
    }

    #[test]
    fn equal_iou_prefers_lower_index() {
        let d = BBox::new(5.0, 0.0, 10.0, 10.0);
        let left = BBox::new(4.0, 0.0, 10.0, 10.0);
        let right = BBox::new(6.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[det(0, d, 0.9)], &[gt(0, right, 1.0), gt(0, left, 1.0)], MATCH_IOU);
        assert_eq!(m.records[0].gt, Some(0));
    }

    #[test]
    fn half_visible_counts_as_visible() {
        assert_eq!(split_tp(&[rec(true, 0.5)]), vec![(0, 1)]);
        assert_eq!(split_tp(&[rec(true, 0.4999)]), vec![(1, 0)]);
        assert_eq!(split_tp(&[rec(true, 1.0), rec(false, 0.0), rec(true, 1.0)]), vec![(0, 1), (0, 1), (0, 2)]);
    }

    #[test]
    fn hand_sweep() {
        let records = [rec(true, 1.0), rec(false, 0.0), rec(true, 1.0)];
        let c = pr_curve(&records, 2, Variant::All);
        let pr: Vec<(f64, f64)> = c.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(pr, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        let ap = interpolated_ap(&c);
        assert!((ap.value - 0.5 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_curves() {
        let perfect = [rec(true, 1.0), rec(true, 1.0)];
        let c = pr_curve(&perfect, 2, Variant::All);
        assert_eq!((c[1].recall, c[1].precision), (1.0, 1.0));
        assert_eq!(interpolated_ap(&c).value, 1.0);

        let junk = [rec(false, 0.0), rec(false, 0.0)];
        assert!(pr_curve(&junk, 3, Variant::All).iter().all(|p| p.precision == 0.0));

        // no visible TP and no FP yet: visible precision undefined
        let hidden_first = [rec(true, 0.1), rec(false, 0.0)];
        let v = pr_curve(&hidden_first, 2, Variant::Visible);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rank, 2);

        let empty = interpolated_ap(&[]);
        assert!(empty.empty && empty.value == 0.0);
    }

    #[test]
    fn variant_recall_uses_overall_misses() {
        // 4 gt: one hidden TP, one visible TP, two missed
        let records = [rec(true, 0.2), rec(true, 0.9)];
        let h = pr_curve(&records, 4, Variant::Hidden);
        // rank 2: TPh = 1, FN = 2
        assert_eq!(h.last().unwrap().recall, 1.0 / 3.0);
        let v = pr_curve(&records, 4, Variant::Visible);
        assert_eq!(v.last().unwrap().recall, 1.0 / 3.0);
    }

    #[test]
    fn proneness_endpoints() {
        let visible = [rec(true, 0.9), rec(false, 0.0), rec(true, 0.7)];
        assert!(proneness_curve(&visible, 2).iter().all(|&(_, y)| y == 1.0));
        let hidden = [rec(false, 0.0), rec(true, 0.1), rec(true, 0.3)];
        let p = proneness_curve(&hidden, 3);
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|&(_, y)| y == 0.0));
        // every gt recalled: final value is the visible share of gt
        let mixed = [rec(true, 0.1), rec(true, 0.9), rec(true, 0.6), rec(true, 0.3), rec(true, 1.0)];
        assert_eq!(proneness_curve(&mixed, 5).last().unwrap(), &(1.0, 0.6));
    }

    /// Midpoint Riemann sum of the interpolated precision over recall.
    fn riemann(curve: &[PrPoint], step: f64) -> f64 {
        let top = curve.iter().map(|p| p.recall).fold(0.0, f64::max);
        let n = (top / step).ceil() as usize;
        let mut area = 0.0;
        for i in 0..n {
            let r = (i as f64 + 0.5) * step;
            let p = curve.iter().filter(|p| p.recall >= r).map(|p| p.precision).fold(0.0, f64::max);
            area += p * step.min(top - i as f64 * step);
        }
        area
    }

    fn outcomes() -> impl Strategy<Value = (Vec<(bool, f64)>, usize)> {
        (prop::collection::vec((any::<bool>(), 0.0..1.0f64), 1..12), 0usize..4)
            .prop_map(|(o, extra)| {
                let tps = o.iter().filter(|x| x.0).count();
                (o, tps + extra)
            })
    }

    proptest! {
        #[test]
        fn ap_matches_dense_riemann_sum((o, total) in outcomes()) {
            prop_assume!(total > 0);
            let records: Vec<MatchRecord> = o.iter().map(|&(tp, v)| rec(tp, v)).collect();
            for variant in Variant::ALL {
                let c = pr_curve(&records, total, variant);
                let ap = interpolated_ap(&c).value;
                prop_assert!((0.0..=1.0).contains(&ap));
                prop_assert!((ap - riemann(&c, 1e-4)).abs() < 1e-3);
            }
        }

        #[test]
        fn split_partitions_tp_and_recall_is_monotone((o, total) in outcomes()) {
            prop_assume!(total > 0);
            let records: Vec<MatchRecord> = o.iter().map(|&(tp, v)| rec(tp, v)).collect();
            let mut tp = 0;
            for (r, (h, v)) in records.iter().zip(split_tp(&records)) {
                tp += usize::from(r.is_tp());
                prop_assert_eq!(h + v, tp);
            }
            for variant in Variant::ALL {
                let c = pr_curve(&records, total, variant);
                prop_assert!(c.windows(2).all(|w| w[0].recall <= w[1].recall));
                prop_assert!(c.iter().all(|p| (0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall)));
            }
        }

        #[test]
        fn stricter_threshold_never_adds_tp(
            boxes in prop::collection::vec((0.0..20.0f64, 0.0..20.0f64, 2.0..10.0f64, 2.0..10.0f64, 0usize..2, 0.0..1.0f64), 1..15),
            split in 0usize..15,
            t1 in 0.1..0.9f64,
            dt in 0.0..0.5f64,
        ) {
            let k = split.min(boxes.len());
            let gts: Vec<GroundTruth> = boxes[..k].iter().map(|&(x, y, w, h, f, v)| gt(f, BBox::new(x, y, w, h), v)).collect();
            let dets: Vec<Detection> = boxes[k..].iter().map(|&(x, y, w, h, f, c)| det(f, BBox::new(x, y, w, h), c)).collect();
            let count = |t: f64| match_detections(&dets, &gts, t).records.iter().filter(|r| r.is_tp()).count();
            prop_assert!(count(t1 + dt) <= count(t1));
        }
    }

    #[test]
    fn null_model_finds_nothing() {
        let base = BaseParams::init(DetectorConfig::default(), 1).unwrap();
        let mut model = transfer_weights(&base, 2).unwrap();
        let head = &mut model.scales[0].head;
        head.kernel = Tensor::zeros(head.kernel.shape());
        head.bias = Tensor::new(vec![5], vec![0.0, 0.0, 0.0, 0.0, -1e4]).unwrap();
        let video = crate::data::generate_video(&crate::data::SyntheticSceneConfig {
            frames: 4,
            ..Default::default()
        })
        .unwrap();
        let r = evaluate(&model, std::slice::from_ref(&video), Mode::Sequenced).unwrap();
        assert_eq!(r.counts.tp + r.counts.fp, 0);
        assert_eq!(r.counts.fn_, video.gt.len());
        assert_eq!(r.ap_all, 0.0);
    }

    #[test]
    fn modes_agree_on_single_frame_videos() {
        let base = BaseParams::init(DetectorConfig::default(), 3).unwrap();
        let model = transfer_weights(&base, 4).unwrap();
        let videos: Vec<Video> = (0..3)
            .map(|s| {
                crate::data::generate_video(&crate::data::SyntheticSceneConfig {
                    frames: 1,
                    seed: s,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect();
        let a = evaluate(&model, &videos, Mode::Plain).unwrap();
        let b = evaluate(&model, &videos, Mode::Sequenced).unwrap();
        assert_eq!(EvalReport { mode: Mode::Plain, ..b }, a);
        assert!(evaluate(&model, &[], Mode::Plain).is_err());
    }
}
