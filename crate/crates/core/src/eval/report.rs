use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{interpolated_ap, pr_curve, proneness_curve, split_tp, Matching, PrPoint, Variant};
use crate::data::GroundTruth;
use crate::detector::Mode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp_hidden: usize,
    pub tp_visible: usize,
    pub gt: usize,
    pub gt_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub iou_threshold: f64,
    pub ap_all: f64,
    pub ap_hidden: f64,
    pub ap_visible: f64,
    /// Variants whose curve had no points (their AP is reported as 0).
    pub empty_curves: Vec<Variant>,
    pub counts: TpCounts,
    /// Share of ground-truth boxes that are hidden.
    pub hidden_fraction: f64,
    #[serde(skip)]
    pub curve_all: Vec<PrPoint>,
    #[serde(skip)]
    pub curve_hidden: Vec<PrPoint>,
    #[serde(skip)]
    pub curve_visible: Vec<PrPoint>,
    #[serde(skip)]
    pub proneness: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn from_matching(m: &Matching, gts: &[GroundTruth], mode: Mode, iou_threshold: f64) -> Self {
        let curves = Variant::ALL.map(|v| pr_curve(&m.records, m.total_gt, v));
        let aps = curves.each_ref().map(|c| interpolated_ap(c));
        let (tp_hidden, tp_visible) = split_tp(&m.records).last().copied().unwrap_or((0, 0));
        let gt_hidden = gts.iter().filter(|g| g.is_hidden()).count();
        let [curve_all, curve_hidden, curve_visible] = curves;
        Self {
            mode,
            iou_threshold,
            ap_all: aps[0].value,
            ap_hidden: aps[1].value,
            ap_visible: aps[2].value,
            empty_curves: Variant::ALL
                .iter()
                .zip(&aps)
                .filter(|(_, a)| a.empty)
                .map(|(&v, _)| v)
                .collect(),
            counts: TpCounts {
                tp: tp_hidden + tp_visible,
                fp: m.records.len() - tp_hidden - tp_visible,
                fn_: m.false_negatives,
                tp_hidden,
                tp_visible,
                gt: m.total_gt,
                gt_hidden,
            },
            hidden_fraction: if gts.is_empty() {
                0.0
            } else {
                gt_hidden as f64 / gts.len() as f64
            },
            curve_all,
            curve_hidden,
            curve_visible,
            proneness: proneness_curve(&m.records, m.total_gt),
        }
    }

    pub fn curve(&self, v: Variant) -> &[PrPoint] {
        match v {
            Variant::All => &self.curve_all,
            Variant::Hidden => &self.curve_hidden,
            Variant::Visible => &self.curve_visible,
        }
    }

    pub fn ap(&self, v: Variant) -> f64 {
        match v {
            Variant::All => self.ap_all,
            Variant::Hidden => self.ap_hidden,
            Variant::Visible => self.ap_visible,
        }
    }
}

pub fn curve_csv(curve: &[PrPoint]) -> String {
    let mut s = String::from("rank,confidence,precision,recall\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{},{}", p.rank, p.confidence, p.precision, p.recall);
    }
    s
}

pub fn proneness_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("recall,tp_visible_ratio\n");
    for (r, y) in points {
        let _ = writeln!(s, "{r},{y}");
    }
    s
}

/// Writes `report.json`, `curve_{all,hidden,visible}.csv` and
/// `proneness.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![("report.json".to_string(), serde_json::to_string_pretty(report)? + "\n")];
    for v in Variant::ALL {
        files.push((format!("curve_{}.csv", v.name()), curve_csv(report.curve(v))));
    }
    files.push(("proneness.csv".to_string(), proneness_csv(&report.proneness)));
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn csv_rows(path: &Path, header: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(header) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{}: expected header {header:?}", path.display()),
        });
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: Vec<f64> = l.split(',').map(|f| f.trim().parse()).collect::<Result<_, _>>().map_err(|_| {
                Error::Parse {
                    line: i + 1,
                    msg: format!("{}: non-numeric field", path.display()),
                }
            })?;
            if row.len() != width {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("{}: expected {width} fields, found {}", path.display(), row.len()),
                });
            }
            Ok(row)
        })
        .collect()
}

/// Reads a report directory written by [`write_report`], curves included.
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let p = dir.join("report.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut report: EvalReport = serde_json::from_str(&text)?;
    for v in Variant::ALL {
        let rows = csv_rows(
            &dir.join(format!("curve_{}.csv", v.name())),
            "rank,confidence,precision,recall",
            4,
        )?;
        let curve = rows
            .into_iter()
            .map(|r| PrPoint {
                rank: r[0] as usize,
                confidence: r[1],
                precision: r[2],
                recall: r[3],
            })
            .collect();
        match v {
            Variant::All => report.curve_all = curve,
            Variant::Hidden => report.curve_hidden = curve,
            Variant::Visible => report.curve_visible = curve,
        }
    }
    report.proneness = csv_rows(&dir.join("proneness.csv"), "recall,tp_visible_ratio", 2)?
        .into_iter()
        .map(|r| (r[0], r[1]))
        .collect();
    Ok(report)
}
