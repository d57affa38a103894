//! MOT challenge ground truth: one row per box,
//! `frame,id,bb_left,bb_top,bb_width,bb_height,conf,class,visibility`,
//! frames 1-based.

use std::io::{BufRead, Write};

use super::GroundTruth;
use crate::detector::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MotOptions {
    /// Classes to keep; `None` keeps all.
    pub classes: Option<Vec<i64>>,
}

impl Default for MotOptions {
    /// Pedestrians only.
    fn default() -> Self {
        Self {
            classes: Some(vec![1]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MotParse {
    pub rows: Vec<GroundTruth>,
    /// Rows whose visibility was outside `[0, 1]` and got clamped.
    pub clamped: usize,
    /// Rows dropped for `conf == 0`.
    pub ignored: usize,
    /// Rows dropped by the class filter.
    pub filtered: usize,
}

pub fn parse_mot_gt<R: BufRead>(reader: R, opts: &MotOptions) -> Result<MotParse> {
    let mut out = MotParse::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", fields.len())));
        }
        let int = |idx: usize, name: &str| -> Result<i64> {
            fields[idx]
                .parse::<i64>()
                .or_else(|_| {
                    // some exports write integral fields as floats
                    fields[idx]
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.fract() == 0.0)
                        .map(|v| v as i64)
                        .ok_or(())
                })
                .map_err(|_| err(format!("bad {name} {:?}", fields[idx])))
        };
        let float = |idx: usize, name: &str| -> Result<f64> {
            fields[idx]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {name} {:?}", fields[idx])))
        };

        let frame = int(0, "frame")?;
        if frame < 1 {
            return Err(err(format!("frame {frame} is not 1-based")));
        }
        let track_id = int(1, "id")?;
        let bbox = BBox::new(
            float(2, "bb_left")?,
            float(3, "bb_top")?,
            float(4, "bb_width")?,
            float(5, "bb_height")?,
        );
        let conf = float(6, "conf")?;
        let class_id = int(7, "class")?;
        let mut visibility = float(8, "visibility")?;

        if conf == 0.0 {
            out.ignored += 1;
            continue;
        }
        if let Some(classes) = &opts.classes {
            if !classes.contains(&class_id) {
                out.filtered += 1;
                continue;
            }
        }
        if !(0.0..=1.0).contains(&visibility) {
            visibility = visibility.clamp(0.0, 1.0);
            out.clamped += 1;
        }
        out.rows.push(GroundTruth {
            frame_index: (frame - 1) as usize,
            track_id,
            bbox,
            visibility,
            class_id,
        });
    }
    if out.clamped > 0 {
        log::warn!("clamped {} visibility values to [0, 1]", out.clamped);
    }
    Ok(out)
}

/// Writes rows in MOT order, conf 1, floats in shortest round-trip form.
pub fn emit_mot_gt<W: Write>(mut w: W, rows: &[GroundTruth]) -> std::io::Result<()> {
    for g in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},1,{},{}",
            g.frame_index + 1,
            g.track_id,
            g.bbox.x,
            g.bbox.y,
            g.bbox.w,
            g.bbox.h,
            g.class_id,
            g.visibility
        )?;
    }
    Ok(())
}
