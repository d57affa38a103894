//! On-disk datasets: one directory per video holding `frame_%05d.ppm` (P6)
//! and `gt/gt.txt` in MOT format, plus `dataset.json` at the root.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{emit_mot_gt, parse_mot_gt, DatasetConfig, MotOptions, Video};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_ppm<W: Write>(mut w: W, frame: &Tensor) -> std::io::Result<()> {
    let (c, h, wd) = frame
        .chw()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    if c != 3 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "PPM frames need 3 channels",
        ));
    }
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let d = frame.data();
    let mut buf = Vec::with_capacity(3 * h * wd);
    for p in 0..h * wd {
        for ch in 0..3 {
            buf.push((d[ch * h * wd + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&buf)
}

fn header_token<R: BufRead>(r: &mut R) -> std::io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let ch = byte[0] as char;
        if ch == '#' {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else if ch.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(ch);
        }
    }
}

pub fn read_ppm<R: BufRead>(mut r: R) -> std::io::Result<Tensor> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    if header_token(&mut r)? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let mut num = || -> std::io::Result<usize> {
        header_token(&mut r)?
            .parse()
            .map_err(|_| bad("bad PPM header"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let mut buf = vec![0u8; 3 * w * h];
    r.read_exact(&mut buf)?;
    let mut data = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + p] = f64::from(buf[3 * p + ch]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(|e| bad(&e.to_string()))
}

pub fn save_dataset(dir: &Path, config: Option<&DatasetConfig>, videos: &[Video]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(cfg) = config {
        let p = dir.join("dataset.json");
        fs::write(&p, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
    }
    for v in videos {
        let vdir = dir.join(&v.name);
        let gdir = vdir.join("gt");
        fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
        for (i, f) in v.frames.iter().enumerate() {
            let p = vdir.join(format!("frame_{i:05}.ppm"));
            let file = File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(file);
            write_ppm(&mut w, f)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&p, e))?;
        }
        let p = gdir.join("gt.txt");
        let file = File::create(&p).map_err(|e| Error::io(&p, e))?;
        let mut w = BufWriter::new(file);
        emit_mot_gt(&mut w, &v.gt)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Loads every video directory (one containing `gt/gt.txt`) under `dir`,
/// sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Video>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("gt").join("gt.txt").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::contract(format!(
            "{} holds no video directories with gt/gt.txt",
            dir.display()
        )));
    }
    names.iter().map(|n| load_video(&dir.join(n), n)).collect()
}

fn load_video(vdir: &Path, name: &str) -> Result<Video> {
    let mut frames = Vec::new();
    loop {
        let p = vdir.join(format!("frame_{:05}.ppm", frames.len()));
        if !p.is_file() {
            break;
        }
        let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
        frames.push(read_ppm(BufReader::new(f)).map_err(|e| Error::io(&p, e))?);
    }
    let gp = vdir.join("gt").join("gt.txt");
    let f = File::open(&gp).map_err(|e| Error::io(&gp, e))?;
    let parsed = parse_mot_gt(BufReader::new(f), &MotOptions::default())?;
    let mut annotated = vec![false; frames.len()];
    let mut gt = Vec::with_capacity(parsed.rows.len());
    for g in parsed.rows {
        if g.frame_index < frames.len() {
            annotated[g.frame_index] = true;
            gt.push(g);
        }
    }
    // generated datasets annotate every frame, including empty ones
    if vdir.parent().is_some_and(|p| p.join("dataset.json").is_file()) {
        annotated.iter_mut().for_each(|a| *a = true);
    }
    Ok(Video {
        name: name.to_string(),
        frames,
        gt,
        annotated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSceneConfig};

    #[test]
    fn ppm_round_trip_is_exact_for_quantized_frames() {
        let t = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
        let mut buf = Vec::new();
        write_ppm(&mut buf, &t).unwrap();
        assert!(buf.starts_with(b"P6\n7 5\n255\n"));
        let back = read_ppm(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6 # comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let t = read_ppm(bytes.as_slice()).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = DatasetConfig {
            scene: SyntheticSceneConfig {
                frames: 6,
                seed: 5,
                ..Default::default()
            },
            videos: 2,
        };
        let videos = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), Some(&cfg), &videos).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in videos.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.gt, b.gt);
            assert!(b.annotated.iter().all(|&x| x));
        }
    }
}
