//! Synthetic videos of textured rectangles moving behind static occluders.
//!
//! Visibility is exact: the visible area of an object is its area inside the
//! image minus the union of the occluders covering it, computed by
//! inclusion–exclusion over axis-aligned rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, Video};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    pub image_size: usize,
    /// Inclusive range of object count.
    pub objects: [usize; 2],
    /// Object width/height range in px.
    pub object_size: [f64; 2],
    /// Speed range in px/frame.
    pub speed: [f64; 2],
    /// Per-frame positional jitter, uniform in `±jitter` px.
    pub jitter: f64,
    /// Inclusive range of occluder count.
    pub occluders: [usize; 2],
    pub occluder_width: [f64; 2],
    pub occluder_height: [f64; 2],
    pub frames: usize,
    /// How far (px) an object may travel past the image border before it
    /// bounces; 0 keeps objects fully inside.
    pub border_margin: f64,
    /// Count objects drawn later as occluders of earlier ones.
    pub mutual_occlusion: bool,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            objects: [1, 2],
            object_size: [20.0, 28.0],
            speed: [0.5, 1.5],
            jitter: 0.15,
            occluders: [1, 2],
            occluder_width: [14.0, 22.0],
            occluder_height: [30.0, 64.0],
            frames: 100,
            border_margin: 0.0,
            mutual_occlusion: false,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("object_size", self.object_size),
            ("speed", self.speed),
            ("occluder_width", self.occluder_width),
            ("occluder_height", self.occluder_height),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::contract(format!("{name} range [{lo}, {hi}] is empty or invalid")));
            }
        }
        if self.objects[0] > self.objects[1] || self.occluders[0] > self.occluders[1] {
            return Err(Error::contract("count ranges must be non-empty"));
        }
        let n = self.image_size as f64;
        if self.image_size == 0 || self.object_size[0] <= 0.0 || self.object_size[1] > n + 2.0 * self.border_margin {
            return Err(Error::contract("objects must fit inside the image"));
        }
        if self.occluder_width[1] > n || self.occluder_height[1] > n {
            return Err(Error::contract("occluders must fit inside the image"));
        }
        if self.frames == 0 {
            return Err(Error::contract("scene needs at least one frame"));
        }
        Ok(())
    }
}

/// Many videos from one scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SyntheticSceneConfig,
    pub videos: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SyntheticSceneConfig::default(),
            videos: 16,
        }
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Video>> {
    (0..cfg.videos)
        .map(|i| {
            let scene = SyntheticSceneConfig {
                seed: mix_seed(cfg.scene.seed, i as u64),
                ..cfg.scene.clone()
            };
            let mut v = generate_video(&scene)?;
            v.name = format!("seq_{i:03}");
            Ok(v)
        })
        .collect()
}

/// Area of the union of `rects`, by inclusion–exclusion with pruning of
/// empty intersections.
fn union_area(rects: &[BBox]) -> f64 {
    fn walk(rects: &[BBox], start: usize, acc: Option<BBox>, depth: usize, total: &mut f64) {
        for i in start..rects.len() {
            let inter = match acc {
                None => Some(rects[i]),
                Some(a) => a.intersection(&rects[i]),
            };
            if let Some(r) = inter {
                let sign = if depth.is_multiple_of(2) { 1.0 } else { -1.0 };
                *total += sign * r.area();
                walk(rects, i + 1, Some(r), depth + 1, total);
            }
        }
    }
    let mut total = 0.0;
    walk(rects, 0, None, 0, &mut total);
    total
}

/// Visible fraction of `bbox` in a square `image_size` frame with the given
/// occluders drawn on top of it.
pub fn visibility(bbox: &BBox, image_size: usize, occluders: &[BBox]) -> f64 {
    let area = bbox.area();
    if area <= 0.0 {
        return 0.0;
    }
    let n = image_size as f64;
    let inside = if bbox.x >= 0.0 && bbox.y >= 0.0 && bbox.right() <= n && bbox.bottom() <= n {
        *bbox
    } else {
        match bbox.intersection(&BBox::new(0.0, 0.0, n, n)) {
            Some(b) => b,
            None => return 0.0,
        }
    };
    let covering: Vec<BBox> = occluders.iter().filter_map(|o| o.intersection(&inside)).collect();
    let visible = inside.area() - union_area(&covering);
    (visible / area).clamp(0.0, 1.0)
}

const NOISE_STREAM: u64 = 0x006e_6f69_7365;

struct Track {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    color: [f64; 3],
    checker: f64,
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *pos = lo;
        return;
    }
    for _ in 0..4 {
        if *pos < lo {
            *pos = 2.0 * lo - *pos;
            *vel = vel.abs();
        } else if *pos > hi {
            *pos = 2.0 * hi - *pos;
            *vel = -vel.abs();
        } else {
            return;
        }
    }
    *pos = pos.clamp(lo, hi);
}

const OCCLUDER_RGB: [f64; 3] = [0.5, 0.5, 0.5];

/// Geometry of a video before rendering.
struct Scene {
    occluders: Vec<BBox>,
    tracks: Vec<Track>,
    /// Per frame, the box of every track.
    boxes: Vec<Vec<BBox>>,
    gt: Vec<GroundTruth>,
}

/// Draws occluders and object motion. Pixel noise comes from a separate
/// stream, so the geometry does not depend on rendering.
fn simulate(cfg: &SyntheticSceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.image_size as f64;
    let m = cfg.border_margin;

    let n_occ = rng.gen_range(cfg.occluders[0]..=cfg.occluders[1]);
    let occluders: Vec<BBox> = (0..n_occ)
        .map(|_| {
            let w = uniform(&mut rng, cfg.occluder_width);
            let h = uniform(&mut rng, cfg.occluder_height);
            BBox::new(uniform(&mut rng, [0.0, n - w]), uniform(&mut rng, [0.0, n - h]), w, h)
        })
        .collect();

    let n_obj = rng.gen_range(cfg.objects[0]..=cfg.objects[1]);
    let mut tracks: Vec<Track> = (0..n_obj)
        .map(|_| {
            let w = uniform(&mut rng, cfg.object_size);
            let h = uniform(&mut rng, cfg.object_size);
            let speed = uniform(&mut rng, cfg.speed);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            Track {
                x: uniform(&mut rng, [-m, n + m - w]),
                y: uniform(&mut rng, [-m, n + m - h]),
                w,
                h,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                color: [
                    rng.gen_range(0.45..1.0),
                    rng.gen_range(0.45..1.0),
                    rng.gen_range(0.0..0.35),
                ],
                checker: rng.gen_range(3.0..6.0),
            }
        })
        .collect();
    // vary the dominant channel per object
    for (i, t) in tracks.iter_mut().enumerate() {
        t.color.rotate_left(i % 3);
    }

    let size = cfg.image_size;
    let mut boxes = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::with_capacity(cfg.frames * tracks.len());
    for f in 0..cfg.frames {
        if f > 0 {
            for t in &mut tracks {
                t.x += t.vx + uniform(&mut rng, [-cfg.jitter, cfg.jitter]);
                t.y += t.vy + uniform(&mut rng, [-cfg.jitter, cfg.jitter]);
                reflect(&mut t.x, &mut t.vx, -m, n + m - t.w);
                reflect(&mut t.y, &mut t.vy, -m, n + m - t.h);
            }
        }
        let frame_boxes: Vec<BBox> = tracks.iter().map(|t| BBox::new(t.x, t.y, t.w, t.h)).collect();
        for (i, bbox) in frame_boxes.iter().enumerate() {
            let vis = if cfg.mutual_occlusion {
                let mut over = occluders.clone();
                over.extend_from_slice(&frame_boxes[i + 1..]);
                visibility(bbox, size, &over)
            } else {
                visibility(bbox, size, &occluders)
            };
            gt.push(GroundTruth {
                frame_index: f,
                track_id: i as i64 + 1,
                bbox: *bbox,
                visibility: vis,
                class_id: 1,
            });
        }
        boxes.push(frame_boxes);
    }
    Ok(Scene {
        occluders,
        tracks,
        boxes,
        gt,
    })
}

/// Ground truth of [`generate_video`] without rendering any pixels.
pub fn generate_ground_truth(cfg: &SyntheticSceneConfig) -> Result<Vec<GroundTruth>> {
    Ok(simulate(cfg)?.gt)
}

/// Renders one video and its per-frame ground truth (every object, every
/// frame, including fully hidden ones).
pub fn generate_video(cfg: &SyntheticSceneConfig) -> Result<Video> {
    let scene = simulate(cfg)?;
    let mut noise = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, NOISE_STREAM));
    let size = cfg.image_size;
    let mut frames = Vec::with_capacity(cfg.frames);
    for frame_boxes in &scene.boxes {
        let mut img = vec![0.0f64; 3 * size * size];
        for p in 0..size * size {
            let v = 0.12 + noise.gen_range(0.0..0.08);
            for c in 0..3 {
                img[c * size * size + p] = v;
            }
        }
        for (t, b) in scene.tracks.iter().zip(frame_boxes) {
            paint(&mut img, size, b, |px, py| {
                let cx = ((px - b.x) / t.checker).floor() as i64;
                let cy = ((py - b.y) / t.checker).floor() as i64;
                let k = if (cx + cy).rem_euclid(2) == 0 { 1.0 } else { 0.6 };
                [t.color[0] * k, t.color[1] * k, t.color[2] * k]
            });
        }
        for o in &scene.occluders {
            paint(&mut img, size, o, |_, _| OCCLUDER_RGB);
        }
        for v in &mut img {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        frames.push(Tensor::new(vec![3, size, size], img)?);
    }
    Ok(Video::new("seq", frames, scene.gt))
}

/// Paints every pixel whose center lies inside `b`.
fn paint(img: &mut [f64], size: usize, b: &BBox, color: impl Fn(f64, f64) -> [f64; 3]) {
    let x0 = (b.x - 0.5).ceil().max(0.0) as usize;
    let y0 = (b.y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((b.right() - 0.5).ceil().max(0.0) as usize).min(size);
    let y1 = ((b.bottom() - 0.5).ceil().max(0.0) as usize).min(size);
    for py in y0..y1 {
        for px in x0..x1 {
            let rgb = color(px as f64 + 0.5, py as f64 + 0.5);
            for c in 0..3 {
                img[(c * size + py) * size + px] = rgb[c];
            }
        }
    }
}

/// Fraction of ground-truth rows with visibility below 0.5.
pub fn hidden_fraction(videos: &[Video]) -> f64 {
    let (hidden, total) = videos
        .iter()
        .flat_map(|v| &v.gt)
        .fold((0usize, 0usize), |(h, t), g| (h + usize::from(g.is_hidden()), t + 1));
    if total == 0 {
        0.0
    } else {
        hidden as f64 / total as f64
    }
}

fn dataset_ground_truth(cfg: &DatasetConfig) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for i in 0..cfg.videos {
        out.extend(generate_ground_truth(&SyntheticSceneConfig {
            seed: mix_seed(cfg.scene.seed, i as u64),
            ..cfg.scene.clone()
        })?);
    }
    Ok(out)
}

/// Rescales the occluder widths of `cfg` until the generated dataset has a
/// hidden fraction within `tolerance` of `target`.
pub fn tune_hidden_fraction(cfg: &DatasetConfig, target: f64, tolerance: f64) -> Result<DatasetConfig> {
    let n = cfg.scene.image_size as f64;
    let measure = |factor: f64| -> Result<(DatasetConfig, f64)> {
        let mut c = cfg.clone();
        let [lo, hi] = cfg.scene.occluder_width;
        c.scene.occluder_width = [(lo * factor).min(n), (hi * factor).min(n)];
        let gt = dataset_ground_truth(&c)?;
        let hidden = gt.iter().filter(|g| g.is_hidden()).count();
        Ok((c, hidden as f64 / gt.len().max(1) as f64))
    };
    let (mut lo, mut hi) = (0.05, n / cfg.scene.occluder_width[1].max(1e-9));
    let (mut best, mut best_frac) = measure(1.0)?;
    for _ in 0..30 {
        if (best_frac - target).abs() <= tolerance {
            return Ok(best);
        }
        let mid = 0.5 * (lo + hi);
        let (c, frac) = measure(mid)?;
        if frac < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (frac - target).abs() < (best_frac - target).abs() {
            best = c;
            best_frac = frac;
        }
    }
    if (best_frac - target).abs() <= tolerance {
        Ok(best)
    } else {
        Err(Error::contract(format!(
            "could not reach hidden fraction {target} (closest {best_frac:.3})"
        )))
    }
}
