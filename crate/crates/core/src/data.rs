//! Synthetic video generation, on-disk sequences and training-batch sampling.
//!
//! A sequence directory holds `0001.png .. NNNN.png`, a `groundtruth.txt` with
//! one `x,y,w,h` corner-form line per frame (a single line when only the first
//! frame is labeled) and an optional `attributes.txt`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::geometry::{iou, BBox, Space};
use crate::imaging::{Image, PixelNorm};

/// Speeds at or above this fraction of the target scale tag a sequence as fast-motion.
pub const FAST_MOTION_RATIO: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    Occlusion,
    FastMotion,
    Distractor,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Occlusion, Attribute::FastMotion, Attribute::Distractor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::Occlusion => "occlusion",
            Attribute::FastMotion => "fast-motion",
            Attribute::Distractor => "distractor",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attribute `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    Linear,
    Sinusoidal,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub width: f64,
    pub height: f64,
    pub color: [u8; 3],
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub model: MotionModel,
    /// Pixels per frame along the heading.
    pub speed: f64,
    /// Initial heading in degrees, 0 pointing along +x.
    pub heading_deg: f64,
    /// Lateral amplitude in pixels (sinusoidal only).
    #[serde(default)]
    pub amplitude: f64,
    /// Period in frames (sinusoidal only).
    #[serde(default = "default_period")]
    pub period: f64,
}

fn default_period() -> f64 {
    16.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderEvent {
    /// First occluded frame (0-based, inclusive).
    pub start: usize,
    /// Last occluded frame (inclusive).
    pub end: usize,
    /// Fraction of the target width hidden, in (0, 1].
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub length: usize,
    pub target: TargetSpec,
    /// Initial target center; defaults to the canvas center.
    #[serde(default)]
    pub start: Option<(f64, f64)>,
    pub motion: MotionSpec,
    #[serde(default)]
    pub distractors: usize,
    #[serde(default)]
    pub distractor_similarity: f64,
    #[serde(default)]
    pub occluders: Vec<OccluderEvent>,
    pub background_seed: u64,
    /// Standard deviation of per-frame pixel noise.
    #[serde(default)]
    pub pixel_noise: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let t = &self.target;
        if self.length == 0 {
            return Err(Error::config("length", "must be at least 1"));
        }
        if !(t.width >= 2.0 && t.height >= 2.0) {
            return Err(Error::config("target.width", "target sides must be at least 2 px"));
        }
        if t.width > self.canvas_width as f64 || t.height > self.canvas_height as f64 {
            return Err(Error::config(
                "target.width",
                format!(
                    "target {}x{} does not fit a {}x{} canvas",
                    t.width, t.height, self.canvas_width, self.canvas_height
                ),
            ));
        }
        let m = &self.motion;
        if !(m.speed >= 0.0 && m.speed.is_finite()) {
            return Err(Error::config("motion.speed", "must be finite and non-negative"));
        }
        if m.model == MotionModel::Sinusoidal && !(m.period > 0.0) {
            return Err(Error::config("motion.period", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.distractor_similarity) {
            return Err(Error::config("distractor_similarity", "must lie in [0, 1]"));
        }
        for (i, o) in self.occluders.iter().enumerate() {
            if o.start > o.end || !(o.coverage > 0.0 && o.coverage <= 1.0) {
                return Err(Error::config(
                    format!("occluders[{i}]"),
                    "needs start <= end and coverage in (0, 1]",
                ));
            }
        }
        if !(self.pixel_noise >= 0.0) {
            return Err(Error::config("pixel_noise", "must be non-negative"));
        }
        Ok(())
    }

    pub fn attributes(&self) -> BTreeSet<Attribute> {
        let mut set = BTreeSet::new();
        if !self.occluders.is_empty() {
            set.insert(Attribute::Occlusion);
        }
        let scale = (self.target.width * self.target.height).sqrt();
        if self.motion.speed >= FAST_MOTION_RATIO * scale {
            set.insert(Attribute::FastMotion);
        }
        if self.distractors > 0 {
            set.insert(Attribute::Distractor);
        }
        set
    }

    pub fn occluded(&self, frame: usize) -> bool {
        self.occluders.iter().any(|o| (o.start..=o.end).contains(&frame))
    }
}

#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<Arc<RgbImage>>,
    pub first_annotation: BBox,
    pub full_annotations: Option<Vec<BBox>>,
    pub attributes: BTreeSet<Attribute>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Folds an unconstrained coordinate into `[lo, hi]` by mirror reflection.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let p = (v - lo).rem_euclid(2.0 * span);
    lo + if p <= span { p } else { 2.0 * span - p }
}

/// Unconstrained trajectory before reflection into the canvas.
fn raw_trajectory(spec: &SceneSpec, start: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let m = &spec.motion;
    let heading = m.heading_deg.to_radians();
    let (dx, dy) = (heading.cos(), heading.sin());
    let turn = Normal::new(0.0, 0.35).expect("valid std");
    let mut out = Vec::with_capacity(spec.length);
    let mut pos = start;
    let mut theta = heading;
    for t in 0..spec.length {
        let tf = t as f64;
        match m.model {
            MotionModel::Linear => {
                out.push((start.0 + m.speed * tf * dx, start.1 + m.speed * tf * dy));
            }
            MotionModel::Sinusoidal => {
                let lateral = m.amplitude * (std::f64::consts::TAU * tf / m.period).sin();
                out.push((
                    start.0 + m.speed * tf * dx - lateral * dy,
                    start.1 + m.speed * tf * dy + lateral * dx,
                ));
            }
            MotionModel::RandomWalk => {
                out.push(pos);
                theta += turn.sample(rng);
                pos = (pos.0 + m.speed * theta.cos(), pos.1 + m.speed * theta.sin());
            }
        }
    }
    out
}

fn trajectory(spec: &SceneSpec, w: f64, h: f64, start: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let (cw, ch) = (spec.canvas_width as f64, spec.canvas_height as f64);
    raw_trajectory(spec, start, rng)
        .into_iter()
        .map(|(x, y)| (reflect(x, w / 2.0, cw - w / 2.0), reflect(y, h / 2.0, ch - h / 2.0)))
        .collect()
}

/// Fraction of pixel `(px, py)` covered by the shape occupying `b`.
fn coverage(shape: Shape, b: &BBox, px: usize, py: usize) -> f64 {
    let (x0, y0, x1, y1) = b.corners();
    let (fx, fy) = (px as f64, py as f64);
    match shape {
        Shape::Rect => {
            let ox = (x1.min(fx + 1.0) - x0.max(fx)).max(0.0);
            let oy = (y1.min(fy + 1.0) - y0.max(fy)).max(0.0);
            ox * oy
        }
        Shape::Ellipse => {
            const S: usize = 4;
            let (rx, ry) = (b.w / 2.0, b.h / 2.0);
            let mut inside = 0;
            for sy in 0..S {
                for sx in 0..S {
                    let x = fx + (sx as f64 + 0.5) / S as f64 - b.cx;
                    let y = fy + (sy as f64 + 0.5) / S as f64 - b.cy;
                    if (x / rx).powi(2) + (y / ry).powi(2) <= 1.0 {
                        inside += 1;
                    }
                }
            }
            inside as f64 / (S * S) as f64
        }
    }
}

/// Blends `shape` into `canvas` with per-pixel coverage as alpha.
fn paint(canvas: &mut Image, shape: Shape, b: &BBox, color: impl Fn(f64, f64) -> [f32; 3]) {
    let (x0, y0, x1, y1) = b.corners();
    let xa = x0.floor().max(0.0) as usize;
    let ya = y0.floor().max(0.0) as usize;
    let xb = (x1.ceil() as usize).min(canvas.width());
    let yb = (y1.ceil() as usize).min(canvas.height());
    for py in ya..yb {
        for px in xa..xb {
            let a = coverage(shape, b, px, py) as f32;
            if a <= 0.0 {
                continue;
            }
            // position inside the box in [0, 1]
            let u = (px as f64 + 0.5 - x0) / b.w;
            let v = (py as f64 + 0.5 - y0) / b.h;
            let c = color(u, v);
            let old = [canvas.get(px, py, 0), canvas.get(px, py, 1), canvas.get(px, py, 2)];
            canvas.set(
                px,
                py,
                [
                    old[0] * (1.0 - a) + c[0] * a,
                    old[1] * (1.0 - a) + c[1] * a,
                    old[2] * (1.0 - a) + c[2] * a,
                ],
            );
        }
    }
}

/// Target appearance: base color with a darker inner band, so that distractors
/// of identical color can still differ in pattern.
fn target_color(base: [f64; 3], band: bool) -> impl Fn(f64, f64) -> [f32; 3] {
    move |u, v| {
        let inner = band && (0.35..0.65).contains(&u) && (0.2..0.8).contains(&v);
        let k = if inner { 0.55 } else { 1.0 };
        [(base[0] * k) as f32, (base[1] * k) as f32, (base[2] * k) as f32]
    }
}

fn background(spec: &SceneSpec) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
    let (w, h) = (spec.canvas_width, spec.canvas_height);
    let base: [f64; 3] = [
        rng.random_range(60.0..190.0),
        rng.random_range(60.0..190.0),
        rng.random_range(60.0..190.0),
    ];
    // a handful of low-frequency waves per channel
    let waves: Vec<[f64; 5]> = (0..6)
        .map(|_| {
            [
                rng.random_range(0.0..3.0),
                rng.random_range(0.01..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(8.0..30.0),
            ]
        })
        .collect();
    let mut img = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0f32; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let mut v = base[c];
                for (i, wv) in waves.iter().enumerate() {
                    if i % 3 != c && i >= 3 {
                        continue;
                    }
                    let dir = wv[0] + c as f64;
                    let phase = wv[1] * (x as f64 * dir.cos() + y as f64 * dir.sin()) + wv[2];
                    v += wv[4] * phase.sin() * (0.5 + 0.5 * (wv[3] + 0.3 * c as f64).cos());
                }
                *out = v.clamp(0.0, 255.0) as f32;
            }
            img.set(x, y, px);
        }
    }
    img
}

struct Distractor {
    shape: Shape,
    w: f64,
    h: f64,
    color: [f64; 3],
    band: bool,
    path: Vec<(f64, f64)>,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn make_distractors(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Distractor> {
    let t = &spec.target;
    let s = spec.distractor_similarity;
    let (cw, ch) = (spec.canvas_width as f64, spec.canvas_height as f64);
    (0..spec.distractors)
        .map(|_| {
            let rand_color = [
                rng.random_range(0.0..255.0),
                rng.random_range(0.0..255.0),
                rng.random_range(0.0..255.0),
            ];
            let color = [
                lerp(rand_color[0], t.color[0] as f64, s),
                lerp(rand_color[1], t.color[1] as f64, s),
                lerp(rand_color[2], t.color[2] as f64, s),
            ];
            let w = lerp(rng.random_range(0.5..1.5) * t.width, t.width, s).clamp(2.0, cw);
            let h = lerp(rng.random_range(0.5..1.5) * t.height, t.height, s).clamp(2.0, ch);
            let shape = if rng.random_bool(s) {
                t.shape
            } else if rng.random_bool(0.5) {
                Shape::Rect
            } else {
                Shape::Ellipse
            };
            // the inner band is the target's signature; near-identical distractors may copy it
            let band = rng.random_bool(s * s * 0.5);
            let motion = MotionSpec {
                model: MotionModel::Linear,
                speed: rng.random_range(0.0..=spec.motion.speed.max(1.0)),
                heading_deg: rng.random_range(0.0..360.0),
                amplitude: 0.0,
                period: default_period(),
            };
            let sub = SceneSpec {
                motion,
                ..spec.clone()
            };
            let start = (rng.random_range(w / 2.0..=cw - w / 2.0), rng.random_range(h / 2.0..=ch - h / 2.0));
            let path = trajectory(&sub, w, h, start, rng);
            Distractor {
                shape,
                w,
                h,
                color,
                band,
                path,
            }
        })
        .collect()
}

/// Ground-truth boxes of a scene, without rendering any pixels.
pub fn ground_truth(spec: &SceneSpec, seed: u64) -> Result<Vec<BBox>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.target.width, spec.target.height);
    let start = spec
        .start
        .unwrap_or((spec.canvas_width as f64 / 2.0, spec.canvas_height as f64 / 2.0));
    Ok(trajectory(spec, w, h, start, &mut rng)
        .into_iter()
        .map(|(x, y)| BBox::frame(x, y, w, h))
        .collect())
}

/// Supersampling factor of [`target_mask`].
pub const MASK_SUPERSAMPLE: usize = 8;

/// Rasterizes the target alone on a grid [`MASK_SUPERSAMPLE`] times finer
/// than the canvas, for checking ground truth against rendered pixels.
pub fn target_mask(spec: &SceneSpec, b: &BBox) -> Vec<bool> {
    let ss = MASK_SUPERSAMPLE;
    let (w, h) = (spec.canvas_width * ss, spec.canvas_height * ss);
    let (x0, y0, x1, y1) = b.corners();
    let mut mask = vec![false; w * h];
    for j in 0..h {
        for i in 0..w {
            let x = (i as f64 + 0.5) / ss as f64;
            let y = (j as f64 + 0.5) / ss as f64;
            mask[j * w + i] = match spec.target.shape {
                Shape::Rect => x >= x0 && x < x1 && y >= y0 && y < y1,
                Shape::Ellipse => ((x - b.cx) / (b.w / 2.0)).powi(2) + ((y - b.cy) / (b.h / 2.0)).powi(2) <= 1.0,
            };
        }
    }
    mask
}

/// Bounding box, in canvas pixels, of a mask from [`target_mask`].
pub fn mask_bbox(mask: &[bool], canvas_width: usize) -> Option<BBox> {
    let ss = MASK_SUPERSAMPLE;
    let width = canvas_width * ss;
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (k % width, k / width);
        bounds = Some(match bounds {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }
    let s = ss as f64;
    bounds.map(|(x0, y0, x1, y1)| {
        BBox::from_corner(
            x0 as f64 / s,
            y0 as f64 / s,
            (x1 - x0 + 1) as f64 / s,
            (y1 - y0 + 1) as f64 / s,
            Space::FramePixels,
        )
    })
}

/// Renders a synthetic sequence. Deterministic in `(spec, seed)`.
pub fn generate(spec: &SceneSpec, seed: u64, id: impl Into<String>) -> Result<FrameSequence> {
    let gt = ground_truth(spec, seed)?;
    // distinct stream from the trajectory draws
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let bg = background(spec);
    let distractors = make_distractors(spec, &mut rng);
    let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let base = spec.target.color.map(|c| c as f64);
    let occluder_color = {
        let m = bg.channel_mean();
        [m[0] as f64 * 0.6 + 30.0, m[1] as f64 * 0.6 + 30.0, m[2] as f64 * 0.6 + 30.0]
    };
    let mut frames = Vec::with_capacity(spec.length);
    for (t, b) in gt.iter().enumerate() {
        let mut img = bg.clone();
        for d in &distractors {
            let (x, y) = d.path[t];
            paint(&mut img, d.shape, &BBox::frame(x, y, d.w, d.h), target_color(d.color, d.band));
        }
        paint(&mut img, spec.target.shape, b, target_color(base, true));
        for o in spec.occluders.iter().filter(|o| (o.start..=o.end).contains(&t)) {
            // a vertical bar sliding over the target from the left
            let (x0, y0, _, _) = b.corners();
            let bar = BBox::from_corner(
                x0 - 1.0,
                y0 - 3.0,
                b.w * o.coverage + 1.0,
                b.h + 6.0,
                Space::FramePixels,
            );
            paint(&mut img, Shape::Rect, &bar, |_, _| occluder_color.map(|c| c as f32));
        }
        if spec.pixel_noise > 0.0 {
            let (w, h) = (img.width(), img.height());
            for y in 0..h {
                for x in 0..w {
                    let px = [img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)];
                    let n = noise.sample(&mut rng) as f32;
                    img.set(x, y, px.map(|v| v + n));
                }
            }
        }
        frames.push(Arc::new(img.to_rgb8()));
    }
    Ok(FrameSequence {
        id: id.into(),
        frames,
        first_annotation: gt[0],
        full_annotations: Some(gt),
        attributes: spec.attributes(),
    })
}

/// Distribution over scenes for a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub name: String,
    pub count: usize,
    pub canvas: usize,
    pub length: [usize; 2],
    pub target_size: [f64; 2],
    pub aspect: [f64; 2],
    pub speed: [f64; 2],
    pub motion_models: Vec<MotionModel>,
    pub distractor_prob: f64,
    pub max_distractors: usize,
    pub distractor_similarity: [f64; 2],
    pub occlusion_prob: f64,
    pub pixel_noise: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            count: 200,
            canvas: 160,
            length: [12, 16],
            target_size: [16.0, 28.0],
            aspect: [0.6, 1.6],
            speed: [1.0, 3.0],
            motion_models: vec![MotionModel::Linear, MotionModel::Sinusoidal, MotionModel::RandomWalk],
            distractor_prob: 0.3,
            max_distractors: 2,
            distractor_similarity: [0.2, 0.8],
            occlusion_prob: 0.2,
            pixel_noise: 2.0,
        }
    }
}

fn check_range(field: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0] >= lo && r[1] >= r[0] && r[1].is_finite()) {
        return Err(Error::config(field, format!("needs {lo} <= min <= max, got {r:?}")));
    }
    Ok(())
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty path component"));
        }
        if self.count == 0 {
            return Err(Error::config("count", "must be at least 1"));
        }
        if self.length[0] == 0 || self.length[1] < self.length[0] {
            return Err(Error::config("length", "needs 1 <= min <= max"));
        }
        check_range("target_size", self.target_size, 2.0)?;
        check_range("aspect", self.aspect, 0.1)?;
        check_range("speed", self.speed, 0.0)?;
        check_range("distractor_similarity", self.distractor_similarity, 0.0)?;
        if self.distractor_similarity[1] > 1.0 {
            return Err(Error::config("distractor_similarity", "must lie in [0, 1]"));
        }
        for (f, p) in [("distractor_prob", self.distractor_prob), ("occlusion_prob", self.occlusion_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(f, "must be a probability"));
            }
        }
        if self.motion_models.is_empty() {
            return Err(Error::config("motion_models", "must list at least one model"));
        }
        let longest = self.target_size[1] * self.aspect[1].max(1.0 / self.aspect[0]).sqrt();
        if longest > self.canvas as f64 {
            return Err(Error::config("canvas", "too small for the largest target"));
        }
        Ok(())
    }

    /// Draws the `(spec, seed)` pairs of the corpus from one root seed.
    pub fn scenes(&self, root_seed: u64) -> Result<Vec<ManifestEntry>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
        let mut out = Vec::with_capacity(self.count);
        for i in 0..self.count {
            let size = draw(&mut rng, self.target_size);
            let aspect = draw(&mut rng, self.aspect);
            let (w, h) = ((size * aspect.sqrt()).round().max(2.0), (size / aspect.sqrt()).round().max(2.0));
            let length = rng.random_range(self.length[0]..=self.length[1]);
            let model = *self.motion_models.choose(&mut rng).expect("validated non-empty");
            let speed = draw(&mut rng, self.speed);
            let motion = MotionSpec {
                model,
                speed,
                heading_deg: rng.random_range(0.0..360.0),
                amplitude: if model == MotionModel::Sinusoidal {
                    rng.random_range(0.5..1.5) * size * 0.5
                } else {
                    0.0
                },
                period: rng.random_range(8.0..24.0),
            };
            let distractors = if rng.random_bool(self.distractor_prob) {
                rng.random_range(1..=self.max_distractors.max(1))
            } else {
                0
            };
            let distractor_similarity = draw(&mut rng, self.distractor_similarity);
            let mut occluders = Vec::new();
            if length >= 3 && rng.random_bool(self.occlusion_prob) {
                let start = rng.random_range(1..length);
                let end = (start + rng.random_range(0..4)).min(length - 1);
                occluders.push(OccluderEvent {
                    start,
                    end,
                    coverage: rng.random_range(0.3..0.7),
                });
            }
            let c = self.canvas as f64;
            let start = (rng.random_range(w / 2.0..=c - w / 2.0), rng.random_range(h / 2.0..=c - h / 2.0));
            let color = [rng.random(), rng.random(), rng.random()];
            let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            let spec = SceneSpec {
                canvas_width: self.canvas,
                canvas_height: self.canvas,
                length,
                target: TargetSpec {
                    width: w,
                    height: h,
                    color,
                    shape,
                },
                start: Some(start),
                motion,
                distractors,
                distractor_similarity,
                occluders,
                background_seed: rng.random(),
                pixel_noise: self.pixel_noise,
            };
            out.push(ManifestEntry {
                id: format!("{}-{:04}", self.name, i + 1),
                seed: rng.random(),
                spec,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub root_seed: u64,
    pub corpus: CorpusSpec,
    pub sequences: Vec<ManifestEntry>,
}

/// Generates a corpus into `out_dir/<name>/`, returning the dataset directory.
pub fn generate_corpus(corpus: &CorpusSpec, root_seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let entries = corpus.scenes(root_seed)?;
    let root = out_dir.join(&corpus.name);
    fs::create_dir_all(&root)?;
    for e in &entries {
        let seq = generate(&e.spec, e.seed, e.id.clone())?;
        save_sequence(&seq, &root.join(&e.id))?;
    }
    let manifest = Manifest {
        name: corpus.name.clone(),
        root_seed,
        corpus: corpus.clone(),
        sequences: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(root.join("manifest.json"), json + "\n")?;
    Ok(root)
}

fn frame_name(i: usize) -> String {
    format!("{:04}.png", i + 1)
}

fn annotation_line(b: &BBox) -> String {
    let [x, y, w, h] = b.to_corner_form();
    format!("{x},{y},{w},{h}")
}

pub fn save_sequence(seq: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        let path = dir.join(frame_name(i));
        f.save(&path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    }
    let boxes: Vec<&BBox> = match &seq.full_annotations {
        Some(all) => all.iter().collect(),
        None => vec![&seq.first_annotation],
    };
    let mut gt = String::new();
    for b in boxes {
        gt.push_str(&annotation_line(b));
        gt.push('\n');
    }
    fs::write(dir.join("groundtruth.txt"), gt)?;
    let tags: Vec<&str> = seq.attributes.iter().map(|a| a.as_str()).collect();
    fs::write(dir.join("attributes.txt"), tags.join(",") + "\n")?;
    Ok(())
}

/// Parses one `x,y,w,h` line (commas, tabs or spaces) into a center-form box.
pub fn parse_annotation(line: &str) -> std::result::Result<BBox, String> {
    let parts: Vec<&str> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 values, found {}", parts.len()));
    }
    let mut v = [0f64; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse::<f64>().map_err(|e| format!("`{p}`: {e}"))?;
        if !slot.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
    }
    if v[2] < 0.0 || v[3] < 0.0 {
        return Err("negative box size".into());
    }
    Ok(BBox::from_corner(v[0], v[1], v[2], v[3], Space::FramePixels))
}

fn frame_index(path: &Path) -> Option<usize> {
    if path.extension()?.to_str()? != "png" {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let gt_path = dir.join("groundtruth.txt");
    if !gt_path.is_file() {
        return Err(DataError::MissingGroundtruth(gt_path).into());
    }
    let mut indexed: Vec<(usize, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| frame_index(&p).map(|i| (i, p)))
        .collect();
    indexed.sort();
    if indexed.is_empty() {
        return Err(DataError::Empty(dir.to_path_buf()).into());
    }
    for (expected, (found, _)) in (1..).zip(&indexed) {
        if *found != expected {
            return Err(DataError::NonContiguous {
                dir: dir.to_path_buf(),
                expected,
                found: *found,
            }
            .into());
        }
    }
    let mut frames = Vec::with_capacity(indexed.len());
    for (_, p) in &indexed {
        let img = image::open(p).map_err(|e| DataError::UnreadableImage {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        frames.push(Arc::new(img.to_rgb8()));
    }
    let text = fs::read_to_string(&gt_path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b = parse_annotation(line).map_err(|reason| DataError::BadAnnotation {
            path: gt_path.clone(),
            line: i + 1,
            reason,
        })?;
        boxes.push(b);
    }
    if boxes.is_empty() {
        return Err(DataError::BadAnnotation {
            path: gt_path,
            line: 1,
            reason: "no annotation lines".into(),
        }
        .into());
    }
    let full = match boxes.len() {
        1 if frames.len() > 1 => None,
        n if n == frames.len() => Some(boxes.clone()),
        n => {
            return Err(DataError::AnnotationCount {
                annotations: n,
                frames: frames.len(),
            }
            .into())
        }
    };
    let mut attributes = BTreeSet::new();
    let attr_path = dir.join("attributes.txt");
    if attr_path.is_file() {
        for (i, tag) in fs::read_to_string(&attr_path)?
            .split([',', '\n'])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .enumerate()
        {
            let a = tag.parse::<Attribute>().map_err(|reason| DataError::BadAnnotation {
                path: attr_path.clone(),
                line: i + 1,
                reason,
            })?;
            attributes.insert(a);
        }
    }
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FrameSequence {
        id,
        frames,
        first_annotation: boxes[0],
        full_annotations: full,
        attributes,
    })
}

/// Loads every sequence directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<FrameSequence>> {
    if !root.is_dir() {
        return Err(DataError::Empty(root.to_path_buf()).into());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()).into());
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Pixel statistics over the frames of a dataset.
pub fn pixel_norm(sequences: &[FrameSequence]) -> PixelNorm {
    let frames: Vec<Image> = sequences
        .iter()
        .flat_map(|s| s.frames.iter().step_by(4))
        .map(|f| Image::from_rgb8(f))
        .collect();
    PixelNorm::estimate(frames.iter())
}

/// One cycle-training example: a labeled first frame plus unlabeled later frames.
///
/// No ground truth is carried for the window frames.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sequence_id: String,
    pub sequence_index: usize,
    pub z0: Arc<RgbImage>,
    pub y0: BBox,
    pub x_u: Vec<Arc<RgbImage>>,
    /// Positions of `x_u` in the source sequence.
    pub frame_indices: Vec<usize>,
}

/// Draws `batch` samples with a random window of `l` frames after frame 0.
pub fn sample_training_batch<R: Rng>(
    sequences: &[FrameSequence],
    l: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<TrainSample>> {
    if l == 0 {
        return Err(Error::InvalidArgument("forward length must be at least 1".into()));
    }
    let eligible: Vec<usize> = (0..sequences.len()).filter(|&i| sequences[i].len() > l).collect();
    let skipped = sequences.len() - eligible.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} sequence(s) shorter than {} frames", l + 1);
    }
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no sequence has the {} frames a window of {l} needs",
            l + 1
        )));
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let si = *eligible.choose(rng).expect("non-empty");
        let seq = &sequences[si];
        let start = rng.random_range(1..=seq.len() - l);
        let frame_indices: Vec<usize> = (start..start + l).collect();
        out.push(TrainSample {
            sequence_id: seq.id.clone(),
            sequence_index: si,
            z0: seq.frames[0].clone(),
            y0: seq.first_annotation,
            x_u: frame_indices.iter().map(|&i| seq.frames[i].clone()).collect(),
            frame_indices,
        });
    }
    Ok(out)
}

/// Checks that every generated box matches the rendered target mask.
pub fn ground_truth_fidelity(spec: &SceneSpec, boxes: &[BBox]) -> Result<f64> {
    let mut worst = 1.0f64;
    for b in boxes {
        let mask = target_mask(spec, b);
        let found = mask_bbox(&mask, spec.canvas_width)
            .ok_or_else(|| Error::DegenerateBox("target mask is empty".into()))?;
        worst = worst.min(iou(b, &found)?);
    }
    Ok(worst)
}
