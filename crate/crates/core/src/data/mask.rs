//! Procedural free-form hole masks bucketed by hole ratio.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Allowed deviation of an achieved ratio from its bucket edges.
pub const BUCKET_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    B0_20,
    B20_40,
    B40_60,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::B0_20, Bucket::B20_40, Bucket::B40_60];

    pub fn range(self) -> (f64, f64) {
        match self {
            Bucket::B0_20 => (0.0, 0.2),
            Bucket::B20_40 => (0.2, 0.4),
            Bucket::B40_60 => (0.4, 0.6),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::B0_20 => "0-20",
            Bucket::B20_40 => "20-40",
            Bucket::B40_60 => "40-60",
        }
    }

    /// Inside the bucket widened by [`BUCKET_TOLERANCE`].
    pub fn accepts(self, ratio: f64) -> bool {
        let (lo, hi) = self.range();
        ratio >= lo - BUCKET_TOLERANCE && ratio <= hi + BUCKET_TOLERANCE
    }

    /// Bucket whose half-open range contains `ratio`; above 0.6 maps to the last.
    pub fn classify(ratio: f64) -> Bucket {
        if ratio < 0.2 {
            Bucket::B0_20
        } else if ratio < 0.4 {
            Bucket::B20_40
        } else {
            Bucket::B40_60
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches(['B', 'b']).replace('_', "-");
        Bucket::ALL
            .into_iter()
            .find(|b| b.as_str() == t)
            .ok_or_else(|| Error::Config(format!("unknown bucket `{s}` (expected 0-20, 20-40 or 40-60)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrokeParams {
    /// Vertices per random-walk stroke.
    pub vertices: (usize, usize),
    /// Brush diameter as a fraction of the shorter image side.
    pub width: (f64, f64),
    /// Segment length as a fraction of the shorter image side.
    pub length: (f64, f64),
    /// Chance that an attempt draws a rectangle instead of a stroke.
    pub rect_prob: f64,
}

impl Default for StrokeParams {
    fn default() -> Self {
        Self {
            vertices: (4, 12),
            width: (0.03, 0.1),
            length: (0.05, 0.25),
            rect_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub bucket: Bucket,
    pub seed: u64,
    pub strokes: StrokeParams,
    /// Attempts before giving up.
    pub max_attempts: usize,
}

impl MaskSpec {
    pub fn new(bucket: Bucket, seed: u64) -> Self {
        Self {
            bucket,
            seed,
            strokes: StrokeParams::default(),
            max_attempts: 5000,
        }
    }
}

struct Canvas {
    w: usize,
    h: usize,
    cells: Vec<bool>,
    holes: usize,
}

impl Canvas {
    fn ratio(&self) -> f64 {
        self.holes as f64 / (self.w * self.h) as f64
    }

    fn set(&mut self, x: i64, y: i64, changed: &mut Vec<usize>) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = y as usize * self.w + x as usize;
        if !self.cells[i] {
            self.cells[i] = true;
            self.holes += 1;
            changed.push(i);
        }
    }

    fn disk(&mut self, cx: f64, cy: f64, r: f64, changed: &mut Vec<usize>) {
        let r2 = r * r;
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r2 {
                    self.set(x, y, changed);
                }
            }
        }
    }

    fn undo(&mut self, changed: &[usize]) {
        for &i in changed {
            self.cells[i] = false;
        }
        self.holes -= changed.len();
    }
}

fn draw_stroke(c: &mut Canvas, p: &StrokeParams, shrink: f64, rng: &mut ChaCha8Rng, changed: &mut Vec<usize>) {
    let side = c.w.min(c.h) as f64;
    let n = rng.gen_range(p.vertices.0..=p.vertices.1);
    let r = (rng.gen_range(p.width.0..=p.width.1) * side * shrink / 2.0).max(0.5);
    let (mut x, mut y) = (rng.gen_range(0.0..c.w as f64), rng.gen_range(0.0..c.h as f64));
    let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    c.disk(x, y, r, changed);
    for _ in 0..n {
        angle += rng.gen_range(-1.2..1.2);
        let len = rng.gen_range(p.length.0..=p.length.1) * side * shrink;
        let steps = (len / (r * 0.5).max(0.5)).ceil().max(1.0) as usize;
        let (nx, ny) = (
            (x + len * angle.cos()).clamp(0.0, c.w as f64),
            (y + len * angle.sin()).clamp(0.0, c.h as f64),
        );
        for s in 1..=steps {
            let t = s as f64 / steps as f64;
            c.disk(x + (nx - x) * t, y + (ny - y) * t, r, changed);
        }
        x = nx;
        y = ny;
    }
}

fn draw_rect(c: &mut Canvas, shrink: f64, rng: &mut ChaCha8Rng, changed: &mut Vec<usize>) {
    let rw = ((rng.gen_range(0.05..0.3) * c.w as f64 * shrink).ceil() as i64).max(1);
    let rh = ((rng.gen_range(0.05..0.3) * c.h as f64 * shrink).ceil() as i64).max(1);
    let x0 = rng.gen_range(0..c.w as i64);
    let y0 = rng.gen_range(0..c.h as i64);
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            c.set(x, y, changed);
        }
    }
}

/// Rasterize strokes until the hole ratio reaches a target drawn inside the
/// bucket. Strokes that would leave the bucket are undone and retried smaller.
pub fn generate_mask<T: Scalar>(spec: &MaskSpec, height: usize, width: usize) -> Result<Tensor<T>> {
    if height < 32 || width < 32 {
        return Err(Error::Config(format!(
            "masks need at least 32x32, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.bucket.range();
    let target = rng.gen_range(lo.max(0.02)..hi);
    let mut c = Canvas {
        w: width,
        h: height,
        cells: vec![false; width * height],
        holes: 0,
    };
    let mut changed = Vec::new();
    let mut shrink = 1.0;
    let mut attempts = 0;
    while c.ratio() < target {
        if attempts == spec.max_attempts {
            // Every stroke overshoots a target just below the bucket top.
            if c.ratio() >= lo {
                break;
            }
            return Err(Error::MaskUnreachable {
                bucket: spec.bucket.to_string(),
                achieved: c.ratio(),
            });
        }
        attempts += 1;
        changed.clear();
        if rng.gen_bool(spec.strokes.rect_prob) {
            draw_rect(&mut c, shrink, &mut rng, &mut changed);
        } else {
            draw_stroke(&mut c, &spec.strokes, shrink, &mut rng, &mut changed);
        }
        if c.ratio() > hi {
            c.undo(&changed);
            shrink = (shrink * 0.7).max(0.05);
        }
    }
    Ok(Tensor::from_fn([1, 1, height, width], |[_, _, y, x]| {
        if c.cells[y * width + x] {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Fraction of hole pixels in a `[B, 1, H, W]` mask.
pub fn hole_ratio<T: Scalar>(mask: &Tensor<T>) -> f64 {
    mask.sum().as_f64() / mask.len().max(1) as f64
}
