//! Seeded synthetic fundus images with exact vessel ground truth.
//!
//! A bright circular field of view on a black surround carries branching
//! vessel trees that radiate from an off-centre disc point. Vessels darken
//! mainly the green channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::imagio::{BinaryImage, RgbImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    ConfigInvalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_trees: usize,
    /// Thinnest and widest vessel diameter in pixels.
    pub vessel_width_range: (f64, f64),
    pub background_level: u8,
    /// Green-channel intensity drop at a vessel centreline.
    pub vessel_contrast: u8,
    pub noise_std: f64,
    pub fov_margin: usize,
    pub generations: usize,
    pub width_decay: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            width: 565,
            height: 584,
            n_trees: 4,
            vessel_width_range: (1.5, 9.0),
            background_level: 150,
            vessel_contrast: 48,
            noise_std: 5.0,
            fov_margin: 12,
            generations: 3,
            width_decay: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn fov_radius(&self) -> f64 {
        self.width.min(self.height) as f64 / 2.0 - self.fov_margin as f64
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::ConfigInvalid(
                "image dimensions must be positive",
            ));
        }
        if self.fov_radius() < 2.0 {
            return Err(SynthError::ConfigInvalid(
                "field of view does not fit in the frame",
            ));
        }
        if self.vessel_contrast == 0 || self.vessel_contrast > self.background_level {
            return Err(SynthError::ConfigInvalid(
                "vessel_contrast must be in 1..=background_level",
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::ConfigInvalid("noise_std must be non-negative"));
        }
        let (lo, hi) = self.vessel_width_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(SynthError::ConfigInvalid(
                "vessel_width_range must satisfy 0 < min <= max",
            ));
        }
        if !(self.width_decay > 0.0 && self.width_decay < 1.0) {
            return Err(SynthError::ConfigInvalid("width_decay must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: RgbImage,
    pub truth: BinaryImage,
    pub fov: BinaryImage,
}

#[derive(Clone, Copy)]
struct Point {
    x: f64,
    y: f64,
}

struct Canvas {
    width: usize,
    height: usize,
    /// Fraction of the full contrast removed at each pixel, in [0, 1].
    depth: Vec<f64>,
}

impl Canvas {
    /// Tapered capsule from `a` (diameter `wa`) to `b` (diameter `wb`).
    fn stroke(&mut self, a: Point, b: Point, wa: f64, wb: f64) {
        let reach = wa.max(wb) / 2.0 + 1.0;
        let x0 = (a.x.min(b.x) - reach).floor().max(0.0) as usize;
        let y0 = (a.y.min(b.y) - reach).floor().max(0.0) as usize;
        let x1 =
            ((a.x.max(b.x) + reach).ceil().max(0.0) as usize).min(self.width.saturating_sub(1));
        let y1 =
            ((a.y.max(b.y) + reach).ceil().max(0.0) as usize).min(self.height.saturating_sub(1));
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len_sq = dx * dx + dy * dy;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 - a.x, y as f64 - a.y);
                let t = if len_sq > 0.0 {
                    ((px * dx + py * dy) / len_sq).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (px - t * dx, py - t * dy);
                let dist = (ex * ex + ey * ey).sqrt();
                let radius = (wa + t * (wb - wa)) / 2.0;
                if dist <= radius {
                    let profile = 1.0 - 0.4 * (dist / radius.max(1e-9)).powi(2);
                    let cell = &mut self.depth[y * self.width + x];
                    *cell = cell.max(profile);
                }
            }
        }
    }
}

/// Random midpoint displacement of the segment `a → b`, `levels` times.
fn wiggle(rng: &mut ChaCha8Rng, a: Point, b: Point, levels: usize, amplitude: f64) -> Vec<Point> {
    let mut pts = vec![a, b];
    let mut amp = amplitude;
    for _ in 0..levels {
        let mut next = Vec::with_capacity(pts.len() * 2);
        for w in pts.windows(2) {
            let (p, q) = (w[0], w[1]);
            let (dx, dy) = (q.x - p.x, q.y - p.y);
            let len = (dx * dx + dy * dy).sqrt().max(1e-9);
            let off = rng.random_range(-1.0..=1.0) * amp;
            next.push(p);
            next.push(Point {
                x: (p.x + q.x) / 2.0 - dy / len * off,
                y: (p.y + q.y) / 2.0 + dx / len * off,
            });
        }
        next.push(*pts.last().expect("non-empty"));
        pts = next;
        amp /= 2.0;
    }
    pts
}

struct Branch {
    start: Point,
    angle: f64,
    length: f64,
    width: f64,
    generation: usize,
}

fn grow(rng: &mut ChaCha8Rng, canvas: &mut Canvas, cfg: &SynthConfig, br: Branch) {
    let end = Point {
        x: br.start.x + br.length * br.angle.cos(),
        y: br.start.y + br.length * br.angle.sin(),
    };
    let path = wiggle(rng, br.start, end, 4, 0.12 * br.length);
    let end_width = (br.width * 0.8).max(cfg.vessel_width_range.0);
    let segments = path.len() - 1;
    for (i, w) in path.windows(2).enumerate() {
        let ta = i as f64 / segments as f64;
        let tb = (i + 1) as f64 / segments as f64;
        let wa = br.width + ta * (end_width - br.width);
        let wb = br.width + tb * (end_width - br.width);
        canvas.stroke(w[0], w[1], wa, wb);
    }
    if br.generation >= cfg.generations {
        return;
    }
    let child_width = br.width * cfg.width_decay;
    if child_width < cfg.vessel_width_range.0 {
        return;
    }
    for side in [-1.0, 1.0] {
        let at = path[rng.random_range(segments / 4..=3 * segments / 4)];
        let turn = side * rng.random_range(0.45..1.0);
        let length = br.length * rng.random_range(0.45..0.7);
        grow(
            rng,
            canvas,
            cfg,
            Branch {
                start: at,
                angle: br.angle + turn,
                length,
                width: child_width,
                generation: br.generation + 1,
            },
        );
    }
}

/// Renders one synthetic fundus image with its vessel truth and FOV mask.
pub fn generate(cfg: &SynthConfig) -> Result<SynthImage, SynthError> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centre = Point {
        x: (w as f64 - 1.0) / 2.0,
        y: (h as f64 - 1.0) / 2.0,
    };
    let radius = cfg.fov_radius();
    let fov: Vec<u8> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let (dx, dy) = (x as f64 - centre.x, y as f64 - centre.y);
            u8::from(dx * dx + dy * dy <= radius * radius)
        })
        .collect();

    let mut canvas = Canvas {
        width: w,
        height: h,
        depth: vec![0.0; w * h],
    };
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let disc = Point {
        x: centre.x + side * 0.35 * radius,
        y: centre.y + rng.random_range(-0.1..=0.1) * radius,
    };
    for i in 0..cfg.n_trees {
        let base = std::f64::consts::TAU * (i as f64 + 0.5) / cfg.n_trees as f64;
        let angle = base + rng.random_range(-0.3..=0.3);
        let length = radius * rng.random_range(0.9..1.3);
        grow(
            &mut rng,
            &mut canvas,
            cfg,
            Branch {
                start: disc,
                angle,
                length,
                width: cfg.vessel_width_range.1,
                generation: 0,
            },
        );
    }

    let truth: Vec<u8> = canvas
        .depth
        .iter()
        .zip(&fov)
        .map(|(&d, &f)| u8::from(d > 0.0) & f)
        .collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise_std validated");
    let bg = f64::from(cfg.background_level);
    let contrast = f64::from(cfg.vessel_contrast);
    let mut rgb = Vec::with_capacity(3 * w * h);
    for i in 0..w * h {
        if fov[i] == 0 {
            rgb.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let drop = if truth[i] == 1 {
            contrast * canvas.depth[i]
        } else {
            0.0
        };
        let base = [
            (bg + 70.0).min(255.0) - 0.3 * drop,
            bg - drop,
            0.35 * bg - 0.2 * drop,
        ];
        for v in base {
            let n = if cfg.noise_std > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            rgb.push(crate::enhance::to_intensity(v + n));
        }
    }

    Ok(SynthImage {
        image: RgbImage::new(w, h, rgb).expect("buffer sized"),
        truth: BinaryImage::new(w, h, truth).expect("0/1 values"),
        fov: BinaryImage::new(w, h, fov).expect("0/1 values"),
    })
}
