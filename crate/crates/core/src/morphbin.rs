//! Flat grayscale morphology, top-hat/bot-hat vessel highlighting, Otsu
//! thresholding and binary complement.

use std::collections::VecDeque;

use crate::imagio::{BinaryImage, GrayImage};

/// Flat structuring element given as a set of `(dx, dy)` offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    /// Builds an element from arbitrary offsets; `(0, 0)` is always included.
    pub fn from_offsets(offsets: impl IntoIterator<Item = (isize, isize)>) -> Self {
        let mut offsets: Vec<_> = offsets.into_iter().chain([(0, 0)]).collect();
        offsets.sort_by_key(|&(dx, dy)| (dy, dx));
        offsets.dedup();
        Self { offsets }
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn reflected(&self) -> Self {
        Self::from_offsets(self.offsets.iter().map(|&(dx, dy)| (-dx, -dy)))
    }

    /// Horizontal runs `(dy, dx_lo, dx_hi)` covering the offsets exactly.
    fn runs(&self) -> Vec<(isize, isize, isize)> {
        let mut runs: Vec<(isize, isize, isize)> = Vec::new();
        for &(dx, dy) in &self.offsets {
            match runs.last_mut() {
                Some(run) if run.0 == dy && run.2 + 1 == dx => run.2 = dx,
                _ => runs.push((dy, dx, dx)),
            }
        }
        runs
    }
}

/// Disk `{(dx, dy) : dx² + dy² ≤ radius²}`.
pub fn disk_se(radius: usize) -> StructuringElement {
    let r = radius as isize;
    StructuringElement::from_offsets(
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx * dx + dy * dy <= r * r),
    )
}

/// Sliding extremum over `row[x + lo ..= x + hi]` with replicated ends.
/// `better(a, b)` is true when `a` should replace `b` as the window's extreme.
fn row_extreme(row: &[u8], lo: isize, hi: isize, better: fn(u8, u8) -> bool, out: &mut Vec<u8>) {
    let w = row.len() as isize;
    let at = |i: isize| row[i.clamp(0, w - 1) as usize];
    let mut window: VecDeque<(isize, u8)> = VecDeque::new();
    let mut next = lo;
    out.clear();
    for x in 0..w {
        while next <= x + hi {
            let v = at(next);
            while window.back().is_some_and(|&(_, b)| !better(b, v)) {
                window.pop_back();
            }
            window.push_back((next, v));
            next += 1;
        }
        while window.front().is_some_and(|&(i, _)| i < x + lo) {
            window.pop_front();
        }
        out.push(window.front().expect("window is never empty").1);
    }
}

fn rank_filter(img: &GrayImage, se: &StructuringElement, take_min: bool) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let better: fn(u8, u8) -> bool = if take_min { |a, b| a < b } else { |a, b| a > b };
    let pick = |a: u8, b: u8| if take_min { a.min(b) } else { a.max(b) };
    let runs = se.runs();

    let mut spans: Vec<(isize, isize)> = runs.iter().map(|&(_, lo, hi)| (lo, hi)).collect();
    spans.sort_unstable();
    spans.dedup();
    let mut scratch = Vec::with_capacity(w);
    let filtered: Vec<Vec<u8>> = spans
        .iter()
        .map(|&(lo, hi)| {
            let mut plane = Vec::with_capacity(w * h);
            for row in img.data().chunks_exact(w) {
                row_extreme(row, lo, hi, better, &mut scratch);
                plane.extend_from_slice(&scratch);
            }
            plane
        })
        .collect();
    let planes: Vec<(isize, &[u8])> = runs
        .iter()
        .map(|&(dy, lo, hi)| {
            let i = spans.binary_search(&(lo, hi)).expect("span present");
            (dy, filtered[i].as_slice())
        })
        .collect();

    let init = if take_min { u8::MAX } else { u8::MIN };
    let mut out = vec![init; w * h];
    for y in 0..h {
        let dst = &mut out[y * w..][..w];
        for &(dy, plane) in &planes {
            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            for (d, &s) in dst.iter_mut().zip(&plane[sy * w..][..w]) {
                *d = pick(*d, s);
            }
        }
    }
    GrayImage::new(w, h, out).expect("dimensions preserved")
}

/// Flat erosion: minimum of `img(p + b)` over offsets `b`, edges replicated.
pub fn erode(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    rank_filter(img, se, true)
}

/// Flat dilation: maximum of `img(p − b)` over offsets `b`, edges replicated.
pub fn dilate(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    rank_filter(img, &se.reflected(), false)
}

pub fn open(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    dilate(&erode(img, se), se)
}

pub fn close(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    erode(&dilate(img, se), se)
}

fn saturating_diff(a: &GrayImage, b: &GrayImage) -> GrayImage {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.saturating_sub(y))
        .collect();
    GrayImage::new(a.width(), a.height(), data).expect("dimensions preserved")
}

/// White top-hat: `img − open(img)`; picks out bright detail narrower than the SE.
pub fn tophat(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    saturating_diff(img, &open(img, se))
}

/// Black top-hat: `close(img) − img`; picks out dark detail narrower than the SE.
pub fn bothat(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    saturating_diff(&close(img, se), img)
}

/// How the top-hat and bot-hat responses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HatCombination {
    /// `bothat − tophat`: dark (vessel) detail becomes bright.
    #[default]
    BothatMinusTophat,
    /// `img + tophat − bothat`: classic contrast boost, vessels stay dark.
    ImagePlusTophatMinusBothat,
}

impl std::str::FromStr for HatCombination {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bothat-minus-tophat" => Ok(Self::BothatMinusTophat),
            "image-plus-tophat-minus-bothat" => Ok(Self::ImagePlusTophatMinusBothat),
            other => Err(format!("unknown hat combination `{other}`")),
        }
    }
}

impl std::fmt::Display for HatCombination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BothatMinusTophat => "bothat-minus-tophat",
            Self::ImagePlusTophatMinusBothat => "image-plus-tophat-minus-bothat",
        })
    }
}

/// `clamp(bothat − tophat, 0, 255)`.
pub fn vessel_enhance(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    combine_hats(img, se, HatCombination::BothatMinusTophat)
}

pub fn combine_hats(img: &GrayImage, se: &StructuringElement, how: HatCombination) -> GrayImage {
    let top = tophat(img, se);
    let bot = bothat(img, se);
    let data = img
        .data()
        .iter()
        .zip(top.data().iter().zip(bot.data()))
        .map(|(&v, (&t, &b))| {
            let (v, t, b) = (i32::from(v), i32::from(t), i32::from(b));
            let r = match how {
                HatCombination::BothatMinusTophat => b - t,
                HatCombination::ImagePlusTophatMinusBothat => v + t - b,
            };
            r.clamp(0, 255) as u8
        })
        .collect();
    GrayImage::new(img.width(), img.height(), data).expect("dimensions preserved")
}

/// Otsu's global threshold over the 256-bin histogram.
///
/// Scans `t` from the smallest present intensity upward and keeps the first
/// maximum of the between-class variance, with class 0 being `v ≤ t`; a
/// constant image therefore returns its own value.
pub fn otsu_threshold(img: &GrayImage) -> u8 {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[usize::from(v)] += 1;
    }
    let total = img.len() as u64;
    let sum_all: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let start = hist.iter().position(|&c| c > 0).unwrap_or(0);

    // Between-class variance is proportional to (n1*s0 - n0*s1)^2 / (n0*n1);
    // scores are compared as exact fractions so ties are detected exactly.
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best_t = start;
    let mut best: Option<Score> = None;
    for (t, &count) in hist.iter().enumerate().skip(start) {
        n0 += count;
        s0 += t as u64 * count;
        let n1 = total - n0;
        if n1 == 0 {
            break;
        }
        let diff = (n1 as i128 * s0 as i128 - n0 as i128 * (sum_all - s0) as i128).unsigned_abs();
        let score = Score {
            num: diff,
            den: n0 as u128 * n1 as u128,
        };
        if best.is_none_or(|b| score.beats(&b)) {
            best = Some(score);
            best_t = t;
        }
    }
    best_t as u8
}

/// `num^2 / den`.
#[derive(Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn beats(&self, other: &Score) -> bool {
        let lhs = self
            .num
            .checked_mul(self.num)
            .and_then(|v| v.checked_mul(other.den));
        let rhs = other
            .num
            .checked_mul(other.num)
            .and_then(|v| v.checked_mul(self.den));
        match (lhs, rhs) {
            (Some(l), Some(r)) => l > r,
            _ => {
                let a = self.num as f64 * self.num as f64 / self.den as f64;
                let b = other.num as f64 * other.num as f64 / other.den as f64;
                a > b
            }
        }
    }
}

/// `1` where the pixel is strictly above `t`.
pub fn binarize(img: &GrayImage, t: u8) -> BinaryImage {
    let data = img.data().iter().map(|&v| (v > t) as u8).collect();
    BinaryImage::new(img.width(), img.height(), data).expect("values are 0/1")
}

pub fn complement(img: &BinaryImage) -> BinaryImage {
    let data = img.data().iter().map(|&v| 1 - v).collect();
    BinaryImage::new(img.width(), img.height(), data).expect("values are 0/1")
}
