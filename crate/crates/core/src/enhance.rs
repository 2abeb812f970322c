//! Grayscale enhancement chain: green channel extraction, SNR measurement,
//! CLAHE, linear intensity stretch, median filtering and the isotropic
//! Gaussian matched filter.
//!
//! Every real-valued stage rounds half-up back to 8-bit intensities, and all
//! neighbourhood operations replicate edge pixels.

use thiserror::Error;

use crate::imagio::{GrayImage, RgbImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnhanceError {
    #[error("image has zero intensity variance")]
    ZeroVariance,
    #[error("image {width}x{height} is smaller than the {tiles_x}x{tiles_y} tile grid")]
    ImageTooSmall {
        width: usize,
        height: usize,
        tiles_x: usize,
        tiles_y: usize,
    },
    #[error("intensity quantiles coincide at {0}")]
    DegenerateRange(u8),
    #[error("window size {0} must be odd and at least 3")]
    EvenWindow(usize),
    #[error("kernel side {0} must be odd")]
    EvenKernel(usize),
    #[error("invalid parameter: {0}")]
    InvalidParams(&'static str),
}

pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

pub(crate) fn to_intensity(v: f64) -> u8 {
    round_half_up(v).clamp(0.0, 255.0) as u8
}

pub fn green_channel(img: &RgbImage) -> GrayImage {
    img.channel(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrReport {
    pub mean: f64,
    pub std: f64,
    pub snr: f64,
}

/// Mean over population standard deviation of the pixel intensities.
pub fn snr(img: &GrayImage) -> Result<SnrReport, EnhanceError> {
    let n = img.len() as u128;
    let (sum, sum_sq) = img.data().iter().fold((0u128, 0u128), |(s, q), &v| {
        let v = u128::from(v);
        (s + v, q + v * v)
    });
    // n² var = n Σv² − (Σv)², exact in integers
    let scaled_var = n * sum_sq - sum * sum;
    if scaled_var == 0 {
        return Err(EnhanceError::ZeroVariance);
    }
    let mean = sum as f64 / n as f64;
    let std = (scaled_var as f64).sqrt() / n as f64;
    Ok(SnrReport {
        mean,
        std,
        snr: mean / std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
    Rayleigh,
}

impl std::str::FromStr for Distribution {
    type Err = EnhanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "rayleigh" => Ok(Distribution::Rayleigh),
            _ => Err(EnhanceError::InvalidParams(
                "distribution must be uniform or rayleigh",
            )),
        }
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distribution::Uniform => "uniform",
            Distribution::Rayleigh => "rayleigh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub bins: usize,
    /// Normalized per-bin cap, as a fraction of the tile's pixel count.
    pub clip_limit: f64,
    pub distribution: Distribution,
    pub rayleigh_alpha: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            bins: 256,
            clip_limit: 0.02,
            distribution: Distribution::Rayleigh,
            rayleigh_alpha: 0.4,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<(), EnhanceError> {
        if self.tiles_x < 1 || self.tiles_y < 1 {
            return Err(EnhanceError::InvalidParams(
                "tile counts must be at least 1",
            ));
        }
        if !(2..=256).contains(&self.bins) {
            return Err(EnhanceError::InvalidParams("bins must be in 2..=256"));
        }
        if !(self.clip_limit > 0.0 && self.clip_limit <= 1.0) {
            return Err(EnhanceError::InvalidParams("clip_limit must be in (0, 1]"));
        }
        if !(self.rayleigh_alpha > 0.0 && self.rayleigh_alpha.is_finite()) {
            return Err(EnhanceError::InvalidParams(
                "rayleigh_alpha must be positive",
            ));
        }
        Ok(())
    }
}

/// Caps every bin at `limit` and spreads the excess uniformly, repeating
/// until nothing exceeds the cap or 16 passes have run. The total count is
/// preserved.
fn clip_histogram(hist: &mut [u64], limit: u64) {
    let bins = hist.len() as u64;
    for _ in 0..16 {
        let mut excess = 0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        if excess == 0 {
            break;
        }
        let per_bin = excess / bins;
        let remainder = excess % bins;
        for h in hist.iter_mut() {
            *h += per_bin;
        }
        if let Some(step) = bins.checked_div(remainder) {
            let step = step as usize;
            for h in hist.iter_mut().step_by(step).take(remainder as usize) {
                *h += 1;
            }
        }
    }
}

/// Target intensity for cumulative count `cum` out of `total`.
fn target_intensity(cum: u64, total: u64, p: &ClaheParams) -> f64 {
    match p.distribution {
        Distribution::Uniform => 255.0 * cum as f64 / total as f64,
        Distribution::Rayleigh => {
            let c = (cum as f64 / total as f64).min(1.0 - 1e-6);
            let v = p.rayleigh_alpha * (2.0 * (1.0 / (1.0 - c)).ln()).sqrt();
            255.0 * v.min(1.0)
        }
    }
}

/// Contrast-limited adaptive histogram equalization.
///
/// The image is edge-padded on the right/bottom so the tile grid divides it
/// evenly. Each tile's clipped histogram CDF is matched to the target
/// distribution, and output pixels blend the four nearest tile mappings
/// bilinearly (one or two mappings near the borders).
pub fn clahe(img: &GrayImage, p: &ClaheParams) -> Result<GrayImage, EnhanceError> {
    p.validate()?;
    let (w, h) = (img.width(), img.height());
    if w < p.tiles_x || h < p.tiles_y {
        return Err(EnhanceError::ImageTooSmall {
            width: w,
            height: h,
            tiles_x: p.tiles_x,
            tiles_y: p.tiles_y,
        });
    }
    let tw = w.div_ceil(p.tiles_x);
    let th = h.div_ceil(p.tiles_y);
    let tile_pixels = (tw * th) as u64;
    let limit = ((p.clip_limit * tile_pixels as f64).ceil() as u64).max(1);
    let bin_of = |v: u8| usize::from(v) * p.bins / 256;

    let mut maps = vec![0.0f64; p.tiles_x * p.tiles_y * p.bins];
    for ty in 0..p.tiles_y {
        for tx in 0..p.tiles_x {
            let mut hist = vec![0u64; p.bins];
            for y in ty * th..(ty + 1) * th {
                for x in tx * tw..(tx + 1) * tw {
                    hist[bin_of(img.get_clamped(x as isize, y as isize))] += 1;
                }
            }
            clip_histogram(&mut hist, limit);
            let map = &mut maps[(ty * p.tiles_x + tx) * p.bins..][..p.bins];
            let mut cum = 0u64;
            for (m, &count) in map.iter_mut().zip(&hist) {
                cum += count;
                *m = target_intensity(cum, tile_pixels, p);
            }
        }
    }

    // (lower tile, upper tile, weight of upper) along one axis
    let axis = |pos: usize, tile: usize, tiles: usize| -> (usize, usize, f64) {
        let first = (tile as f64 - 1.0) / 2.0;
        let last = (tiles - 1) as f64 * tile as f64 + first;
        let pos = pos as f64;
        if pos <= first {
            (0, 0, 0.0)
        } else if pos >= last {
            (tiles - 1, tiles - 1, 0.0)
        } else {
            let t = (pos - first) / tile as f64;
            let lo = (t.floor() as usize).min(tiles - 2);
            (lo, lo + 1, t - lo as f64)
        }
    };
    let xs: Vec<_> = (0..w).map(|x| axis(x, tw, p.tiles_x)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, wy) = axis(y, th, p.tiles_y);
        for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
            let bin = bin_of(img.get(x, y));
            let m = |tx: usize, ty: usize| maps[(ty * p.tiles_x + tx) * p.bins + bin];
            let top = m(x0, y0) + wx * (m(x1, y0) - m(x0, y0));
            let bottom = m(x0, y1) + wx * (m(x1, y1) - m(x0, y1));
            out.push(to_intensity(top + wy * (bottom - top)));
        }
    }
    Ok(GrayImage::new(w, h, out).expect("dimensions preserved"))
}

/// Intensity at nearest-rank quantile `frac`: element `round(frac·(N−1))` of
/// the sorted pixels.
pub(crate) fn quantile_from_histogram(hist: &[u64; 256], total: u64, frac: f64) -> u8 {
    let rank = round_half_up(frac * (total - 1) as f64) as u64;
    let mut cum = 0;
    for (v, &count) in hist.iter().enumerate() {
        cum += count;
        if cum > rank {
            return v as u8;
        }
    }
    255
}

/// Linear contrast stretch mapping the `low_frac` and `high_frac` intensity
/// quantiles to 0 and 255, clamping outside that range.
pub fn adjust_intensity(
    img: &GrayImage,
    low_frac: f64,
    high_frac: f64,
) -> Result<GrayImage, EnhanceError> {
    if !(0.0..1.0).contains(&low_frac) || !(low_frac < high_frac && high_frac <= 1.0) {
        return Err(EnhanceError::InvalidParams(
            "need 0 <= low_frac < high_frac <= 1",
        ));
    }
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[usize::from(v)] += 1;
    }
    let total = img.len() as u64;
    let lo = quantile_from_histogram(&hist, total, low_frac);
    let hi = quantile_from_histogram(&hist, total, high_frac);
    if lo == hi {
        return Err(EnhanceError::DegenerateRange(lo));
    }
    let span = f64::from(hi) - f64::from(lo);
    let lut: Vec<u8> = (0..=255u8)
        .map(|v| to_intensity((f64::from(v) - f64::from(lo)) * 255.0 / span))
        .collect();
    Ok(img.map(|v| lut[usize::from(v)]))
}

/// `k`×`k` median filter with edge replication.
pub fn median_filter(img: &GrayImage, k: usize) -> Result<GrayImage, EnhanceError> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(EnhanceError::EvenWindow(k));
    }
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let out = GrayImage::from_fn(img.width(), img.height(), |x, y| {
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                window.push(img.get_clamped(x as isize + dx, y as isize + dy));
            }
        }
        let mid = window.len() / 2;
        *window.select_nth_unstable(mid).1
    })
    .expect("dimensions preserved");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub sigma: f64,
    pub radius: usize,
    pub normalized: bool,
}

impl KernelSpec {
    /// Normalized kernel truncated at `ceil(3σ)`.
    pub fn for_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            radius: ((3.0 * sigma).ceil() as usize).max(1),
            normalized: true,
        }
    }
}

/// Square, odd-sided correlation kernel stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    side: usize,
    values: Vec<f64>,
}

impl Kernel {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self, EnhanceError> {
        if side.is_multiple_of(2) {
            return Err(EnhanceError::EvenKernel(side));
        }
        if values.len() != side * side {
            return Err(EnhanceError::InvalidParams(
                "kernel values must fill side x side",
            ));
        }
        Ok(Self { side, values })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Weight at offset `(dx, dy)` from the centre.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius() as isize;
        self.values[((dy + r) * self.side as isize + dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Samples `G(x, y) = exp(−(x² + y²) / 2σ²) / (2πσ²)` on the integer grid
/// `|x|, |y| ≤ radius`, optionally renormalized to unit sum.
pub fn gaussian_kernel(spec: &KernelSpec) -> Result<Kernel, EnhanceError> {
    if !(spec.sigma > 0.0 && spec.sigma.is_finite()) {
        return Err(EnhanceError::InvalidParams("sigma must be positive"));
    }
    if spec.radius < 1 {
        return Err(EnhanceError::InvalidParams("radius must be at least 1"));
    }
    let r = spec.radius as isize;
    let two_var = 2.0 * spec.sigma * spec.sigma;
    let scale = 1.0 / (std::f64::consts::PI * two_var);
    let mut values = Vec::with_capacity((2 * spec.radius + 1).pow(2));
    for y in -r..=r {
        for x in -r..=r {
            values.push(scale * (-((x * x + y * y) as f64) / two_var).exp());
        }
    }
    if spec.normalized {
        let sum: f64 = values.iter().sum();
        for v in &mut values {
            *v /= sum;
        }
    }
    Kernel::new(2 * spec.radius + 1, values)
}

/// Correlation with edge replication, clamped and rounded half-up to 8 bits.
pub fn convolve(img: &GrayImage, kernel: &Kernel) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let r = kernel.radius();
    let pw = w + 2 * r;
    let mut padded = Vec::with_capacity(pw * (h + 2 * r));
    for y in 0..h + 2 * r {
        for x in 0..pw {
            padded.push(f64::from(
                img.get_clamped(x as isize - r as isize, y as isize - r as isize),
            ));
        }
    }
    let side = kernel.side();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, krow) in kernel.values().chunks_exact(side).enumerate() {
                let row = &padded[(y + ky) * pw + x..][..side];
                acc += krow.iter().zip(row).map(|(k, v)| k * v).sum::<f64>();
            }
            out.push(to_intensity(acc));
        }
    }
    GrayImage::new(w, h, out).expect("dimensions preserved")
}
