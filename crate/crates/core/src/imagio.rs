//! Pixel buffers and the Netpbm / CSV codecs every stage reads and writes.
//!
//! Supported Netpbm kinds are P1–P6 with `maxval ≤ 255`. Binary images use
//! `1 = foreground (vessel)`, which is also the PBM convention of `1 = black`.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad magic number, expected P1..P6")]
    BadMagic,
    #[error("truncated data")]
    TruncatedData,
    #[error("maxval {0} unsupported (must be 1..=255)")]
    MaxvalUnsupported(u32),
    #[error("image dimension is zero")]
    DimensionZero,
    #[error("malformed header: {0}")]
    BadHeader(&'static str),
    #[error("malformed pixel value in ASCII raster")]
    BadPixel,
    #[error("buffer holds {got} values, {width}x{height} image needs {expected}")]
    LengthMismatch {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("binary image value {0} is not 0 or 1")]
    NotBinary(u8),
}

fn check_dims(width: usize, height: usize, channels: usize, got: usize) -> Result<(), ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::DimensionZero);
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(ImageError::BadHeader("dimensions overflow"))?;
    if expected != got {
        return Err(ImageError::LengthMismatch {
            width,
            height,
            expected,
            got,
        });
    }
    Ok(())
}

macro_rules! plane_accessors {
    () => {
        pub fn width(&self) -> usize {
            self.width
        }

        pub fn height(&self) -> usize {
            self.height
        }

        pub fn len(&self) -> usize {
            self.width * self.height
        }

        pub fn is_empty(&self) -> bool {
            self.len() == 0
        }

        pub fn data(&self) -> &[u8] {
            &self.data
        }

        pub fn into_data(self) -> Vec<u8> {
            self.data
        }

        pub fn get(&self, x: usize, y: usize) -> u8 {
            self.data[y * self.width + x]
        }

        /// Pixel at `(x, y)` with coordinates clamped into the image (edge replication).
        pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
            let cx = x.clamp(0, self.width as isize - 1) as usize;
            let cy = y.clamp(0, self.height as isize - 1) as usize;
            self.data[cy * self.width + cx]
        }
    };
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        check_dims(width, height, 1, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` in raster order.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    plane_accessors!();

    pub fn map(&self, f: impl Fn(u8) -> u8) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major image of `{0, 1}` values, `1` marking foreground (vessel).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        check_dims(width, height, 1, data.len())?;
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(ImageError::NotBinary(bad));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value as u8; width * height])
    }

    plane_accessors!();

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Foreground rendered as 255, background as 0.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v * 255).collect(),
        }
    }
}

/// Row-major interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        check_dims(width, height, 3, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// The three planes packed as `[r, g, b]` grayscale images.
    pub fn channel(&self, c: usize) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }
}

/// Any image a Netpbm file can hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Image {
    Gray(GrayImage),
    Rgb(RgbImage),
    Binary(BinaryImage),
}

impl Image {
    pub fn width(&self) -> usize {
        match self {
            Image::Gray(g) => g.width(),
            Image::Rgb(c) => c.width(),
            Image::Binary(b) => b.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Image::Gray(g) => g.height(),
            Image::Rgb(c) => c.height(),
            Image::Binary(b) => b.height(),
        }
    }

    /// Interprets the image as a foreground mask: binary as-is, gray and the
    /// green plane of RGB thresholded at `> 127` (white foreground).
    pub fn to_mask(&self) -> BinaryImage {
        let threshold = |g: &GrayImage| BinaryImage {
            width: g.width,
            height: g.height,
            data: g.data.iter().map(|&v| (v > 127) as u8).collect(),
        };
        match self {
            Image::Binary(b) => b.clone(),
            Image::Gray(g) => threshold(g),
            Image::Rgb(c) => threshold(&c.channel(1)),
        }
    }
}

impl From<GrayImage> for Image {
    fn from(v: GrayImage) -> Self {
        Image::Gray(v)
    }
}

impl From<RgbImage> for Image {
    fn from(v: RgbImage) -> Self {
        Image::Rgb(v)
    }
}

impl From<BinaryImage> for Image {
    fn from(v: BinaryImage) -> Self {
        Image::Binary(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Bitmap,
    Graymap,
    Pixmap,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<u32, ImageError> {
        self.skip_separators();
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value * 10 + u64::from(b - b'0');
            if value > u64::from(u32::MAX) {
                return Err(ImageError::BadHeader("number too large"));
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(if self.pos >= self.bytes.len() {
                ImageError::TruncatedData
            } else {
                ImageError::BadHeader("expected decimal number")
            });
        }
        Ok(value as u32)
    }

    fn ascii_value(&mut self, maxval: u32) -> Result<u8, ImageError> {
        match self.number() {
            Ok(v) if v <= maxval => Ok(scale(v, maxval)),
            Ok(_) => Err(ImageError::BadPixel),
            Err(ImageError::BadHeader(_)) => Err(ImageError::BadPixel),
            Err(e) => Err(e),
        }
    }

    fn ascii_bit(&mut self) -> Result<u8, ImageError> {
        self.skip_separators();
        match self.bytes.get(self.pos) {
            None => Err(ImageError::TruncatedData),
            Some(b'0') => {
                self.pos += 1;
                Ok(0)
            }
            Some(b'1') => {
                self.pos += 1;
                Ok(1)
            }
            Some(_) => Err(ImageError::BadPixel),
        }
    }
}

fn scale(v: u32, maxval: u32) -> u8 {
    if maxval == 255 {
        v as u8
    } else {
        ((v * 255 + maxval / 2) / maxval) as u8
    }
}

/// Decodes a single Netpbm image (P1–P6, `maxval ≤ 255`) from `bytes`.
///
/// P4/P1 decode to [`BinaryImage`] with PBM's `1 = black` kept as foreground.
/// Bytes after the first image are ignored.
pub fn read_netpbm(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.len() < 2 {
        return Err(if bytes.first().is_none_or(|&b| b == b'P') {
            ImageError::TruncatedData
        } else {
            ImageError::BadMagic
        });
    }
    let (kind, ascii) = match &bytes[..2] {
        b"P1" => (Kind::Bitmap, true),
        b"P2" => (Kind::Graymap, true),
        b"P3" => (Kind::Pixmap, true),
        b"P4" => (Kind::Bitmap, false),
        b"P5" => (Kind::Graymap, false),
        b"P6" => (Kind::Pixmap, false),
        _ => return Err(ImageError::BadMagic),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    if cur
        .bytes
        .get(cur.pos)
        .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
    {
        return Err(ImageError::BadMagic);
    }
    let width = cur.number()? as usize;
    let height = cur.number()? as usize;
    let maxval = if kind == Kind::Bitmap {
        1
    } else {
        cur.number()?
    };
    if width == 0 || height == 0 {
        return Err(ImageError::DimensionZero);
    }
    if maxval == 0 {
        return Err(ImageError::BadHeader("maxval is zero"));
    }
    if maxval > 255 {
        return Err(ImageError::MaxvalUnsupported(maxval));
    }
    let channels = if kind == Kind::Pixmap { 3 } else { 1 };
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(ImageError::BadHeader("dimensions overflow"))?;

    let data = if ascii {
        // Each ASCII sample needs at least one byte; bounds the allocation.
        if samples > bytes.len() {
            return Err(ImageError::TruncatedData);
        }
        let mut data = Vec::with_capacity(samples);
        for _ in 0..samples {
            data.push(if kind == Kind::Bitmap {
                cur.ascii_bit()?
            } else {
                cur.ascii_value(maxval)?
            });
        }
        data
    } else {
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cur.pos) {
            None => return Err(ImageError::TruncatedData),
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            Some(_) => return Err(ImageError::BadHeader("missing raster separator")),
        }
        let raster = &bytes[cur.pos..];
        if kind == Kind::Bitmap {
            let stride = width.div_ceil(8);
            let needed = stride
                .checked_mul(height)
                .ok_or(ImageError::BadHeader("dimensions overflow"))?;
            if raster.len() < needed {
                return Err(ImageError::TruncatedData);
            }
            let mut data = Vec::with_capacity(samples);
            for row in raster[..needed].chunks_exact(stride) {
                data.extend((0..width).map(|x| (row[x / 8] >> (7 - x % 8)) & 1));
            }
            data
        } else {
            if raster.len() < samples {
                return Err(ImageError::TruncatedData);
            }
            raster[..samples]
                .iter()
                .map(|&v| scale(u32::from(v).min(maxval), maxval))
                .collect()
        }
    };

    Ok(match kind {
        Kind::Bitmap => Image::Binary(BinaryImage::new(width, height, data)?),
        Kind::Graymap => Image::Gray(GrayImage::new(width, height, data)?),
        Kind::Pixmap => Image::Rgb(RgbImage::new(width, height, data)?),
    })
}

fn write_ascii_samples(out: &mut String, samples: &[u8], per_row: usize, bits: bool) {
    for row in samples.chunks(per_row) {
        let mut line_len = 0;
        for (i, v) in row.iter().enumerate() {
            let token = if bits {
                if *v == 1 { "1" } else { "0" }.to_string()
            } else {
                v.to_string()
            };
            // plain Netpbm lines should stay under 70 characters
            if i > 0 {
                if line_len + 1 + token.len() > 70 {
                    out.push('\n');
                    line_len = 0;
                } else {
                    out.push(' ');
                    line_len += 1;
                }
            }
            line_len += token.len();
            out.push_str(&token);
        }
        out.push('\n');
    }
}

/// Encodes `image` as Netpbm: P4/P5/P6, or P1/P2/P3 when `ascii` is set.
pub fn write_netpbm(image: &Image, ascii: bool) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    match (image, ascii) {
        (Image::Gray(g), false) => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(g.data());
            out
        }
        (Image::Rgb(c), false) => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(c.data());
            out
        }
        (Image::Binary(b), false) => {
            let mut out = format!("P4\n{w} {h}\n").into_bytes();
            for row in b.data().chunks_exact(w) {
                for byte in row.chunks(8) {
                    let packed = byte
                        .iter()
                        .enumerate()
                        .fold(0u8, |acc, (i, &bit)| acc | (bit << (7 - i)));
                    out.push(packed);
                }
            }
            out
        }
        (Image::Gray(g), true) => {
            let mut out = String::new();
            let _ = write!(out, "P2\n{w} {h}\n255\n");
            write_ascii_samples(&mut out, g.data(), w, false);
            out.into_bytes()
        }
        (Image::Rgb(c), true) => {
            let mut out = String::new();
            let _ = write!(out, "P3\n{w} {h}\n255\n");
            write_ascii_samples(&mut out, c.data(), 3 * w, false);
            out.into_bytes()
        }
        (Image::Binary(b), true) => {
            let mut out = String::new();
            let _ = write!(out, "P1\n{w} {h}\n");
            write_ascii_samples(&mut out, b.data(), w, true);
            out.into_bytes()
        }
    }
}

fn needs_quotes(field: &str) -> bool {
    field.contains([',', '"', '\n', '\r'])
}

/// Comma-separated rows with `\n` line ends; fields holding a comma, quote or
/// line break are quoted with inner quotes doubled.
pub fn write_csv<R, F>(rows: &[R]) -> Vec<u8>
where
    R: AsRef<[F]>,
    F: AsRef<str>,
{
    let mut out = String::new();
    for row in rows {
        for (i, field) in row.as_ref().iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let field = field.as_ref();
            if needs_quotes(field) {
                out.push('"');
                out.push_str(&field.replace('"', "\"\""));
                out.push('"');
            } else {
                out.push_str(field);
            }
        }
        out.push('\n');
    }
    out.into_bytes()
}
