//! LBP and single-level Haar DWT representations of a grayscale ultrasound
//! image, stacked with the raw image into the 3-channel fusion object the
//! networks consume.

use crate::tensor::{write_container, ContainerError, Tensor};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug)]
pub enum TextureError {
    /// Image smaller than the 8x8 minimum or with inconsistent buffer length.
    InvalidImage(String),
    /// Planes passed to `fuse` disagree in size.
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    Pgm(String),
    Io(std::io::Error),
}

impl fmt::Display for TextureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextureError::InvalidImage(m) => write!(f, "invalid image: {m}"),
            TextureError::DimensionMismatch { expected, got } => {
                write!(f, "plane size {got:?} does not match {expected:?}")
            }
            TextureError::Pgm(m) => write!(f, "pgm: {m}"),
            TextureError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for TextureError {}

impl From<std::io::Error> for TextureError {
    fn from(e: std::io::Error) -> Self {
        TextureError::Io(e)
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, TextureError> {
        if width < 8 || height < 8 {
            return Err(TextureError::InvalidImage(format!(
                "{width}x{height} below the 8x8 minimum"
            )));
        }
        if pixels.len() != width * height {
            return Err(TextureError::InvalidImage(format!(
                "{} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Pixel with coordinates clamped to the border (edge replication).
    fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[yc * self.width + xc]
    }
}

/// Float-valued plane, the output of the DWT (padded to even dimensions).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatPlane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Columns/rows appended by edge replication before the transform, so
    /// downstream overlays can crop back to the source size.
    pub pad_right: usize,
    pub pad_bottom: usize,
}

/// Three-channel (raw US, LBP, DWT) stack over one nodule image, every
/// channel in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionObject {
    width: usize,
    height: usize,
    /// Channel-major: `[raw, lbp, dwt]`, each `width * height` long.
    channels: [Vec<f64>; 3],
    pub pad_right: usize,
    pub pad_bottom: usize,
}

impl FusionObject {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    /// `[3, height, width]` tensor, channel order (raw, lbp, dwt).
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.width * self.height);
        for c in &self.channels {
            data.extend_from_slice(c);
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("channel sizes agree")
    }

    /// Caches the fusion object as a one-record FCT1 container.
    pub fn write_to(&self, w: &mut impl std::io::Write) -> Result<(), ContainerError> {
        write_container(w, &[("fusion".to_string(), self.to_tensor())])
    }
}

/// Classic local binary pattern: radius 1, 8 neighbors, `neighbor >= center`
/// sets a bit, clockwise from the top-left neighbor, most significant bit
/// first. Borders use edge replication.
pub fn lbp_image(img: &GrayImage) -> GrayImage {
    // Clockwise from top-left: TL, T, TR, R, BR, B, BL, L.
    const OFFSETS: [(isize, isize); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
        (0, 1),
        (-1, 1),
        (-1, 0),
    ];
    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..img.height {
        for x in 0..img.width {
            let center = img.get(x, y);
            let mut code = 0u8;
            for (bit, (dx, dy)) in OFFSETS.iter().enumerate() {
                let neighbor = img.get_clamped(x as isize + dx, y as isize + dy);
                if neighbor >= center {
                    code |= 1 << (7 - bit);
                }
            }
            out[y * img.width + x] = code;
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

/// Pads an image to even dimensions by replicating the last column/row.
pub fn pad_to_even(img: &GrayImage) -> (GrayImage, usize, usize) {
    let pad_right = img.width % 2;
    let pad_bottom = img.height % 2;
    if pad_right == 0 && pad_bottom == 0 {
        return (img.clone(), 0, 0);
    }
    let (w, h) = (img.width + pad_right, img.height + pad_bottom);
    let mut pixels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            pixels[y * w + x] =
                img.get_clamped(x.min(img.width - 1) as isize, y.min(img.height - 1) as isize);
        }
    }
    (
        GrayImage {
            width: w,
            height: h,
            pixels,
        },
        pad_right,
        pad_bottom,
    )
}

/// Single-level 2-D orthonormal Haar transform, rows then columns, with the
/// four subbands tiled into quadrants (LL top-left, LH top-right, HL
/// bottom-left, HH bottom-right) so the plane keeps the input size. Odd
/// dimensions are padded by edge replication first; the padding is recorded
/// on the output plane.
pub fn dwt_image(img: &GrayImage) -> FloatPlane {
    let (padded, pad_right, pad_bottom) = pad_to_even(img);
    let (w, h) = (padded.width, padded.height);
    let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;

    // Row pass: low coefficients in the left half, high in the right.
    let mut rows = vec![0.0f64; w * h];
    for y in 0..h {
        for i in 0..w / 2 {
            let a = padded.get(2 * i, y) as f64;
            let b = padded.get(2 * i + 1, y) as f64;
            rows[y * w + i] = (a + b) * inv_sqrt2;
            rows[y * w + w / 2 + i] = (a - b) * inv_sqrt2;
        }
    }
    // Column pass: low into the top half, high into the bottom.
    let mut out = vec![0.0f64; w * h];
    for x in 0..w {
        for i in 0..h / 2 {
            let a = rows[(2 * i) * w + x];
            let b = rows[(2 * i + 1) * w + x];
            out[i * w + x] = (a + b) * inv_sqrt2;
            out[(h / 2 + i) * w + x] = (a - b) * inv_sqrt2;
        }
    }
    FloatPlane {
        width: w,
        height: h,
        values: out,
        pad_right,
        pad_bottom,
    }
}

/// Inverse of [`dwt_image`] on the padded plane; reconstructs pixel values
/// as f64 (still including any padding).
pub fn dwt_inverse(plane: &FloatPlane) -> Vec<f64> {
    let (w, h) = (plane.width, plane.height);
    let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;
    // Undo the column pass.
    let mut rows = vec![0.0f64; w * h];
    for x in 0..w {
        for i in 0..h / 2 {
            let low = plane.values[i * w + x];
            let high = plane.values[(h / 2 + i) * w + x];
            rows[(2 * i) * w + x] = (low + high) * inv_sqrt2;
            rows[(2 * i + 1) * w + x] = (low - high) * inv_sqrt2;
        }
    }
    // Undo the row pass.
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for i in 0..w / 2 {
            let low = rows[y * w + i];
            let high = rows[y * w + w / 2 + i];
            out[y * w + 2 * i] = (low + high) * inv_sqrt2;
            out[y * w + 2 * i + 1] = (low - high) * inv_sqrt2;
        }
    }
    out
}

/// Stacks the three modalities into a fusion object: channel 0 is the raw
/// image scaled by 1/255, channel 1 the LBP image scaled by 1/255, channel 2
/// the DWT plane min-max normalized to [0, 1] (an all-equal plane maps to 0).
pub fn fuse(us: &GrayImage, lbp: &GrayImage, dwt: &FloatPlane) -> Result<FusionObject, TextureError> {
    let expected = (us.width, us.height);
    for got in [(lbp.width, lbp.height), (dwt.width, dwt.height)] {
        if got != expected {
            return Err(TextureError::DimensionMismatch { expected, got });
        }
    }
    let raw = us.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let lbp_ch = lbp.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let (lo, hi) = dwt
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let dwt_ch = if span > 0.0 {
        dwt.values.iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![0.0; dwt.values.len()]
    };
    Ok(FusionObject {
        width: us.width,
        height: us.height,
        channels: [raw, lbp_ch, dwt_ch],
        pad_right: dwt.pad_right,
        pad_bottom: dwt.pad_bottom,
    })
}

/// Full featurization pipeline: pad to even dimensions, compute LBP and DWT
/// on the padded image, and fuse.
pub fn featurize(img: &GrayImage) -> FusionObject {
    let (padded, _, _) = pad_to_even(img);
    let lbp = lbp_image(&padded);
    let dwt = dwt_image(&padded);
    fuse(&padded, &lbp, &dwt).expect("padded planes share dimensions")
}

/// Box-filter (area-average) resampling of one channel plane to an arbitrary
/// target size. Exact overlap weights, so downsampling is mean-preserving.
pub fn resample_area(values: &[f64], w: usize, h: usize, tw: usize, th: usize) -> Vec<f64> {
    if (w, h) == (tw, th) {
        return values.to_vec();
    }
    let sx = w as f64 / tw as f64;
    let sy = h as f64 / th as f64;
    let mut out = vec![0.0; tw * th];
    for ty in 0..th {
        let y0 = ty as f64 * sy;
        let y1 = y0 + sy;
        for tx in 0..tw {
            let x0 = tx as f64 * sx;
            let x1 = x0 + sx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let mut y = y0;
            while y < y1 - 1e-12 {
                let yi = y.floor() as usize;
                let ynext = (yi as f64 + 1.0).min(y1);
                let wy = ynext - y;
                let mut x = x0;
                while x < x1 - 1e-12 {
                    let xi = x.floor() as usize;
                    let xnext = (xi as f64 + 1.0).min(x1);
                    let wx = xnext - x;
                    acc += values[yi.min(h - 1) * w + xi.min(w - 1)] * wx * wy;
                    area += wx * wy;
                    x = xnext;
                }
                y = ynext;
            }
            out[ty * tw + tx] = acc / area;
        }
    }
    out
}

// ---- PGM (P5) -------------------------------------------------------------

/// Reads an 8-bit binary PGM (P5) image.
pub fn read_pgm(path: &Path) -> Result<GrayImage, TextureError> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut header = Vec::new();
    // Header tokens: magic, width, height, maxval; comments start with '#'.
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        header.clear();
        let n = reader.read_until(b'\n', &mut header)?;
        if n == 0 {
            return Err(TextureError::Pgm("truncated header".into()));
        }
        let line = String::from_utf8_lossy(&header);
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "P5" {
        return Err(TextureError::Pgm(format!("unsupported magic {}", tokens[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| TextureError::Pgm(format!("bad header token {s:?}")))
    };
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let maxval = parse(&tokens[3])?;
    if maxval != 255 {
        return Err(TextureError::Pgm(format!("maxval {maxval}, expected 255")));
    }
    let mut pixels = vec![0u8; width * height];
    std::io::Read::read_exact(&mut reader, &mut pixels)
        .map_err(|e| TextureError::Pgm(format!("pixel data: {e}")))?;
    GrayImage::new(width, height, pixels)
}

/// Writes an 8-bit binary PGM (P5) image.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), TextureError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{} {}\n255\n", img.width, img.height)?;
    file.write_all(&img.pixels)?;
    Ok(())
}

/// Renders a float plane to 8 bits by min-max scaling, for inspection.
pub fn plane_to_gray(plane: &FloatPlane) -> GrayImage {
    let (lo, hi) = plane
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = plane
        .values
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
        .collect();
    GrayImage {
        width: plane.width,
        height: plane.height,
        pixels,
    }
}
