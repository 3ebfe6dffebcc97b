//! Classic gray-level co-occurrence matrices and gray-level quantization.
//!
//! The co-occurrence matrix counts pixel pairs at a fixed spatial offset:
//! `G[k, l]` is the number of positions whose value is `k` and whose named
//! neighbor holds `l`. Counting is one-directional (no symmetrization) and
//! pairs never cross image boundaries. This module is the exact counting
//! oracle for the differentiable block in [`crate::nglcm`] and doubles as a
//! plain texture feature extractor.

use crate::linalg::Tensor;
use thiserror::Error;

/// Default number of gray levels after quantization.
pub const DEFAULT_LEVELS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum GlcmError {
    #[error("need at least 2 gray levels, got {0}")]
    TooFewLevels(usize),
    #[error("image side must be >= 2, got {0}")]
    SideTooSmall(usize),
    #[error("pixel value {value} at index {index} outside [0, {max})")]
    PixelOutOfRange { value: f64, index: usize, max: f64 },
    #[error("pixel level {value} at index {index} not below {levels}")]
    LevelOutOfRange { value: usize, index: usize, levels: usize },
    #[error("pixel buffer length {got} does not match side {side}")]
    BadLength { got: usize, side: usize },
}

/// Square image with integer gray levels in `[0, levels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedImage {
    side: usize,
    levels: usize,
    pixels: Vec<u8>,
}

impl QuantizedImage {
    pub fn new(side: usize, levels: usize, pixels: Vec<u8>) -> Result<Self, GlcmError> {
        if levels < 2 {
            return Err(GlcmError::TooFewLevels(levels));
        }
        if side < 2 {
            return Err(GlcmError::SideTooSmall(side));
        }
        if pixels.len() != side * side {
            return Err(GlcmError::BadLength {
                got: pixels.len(),
                side,
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, &p)| usize::from(p) >= levels)
        {
            return Err(GlcmError::LevelOutOfRange {
                value: usize::from(value),
                index,
                levels,
            });
        }
        Ok(QuantizedImage { side, levels, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> usize {
        usize::from(self.pixels[r * self.side + c])
    }
}

/// Co-occurrence direction with its pixel offset `(drow, dcol)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Horizontally right: offset (0, 1).
    Deg0,
    /// Up-right diagonal: offset (-1, 1).
    Deg45,
    /// Straight up: offset (-1, 0).
    Deg90,
    /// Up-left diagonal: offset (-1, -1).
    Deg135,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Deg0,
        Direction::Deg45,
        Direction::Deg90,
        Direction::Deg135,
    ];

    pub fn offset(self) -> (i32, i32) {
        match self {
            Direction::Deg0 => (0, 1),
            Direction::Deg45 => (-1, 1),
            Direction::Deg90 => (-1, 0),
            Direction::Deg135 => (-1, -1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Deg0 => "deg0",
            Direction::Deg45 => "deg45",
            Direction::Deg90 => "deg90",
            Direction::Deg135 => "deg135",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deg0" | "0" => Ok(Direction::Deg0),
            "deg45" | "45" => Ok(Direction::Deg45),
            "deg90" | "90" => Ok(Direction::Deg90),
            "deg135" | "135" => Ok(Direction::Deg135),
            other => Err(format!("unknown direction '{other}'")),
        }
    }
}

/// Map raw values in `[0, 256)` to integer levels via
/// `pixel -> floor(pixel * levels / 256)`.
pub fn quantize(image: &Tensor, levels: usize) -> Result<QuantizedImage, GlcmError> {
    if levels < 2 {
        return Err(GlcmError::TooFewLevels(levels));
    }
    let (rows, cols) = image.shape();
    assert_eq!(rows, cols, "quantize expects a square image");
    let mut pixels = Vec::with_capacity(rows * cols);
    for (index, &v) in image.data().iter().enumerate() {
        if !(0.0..256.0).contains(&v) {
            return Err(GlcmError::PixelOutOfRange {
                value: v,
                index,
                max: 256.0,
            });
        }
        pixels.push((v * levels as f64 / 256.0).floor() as u8);
    }
    QuantizedImage::new(rows, levels, pixels)
}

/// Count pixel pairs `(p, p + offset)` with values `(k, l)`.
///
/// Returns a `levels x levels` tensor of integer-valued counts. The sum over
/// all cells equals the number of in-bounds pairs for the direction.
pub fn glcm_count(img: &QuantizedImage, dir: Direction) -> Tensor {
    let n = img.levels();
    let m = img.side() as i32;
    let (dr, dc) = dir.offset();
    let mut g = Tensor::zeros(n, n);
    for r in 0..m {
        for c in 0..m {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nr >= m || nc < 0 || nc >= m {
                continue;
            }
            let k = img.get(r as usize, c as usize);
            let l = img.get(nr as usize, nc as usize);
            g.set(k, l, g.get(k, l) + 1.0);
        }
    }
    g
}

/// Concatenated row-major flattenings of per-direction count matrices,
/// each normalized to sum 1 when nonempty.
pub fn glcm_feature_vector(img: &QuantizedImage, dirs: &[Direction]) -> Tensor {
    let n = img.levels();
    let mut out = Vec::with_capacity(dirs.len() * n * n);
    for &dir in dirs {
        let g = glcm_count(img, dir);
        let total = g.sum();
        if total > 0.0 {
            out.extend(g.data().iter().map(|v| v / total));
        } else {
            out.extend(g.data().iter().copied());
        }
    }
    Tensor::from_vec(1, out.len(), out).expect("length computed from inputs")
}
