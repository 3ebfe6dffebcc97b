//! Procedural background textures and class glyphs.
//!
//! Backgrounds are high-frequency periodic patterns (stripes, checkers,
//! diagonals at two scales) with per-image phase jitter and pixel noise;
//! their pair-count signatures separate cleanly at 16 gray levels.
//! Glyphs are solid low-frequency shapes drawn at mid-gray, one per class,
//! with small position jitter. The semantic factor is the shape, the
//! nuisance factor is the texture, and the two are rendered independently.

use crate::linalg::Tensor;
use rand::rngs::StdRng;
use rand::Rng;

/// Intensity of the glyph patches, one quantization band above the
/// brightest texture.
pub const GLYPH_INTENSITY: f64 = 205.0;
const NOISE_AMPLITUDE: f64 = 6.0;

/// Per-family (dark, bright) intensity pairs. Every pair lands on a
/// distinct pair of 16-level quantization bins, so families stay separable
/// in any single co-occurrence direction even when their spatial structure
/// coincides there. The bands sit far from the glyph's mid-gray band, and
/// their amplitude dwarfs the glyph contrast: the background is the
/// salient, high-variance signal.
const PALETTES: [(f64, f64); 8] = [
    (84.0, 148.0),
    (100.0, 164.0),
    (68.0, 180.0),
    (84.0, 164.0),
    (100.0, 180.0),
    (68.0, 148.0),
    (84.0, 180.0),
    (100.0, 148.0),
];

/// Render background texture `id` at the given side length. Patterns cycle
/// through {horizontal stripes, vertical stripes, checkerboard, diagonal
/// stripes}, double their period every fourth id, and draw from a
/// family-specific intensity palette.
pub fn render_background(id: usize, side: usize, rng: &mut StdRng) -> Tensor {
    let kind = id % 4;
    let period = 2 * (1 + id / 4);
    let (dark, bright_v) = PALETTES[id % PALETTES.len()];
    let phase_r = rng.random_range(0..period);
    let phase_c = rng.random_range(0..period);
    let half = period / 2;
    let mut img = Tensor::from_fn(side, side, |r, c| {
        let (rr, cc) = (r + phase_r, c + phase_c);
        let bright = match kind {
            0 => (rr / half) % 2 == 0,
            1 => (cc / half) % 2 == 0,
            2 => ((rr / half) + (cc / half)) % 2 == 0,
            _ => ((rr + cc) / half) % 2 == 0,
        };
        if bright {
            bright_v
        } else {
            dark
        }
    });
    for v in img.data_mut() {
        *v = (*v + rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).clamp(0.0, 255.0);
    }
    img
}

/// Stamp the glyph for `class`: a constellation of identical solid blocks
/// whose arrangement encodes the class. Every class places the same number
/// of equally sized blocks at the same intensity, so first-order and
/// pair-count statistics are class-blind by construction; only the spatial
/// layout distinguishes classes. The whole constellation shifts rigidly by
/// a small random jitter.
pub fn draw_glyph(img: &mut Tensor, class: usize, rng: &mut StdRng) {
    let side = img.rows();
    // Three anchor coordinates per axis, scaled to the image.
    let anchors = [side / 7, side * 3 / 7, side * 5 / 7];
    let block = (side / 6).max(3);
    let jitter = 2i32;
    let (dr, dc) = (
        rng.random_range(-jitter..=jitter),
        rng.random_range(-jitter..=jitter),
    );
    for &cell in constellation(class) {
        let (ar, ac) = (anchors[cell / 3] as i32 + dr, anchors[cell % 3] as i32 + dc);
        for r in ar..ar + block as i32 {
            for c in ac..ac + block as i32 {
                if r >= 0 && c >= 0 && (r as usize) < side && (c as usize) < side {
                    img.set(r as usize, c as usize, GLYPH_INTENSITY);
                }
            }
        }
    }
}

/// Which cells of the 3x3 placement grid each class occupies.
fn constellation(class: usize) -> &'static [usize] {
    const SHAPES: [[usize; 3]; 7] = [
        [0, 1, 2], // top row
        [0, 3, 6], // left column
        [0, 4, 8], // main diagonal
        [2, 4, 6], // anti-diagonal
        [0, 2, 6], // three corners
        [1, 3, 8], // scattered L
        [2, 3, 7], // scattered mirror
    ];
    &SHAPES[class % SHAPES.len()]
}
