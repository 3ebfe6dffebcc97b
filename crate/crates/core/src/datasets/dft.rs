//! Two-dimensional discrete Fourier transform over an explicit
//! real/imaginary pair, plus the spectrum masks used to stamp surface
//! patterns onto images.
//!
//! The transform is evaluated separably (rows, then columns) with
//! precomputed twiddle tables; the quadruple-loop definition stays in test
//! code as the oracle. Masks are kept conjugate-symmetric with the DC bin
//! always on, so filtering a real image returns a real image up to
//! rounding.

use crate::linalg::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Real/imaginary pair of equal shape.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

struct Twiddle {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddle {
    fn new(m: usize) -> Self {
        let mut cos = Vec::with_capacity(m);
        let mut sin = Vec::with_capacity(m);
        for k in 0..m {
            let angle = -2.0 * std::f64::consts::PI * k as f64 / m as f64;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
        Twiddle { cos, sin }
    }
}

/// One-dimensional transform of every row of (re, im); `sign` +1 for the
/// forward kernel exp(-2 pi i k n / m), -1 for the inverse kernel.
fn dft_rows(re: &Tensor, im: &Tensor, tw: &Twiddle, sign: f64) -> (Tensor, Tensor) {
    let (rows, m) = re.shape();
    let mut out_re = Tensor::zeros(rows, m);
    let mut out_im = Tensor::zeros(rows, m);
    for r in 0..rows {
        for u in 0..m {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for n in 0..m {
                let idx = (u * n) % m;
                let (c, s) = (tw.cos[idx], sign * tw.sin[idx]);
                let (xr, xi) = (re.get(r, n), im.get(r, n));
                acc_re += xr * c - xi * s;
                acc_im += xr * s + xi * c;
            }
            out_re.set(r, u, acc_re);
            out_im.set(r, u, acc_im);
        }
    }
    (out_re, out_im)
}

fn transform(re: &Tensor, im: &Tensor, sign: f64) -> Spectrum {
    let m = re.rows();
    assert_eq!(re.shape(), (m, m), "square input expected");
    let tw = Twiddle::new(m);
    let (rre, rim) = dft_rows(re, im, &tw, sign);
    // Columns via transposition.
    let (cre, cim) = dft_rows(&rre.transpose(), &rim.transpose(), &tw, sign);
    Spectrum {
        re: cre.transpose(),
        im: cim.transpose(),
    }
}

/// Unnormalized forward transform of a real square image.
pub fn dft2(img: &Tensor) -> Spectrum {
    transform(img, &Tensor::zeros(img.rows(), img.cols()), 1.0)
}

/// Inverse transform with the 1/m^2 normalization.
pub fn idft2(spec: &Spectrum) -> Spectrum {
    let m = spec.re.rows();
    let out = transform(&spec.re, &spec.im, -1.0);
    let norm = 1.0 / (m * m) as f64;
    Spectrum {
        re: out.re.scale(norm),
        im: out.im.scale(norm),
    }
}

/// Signed frequency magnitude of bin index `u` for side `m`.
fn freq(u: usize, m: usize) -> f64 {
    u.min(m - u) as f64
}

/// Low-pass indicator: keep bins with frequency magnitude <= r_cut.
pub fn radial_mask(side: usize, r_cut: f64) -> Tensor {
    Tensor::from_fn(side, side, |u, v| {
        let mag = (freq(u, side).powi(2) + freq(v, side).powi(2)).sqrt();
        if mag <= r_cut {
            1.0
        } else {
            0.0
        }
    })
}

/// Bernoulli(keep_p) mask made conjugate-symmetric by drawing once per
/// {(u,v), (-u,-v)} orbit; the DC bin is always kept.
pub fn random_symmetric_mask(side: usize, keep_p: f64, seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let m = side;
    let mut mask = Tensor::filled(m, m, -1.0);
    mask.set(0, 0, 1.0);
    for u in 0..m {
        for v in 0..m {
            if mask.get(u, v) >= 0.0 {
                continue;
            }
            let keep = if rng.random_range(0.0..1.0) < keep_p { 1.0 } else { 0.0 };
            mask.set(u, v, keep);
            let (cu, cv) = ((m - u) % m, (m - v) % m);
            if mask.get(cu, cv) < 0.0 {
                mask.set(cu, cv, keep);
            }
        }
    }
    mask
}

/// Multiply the spectrum by a real mask and invert. Returns the filtered
/// real image and the largest imaginary residue left behind, which is a
/// rounding-level quantity whenever the mask is conjugate-symmetric.
pub fn apply_spectrum_mask(img: &Tensor, mask: &Tensor) -> (Tensor, f64) {
    assert_eq!(img.shape(), mask.shape());
    let spec = dft2(img);
    let masked = Spectrum {
        re: spec.re.hadamard(mask).expect("same shape"),
        im: spec.im.hadamard(mask).expect("same shape"),
    };
    let back = idft2(&masked);
    (back.re, back.im.max_abs())
}

/// Bring a filtered image back into pixel range. Values already inside
/// [0, 255] (up to rounding slack) are only clamped; genuine excursions
/// trigger a full linear min-max rescale to [0, 255].
pub fn rescale_guard(img: &Tensor) -> Tensor {
    const SLACK: f64 = 1e-6;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in img.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo >= -SLACK && hi <= 255.0 + SLACK {
        return Tensor::from_fn(img.rows(), img.cols(), |r, c| img.get(r, c).clamp(0.0, 255.0));
    }
    if hi - lo < 1e-12 {
        return Tensor::filled(img.rows(), img.cols(), lo.clamp(0.0, 255.0));
    }
    Tensor::from_fn(img.rows(), img.cols(), |r, c| {
        (img.get(r, c) - lo) * 255.0 / (hi - lo)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadruple-loop transform straight from the definition.
    fn naive_dft2(img: &Tensor) -> Spectrum {
        let m = img.rows();
        let mut re = Tensor::zeros(m, m);
        let mut im = Tensor::zeros(m, m);
        for u in 0..m {
            for v in 0..m {
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for r in 0..m {
                    for c in 0..m {
                        let angle = -2.0 * std::f64::consts::PI
                            * (u as f64 * r as f64 + v as f64 * c as f64)
                            / m as f64;
                        acc_re += img.get(r, c) * angle.cos();
                        acc_im += img.get(r, c) * angle.sin();
                    }
                }
                re.set(u, v, acc_re);
                im.set(u, v, acc_im);
            }
        }
        Spectrum { re, im }
    }

    fn random_image(seed: u64, m: usize) -> Tensor {
        let mut rng = StdRng::seed_from_u64(seed);
        Tensor::from_fn(m, m, |_, _| rng.random_range(0.0..255.0))
    }

    #[test]
    fn separable_transform_matches_naive_oracle() {
        let img = random_image(1, 16);
        let fast = dft2(&img);
        let slow = naive_dft2(&img);
        assert!(fast.re.sub(&slow.re).unwrap().max_abs() < 1e-8);
        assert!(fast.im.sub(&slow.im).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn round_trip_recovers_image() {
        let img = random_image(2, 12);
        let back = idft2(&dft2(&img));
        assert!(back.re.sub(&img).unwrap().max_abs() < 1e-9);
        assert!(back.im.max_abs() < 1e-9);
    }

    #[test]
    fn all_pass_mask_is_identity() {
        let img = random_image(3, 14);
        let mask = Tensor::filled(14, 14, 1.0);
        let (out, residue) = apply_spectrum_mask(&img, &mask);
        assert!(out.sub(&img).unwrap().max_abs() < 1e-9);
        assert!(residue < 1e-9 * img.frobenius_norm());
        let guarded = rescale_guard(&out);
        assert!(guarded.sub(&img).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn dc_only_mask_extracts_mean() {
        let img = random_image(4, 10);
        let mut mask = Tensor::zeros(10, 10);
        mask.set(0, 0, 1.0);
        let (out, _) = apply_spectrum_mask(&img, &mask);
        let mean = img.sum() / 100.0;
        for &v in out.data() {
            assert!((v - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn random_mask_is_conjugate_symmetric_and_keeps_dc() {
        for seed in 0..10u64 {
            let m = 16;
            let mask = random_symmetric_mask(m, 0.5, seed);
            assert_eq!(mask.get(0, 0), 1.0);
            for u in 0..m {
                for v in 0..m {
                    assert_eq!(mask.get(u, v), mask.get((m - u) % m, (m - v) % m));
                }
            }
        }
    }

    #[test]
    fn symmetric_masks_preserve_realness() {
        let img = random_image(5, 16);
        for mask in [radial_mask(16, 4.0), random_symmetric_mask(16, 0.5, 7)] {
            let (_, residue) = apply_spectrum_mask(&img, &mask);
            assert!(residue <= 1e-9 * img.frobenius_norm());
        }
    }

    #[test]
    fn radial_mask_on_impulse_matches_naive_band_limited_kernel() {
        // An impulse image filtered by the radial mask equals the inverse
        // transform of the mask itself (evaluated by the naive oracle).
        let m = 16;
        let mut img = Tensor::zeros(m, m);
        img.set(0, 0, 1.0);
        let mask = radial_mask(m, m as f64 / 4.0);
        let (out, _) = apply_spectrum_mask(&img, &mask);
        // Naive inverse of the mask spectrum.
        let mut want = Tensor::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                let mut acc = 0.0;
                for u in 0..m {
                    for v in 0..m {
                        let angle = 2.0 * std::f64::consts::PI
                            * (u as f64 * r as f64 + v as f64 * c as f64)
                            / m as f64;
                        acc += mask.get(u, v) * angle.cos();
                    }
                }
                want.set(r, c, acc / (m * m) as f64);
            }
        }
        assert!(out.sub(&want).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn rescale_guard_handles_excursions_and_constants() {
        let img = Tensor::from_rows(&[vec![-10.0, 300.0], vec![100.0, 50.0]]);
        let out = rescale_guard(&img);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 1), 255.0);
        let flat = Tensor::filled(3, 3, 400.0);
        let out = rescale_guard(&flat);
        assert_eq!(out.get(0, 0), 255.0);
    }
}
