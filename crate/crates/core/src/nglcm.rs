//! Differentiable co-occurrence texture block.
//!
//! The block rebuilds a gray-level co-occurrence count as a product of two
//! thresholded matrices. An image is flattened to a row vector `a`, a
//! neighbor-difference vector `b` is formed by a shift operator, and both
//! are pushed through a clamped thresholding
//! `s(v; phi)[k, j] = clamp(v_j - phi_k, 0, 1)` with learnable threshold
//! vectors `phi_a`, `phi_b`. The output `G = S_a * S_b^T` is an
//! `levels x levels` matrix with exact (sub)gradients everywhere, so the
//! thresholds train by backpropagation.
//!
//! With thresholds frozen to the staircase `{n - eps}` over consecutive
//! integer levels, the thresholded rows become cumulative indicators; a
//! row-differencing pass turns them into exact per-level indicators, and
//! the product reproduces classic integer pair counts
//! ([`counts_via_staircase`], checked against [`crate::glcm::glcm_count`]).
//!
//! Boundary positions whose named neighbor leaves the image are masked out:
//! a horizontal co-occurrence must not pair pixels across row boundaries.
//! Masked positions contribute zero columns to both factors.

use crate::glcm::{Direction, GlcmError, QuantizedImage};
use crate::linalg::Tensor;
use rand::rngs::StdRng;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NglcmError {
    #[error("epsilon must lie strictly inside (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("vector length {len} is not the square of side {side}")]
    BadLength { len: usize, side: usize },
    #[error("threshold vector must be Nx1, got {rows}x{cols}")]
    BadPhiShape { rows: usize, cols: usize },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("gradient shape {got:?} does not match expected {want:?}")]
    GradShape { got: (usize, usize), want: (usize, usize) },
    #[error(transparent)]
    Image(#[from] GlcmError),
}

/// Learnable threshold vectors, one entry per gray level.
#[derive(Debug, Clone, PartialEq)]
pub struct NglcmParams {
    pub phi_a: Tensor,
    pub phi_b: Tensor,
}

impl NglcmParams {
    pub fn new(phi_a: Tensor, phi_b: Tensor) -> Result<Self, NglcmError> {
        for phi in [&phi_a, &phi_b] {
            if phi.cols() != 1 || phi.rows() == 0 {
                return Err(NglcmError::BadPhiShape {
                    rows: phi.rows(),
                    cols: phi.cols(),
                });
            }
        }
        assert_eq!(phi_a.rows(), phi_b.rows(), "phi_a and phi_b must agree in length");
        Ok(NglcmParams { phi_a, phi_b })
    }

    pub fn levels(&self) -> usize {
        self.phi_a.rows()
    }

    /// Random initialization. `phi_a` spreads over the pixel-level range,
    /// `phi_b` over the small neighborhood where pixel differences
    /// concentrate; both continuous, so thresholds start off-kink almost
    /// surely.
    pub fn init_random(levels: usize, rng: &mut StdRng) -> Self {
        let phi_a = Tensor::from_fn(levels, 1, |_, _| rng.random_range(0.0..levels as f64 - 1.0));
        let phi_b = Tensor::from_fn(levels, 1, |_, _| rng.random_range(-2.0..2.0));
        NglcmParams { phi_a, phi_b }
    }
}

/// Row-major flattening of a quantized image into a 1 x m^2 real vector.
pub fn flatten_image(img: &QuantizedImage) -> Tensor {
    let data = img.pixels().iter().map(|&p| f64::from(p)).collect();
    Tensor::from_vec(1, img.side() * img.side(), data).expect("pixel count is side^2")
}

/// Neighbor-difference vector: `b_i = a_i - a_neighbor(i)`.
///
/// Positions whose named neighbor falls outside the image get `b_i = 0`
/// and `mask[i] = false`.
pub fn shift_diff(a: &Tensor, side: usize, dir: Direction) -> Result<(Tensor, Vec<bool>), NglcmError> {
    let n = a.cols();
    if a.rows() != 1 || n != side * side {
        return Err(NglcmError::BadLength { len: a.rows() * n, side });
    }
    let (dr, dc) = dir.offset();
    let m = side as i32;
    let mut b = Tensor::zeros(1, n);
    let mut mask = vec![false; n];
    for r in 0..m {
        for c in 0..m {
            let i = (r * m + c) as usize;
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nr >= m || nc < 0 || nc >= m {
                continue;
            }
            let j = (nr * m + nc) as usize;
            b.data_mut()[i] = a.data()[i] - a.data()[j];
            mask[i] = true;
        }
    }
    Ok((b, mask))
}

/// Flat index of the named neighbor, for positions where the mask is true.
fn neighbor_index(i: usize, side: usize, dir: Direction) -> usize {
    let (dr, dc) = dir.offset();
    let (r, c) = (i / side, i % side);
    ((r as i32 + dr) * side as i32 + (c as i32 + dc)) as usize
}

/// Broadcasted clamped thresholding: `out[k, j] = clamp(v_j - phi_k, 0, 1)`.
pub fn threshold_s(v: &Tensor, phi: &Tensor) -> Tensor {
    let n = v.cols();
    let levels = phi.rows();
    Tensor::from_fn(levels, n, |k, j| {
        (v.data()[j] - phi.data()[k]).clamp(0.0, 1.0)
    })
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct NglcmCache {
    pub a: Tensor,
    pub b: Tensor,
    pub mask: Vec<bool>,
    pub s_a: Tensor,
    pub s_b: Tensor,
    /// Clamp-interior indicators: 1 where the pre-clamp value lies strictly
    /// inside (0, 1), masked columns zeroed. The subgradient at the kinks
    /// themselves is defined as 0.
    ind_a: Tensor,
    ind_b: Tensor,
    side: usize,
    dir: Direction,
}

fn thresholded_with_indicator(v: &Tensor, phi: &Tensor, mask: &[bool]) -> (Tensor, Tensor) {
    let n = v.cols();
    let levels = phi.rows();
    let mut s = Tensor::zeros(levels, n);
    let mut ind = Tensor::zeros(levels, n);
    for k in 0..levels {
        for j in 0..n {
            if !mask[j] {
                continue;
            }
            let pre = v.data()[j] - phi.data()[k];
            s.set(k, j, pre.clamp(0.0, 1.0));
            if pre > 0.0 && pre < 1.0 {
                ind.set(k, j, 1.0);
            }
        }
    }
    (s, ind)
}

/// Core product on precomputed `(a, b, mask)`: `G = S_a * S_b^T` with
/// masked columns zeroed in both factors.
pub fn nglcm_forward_parts(
    a: &Tensor,
    b: &Tensor,
    mask: &[bool],
    params: &NglcmParams,
    side: usize,
    dir: Direction,
) -> (Tensor, NglcmCache) {
    let (s_a, ind_a) = thresholded_with_indicator(a, &params.phi_a, mask);
    let (s_b, ind_b) = thresholded_with_indicator(b, &params.phi_b, mask);
    let g = s_a
        .matmul_nt(&s_b)
        .expect("factor shapes derive from the same inputs");
    let cache = NglcmCache {
        a: a.clone(),
        b: b.clone(),
        mask: mask.to_vec(),
        s_a,
        s_b,
        ind_a,
        ind_b,
        side,
        dir,
    };
    (g, cache)
}

/// Full forward pass from a flattened image vector.
pub fn nglcm_forward(
    a: &Tensor,
    side: usize,
    params: &NglcmParams,
    dir: Direction,
) -> Result<(Tensor, NglcmCache), NglcmError> {
    let (b, mask) = shift_diff(a, side, dir)?;
    Ok(nglcm_forward_parts(a, &b, &mask, params, side, dir))
}

/// Exact chain rule through the product, the clamp, and the shift operator.
///
/// Returns `(grad_phi_a, grad_phi_b, grad_a)`, where `grad_a` treats the
/// input vector as continuous (useful for gradient checks; quantization in
/// front of the block has zero derivative almost everywhere).
pub fn nglcm_backward(
    cache: &NglcmCache,
    grad_g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NglcmError> {
    let levels = cache.s_a.rows();
    if grad_g.shape() != (levels, levels) {
        return Err(NglcmError::GradShape {
            got: grad_g.shape(),
            want: (levels, levels),
        });
    }
    let n = cache.a.cols();
    // G = S_a S_b^T.
    let grad_s_a = grad_g.matmul(&cache.s_b).expect("shapes fixed by cache");
    let grad_s_b = grad_g
        .transpose()
        .matmul(&cache.s_a)
        .expect("shapes fixed by cache");

    let mut grad_phi_a = Tensor::zeros(levels, 1);
    let mut grad_phi_b = Tensor::zeros(levels, 1);
    let mut grad_a = Tensor::zeros(1, n);
    let mut grad_b = vec![0.0; n];
    for k in 0..levels {
        for j in 0..n {
            let ga = grad_s_a.get(k, j) * cache.ind_a.get(k, j);
            if ga != 0.0 {
                grad_phi_a.data_mut()[k] -= ga;
                grad_a.data_mut()[j] += ga;
            }
            let gb = grad_s_b.get(k, j) * cache.ind_b.get(k, j);
            if gb != 0.0 {
                grad_phi_b.data_mut()[k] -= gb;
                grad_b[j] += gb;
            }
        }
    }
    // b_j = a_j - a_neighbor(j) on masked-in positions.
    for j in 0..n {
        if cache.mask[j] && grad_b[j] != 0.0 {
            grad_a.data_mut()[j] += grad_b[j];
            let nb = neighbor_index(j, cache.side, cache.dir);
            grad_a.data_mut()[nb] -= grad_b[j];
        }
    }
    Ok((grad_phi_a, grad_phi_b, grad_a))
}

/// Thresholds `{n - eps}` over `count` consecutive integers starting at
/// `lowest`, sorted ascending.
pub fn staircase_thresholds(lowest: i64, count: usize, epsilon: f64) -> Result<Tensor, NglcmError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(NglcmError::BadEpsilon(epsilon));
    }
    Ok(Tensor::from_fn(count, 1, |k, _| {
        (lowest + k as i64) as f64 - epsilon
    }))
}

/// Staircase parameters over the integer levels `{0 .. levels-1}` for both
/// threshold vectors. This constrained setting exists for the equivalence
/// check against classic counting; training drops the constraint.
pub fn staircase_phi(levels: usize, epsilon: f64) -> Result<NglcmParams, NglcmError> {
    let phi = staircase_thresholds(0, levels, epsilon)?;
    Ok(NglcmParams {
        phi_a: phi.clone(),
        phi_b: phi,
    })
}

/// Convert staircase-thresholded rows into exact per-level indicators.
///
/// Expects `s = threshold_s(v, staircase_thresholds(lowest, N, eps))` for an
/// integer-coded `v`. Row `k` of `s` at an integer value `x` equals
/// `eps` if `x == n_k`, `1` if `x > n_k`, else `0`, so rows solve by
/// back-substitution from the top threshold down:
/// `I_{N-1} = s_{N-1} / eps`, `I_k = (s_k - s_{k+1} - (1-eps) I_{k+1}) / eps`.
/// Columns whose value lies above the top level (top row saturated at 1)
/// belong to no level and are zeroed. For dyadic `eps` (e.g. 0.5) the
/// arithmetic is exact in floating point.
pub fn cumulative_to_indicators(s: &Tensor, epsilon: f64) -> Result<Tensor, NglcmError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(NglcmError::BadEpsilon(epsilon));
    }
    let (levels, n) = s.shape();
    let mut ind = Tensor::zeros(levels, n);
    for j in 0..n {
        let top = s.get(levels - 1, j);
        if top >= 1.0 - 1e-9 {
            continue; // value above the covered range
        }
        ind.set(levels - 1, j, top / epsilon);
        for k in (0..levels - 1).rev() {
            let v = (s.get(k, j) - s.get(k + 1, j) - (1.0 - epsilon) * ind.get(k + 1, j)) / epsilon;
            ind.set(k, j, v);
        }
    }
    Ok(ind)
}

/// Reproduce the classic co-occurrence count through the differentiable
/// block, exactly.
///
/// Two staircase passes are needed: the block's `levels` thresholds over
/// `{0..levels-1}` only cover non-negative neighbor differences (anchor >=
/// neighbor). Pairs with a larger neighbor are recovered by thresholding the
/// negated difference vector over `{1..levels}`. The differenced indicator
/// products then reassemble into counts indexed by (anchor value, neighbor
/// value).
pub fn counts_via_staircase(
    img: &QuantizedImage,
    dir: Direction,
    epsilon: f64,
) -> Result<Tensor, NglcmError> {
    let levels = img.levels();
    let a = flatten_image(img);
    let (b, mask) = shift_diff(&a, img.side(), dir)?;

    // Pass 1: differences in {0 .. levels-1}.
    let params_pos = staircase_phi(levels, epsilon)?;
    let (_, cache_pos) = nglcm_forward_parts(&a, &b, &mask, &params_pos, img.side(), dir);
    let ia = cumulative_to_indicators(&cache_pos.s_a, epsilon)?;
    let ib_pos = cumulative_to_indicators(&cache_pos.s_b, epsilon)?;
    let m_pos = ia.matmul(&ib_pos.transpose()).expect("level-count rows");

    // Pass 2: negated differences in {1 .. levels}; non-negative entries of
    // -b fall below the lowest threshold and vanish.
    let neg_b = b.scale(-1.0);
    let params_neg = NglcmParams {
        phi_a: params_pos.phi_a.clone(),
        phi_b: staircase_thresholds(1, levels, epsilon)?,
    };
    let (_, cache_neg) = nglcm_forward_parts(&a, &neg_b, &mask, &params_neg, img.side(), dir);
    let ib_neg = cumulative_to_indicators(&cache_neg.s_b, epsilon)?;
    let m_neg = ia.matmul(&ib_neg.transpose()).expect("level-count rows");

    // counts[k, l] = #(anchor == k, neighbor == l) = #(anchor == k, diff == k - l).
    let mut counts = Tensor::zeros(levels, levels);
    for k in 0..levels {
        for l in 0..levels {
            let d = k as i64 - l as i64;
            let v = if d >= 0 {
                m_pos.get(k, d as usize)
            } else {
                // Pass 2 row index for -d in {1..levels} is -d - 1.
                m_neg.get(k, (-d - 1) as usize)
            };
            counts.set(k, l, v);
        }
    }
    Ok(counts)
}

/// Batch layer wrapping the block: quantizes raw images, runs the product
/// per sample, and flattens each `levels x levels` output to one row.
///
/// The layer emits pair frequencies, `G / valid_positions`, rather than raw
/// masses. The divisor is a constant of the image geometry (identical for
/// every image), so this is a fixed output convention, not data-dependent
/// normalization; without it the downstream head's inputs sit two orders
/// of magnitude above unit scale and saturate within a few equal-step
/// optimizer updates.
#[derive(Debug, Clone)]
pub struct NglcmLayer {
    pub params: NglcmParams,
    pub grad_phi_a: Tensor,
    pub grad_phi_b: Tensor,
    pub levels: usize,
    pub side: usize,
    pub dir: Direction,
    /// 1 / number of in-bounds pixel pairs for this geometry.
    pub output_scale: f64,
    caches: Vec<NglcmCache>,
    /// Number of forward evaluations; lets tests assert that prediction
    /// paths which promise not to touch the texture product really don't.
    pub forward_count: u64,
}

impl NglcmLayer {
    pub fn new(levels: usize, side: usize, dir: Direction, rng: &mut StdRng) -> Self {
        let probe = Tensor::zeros(1, side * side);
        let (_, mask) = shift_diff(&probe, side, dir).expect("consistent probe shape");
        let valid = mask.iter().filter(|&&m| m).count().max(1);
        NglcmLayer {
            params: NglcmParams::init_random(levels, rng),
            grad_phi_a: Tensor::zeros(levels, 1),
            grad_phi_b: Tensor::zeros(levels, 1),
            levels,
            side,
            dir,
            output_scale: 1.0 / valid as f64,
            caches: Vec::new(),
            forward_count: 0,
        }
    }

    pub fn output_width(&self) -> usize {
        self.levels * self.levels
    }

    /// `x_raw`: batch of flattened raw images with values in [0, 256).
    pub fn forward_batch(&mut self, x_raw: &Tensor) -> Result<Tensor, NglcmError> {
        self.forward_count += 1;
        let n_pix = self.side * self.side;
        assert_eq!(x_raw.cols(), n_pix, "input width must be side^2");
        let mut out = Tensor::zeros(x_raw.rows(), self.output_width());
        self.caches.clear();
        let scale = self.levels as f64 / 256.0;
        for r in 0..x_raw.rows() {
            let mut a = Tensor::zeros(1, n_pix);
            for (dst, &v) in a.data_mut().iter_mut().zip(x_raw.row(r)) {
                if !(0.0..256.0).contains(&v) {
                    return Err(GlcmError::PixelOutOfRange {
                        value: v,
                        index: r * n_pix,
                        max: 256.0,
                    }
                    .into());
                }
                *dst = (v * scale).floor();
            }
            let (g, cache) = nglcm_forward(&a, self.side, &self.params, self.dir)?;
            let scaled = g.scale(self.output_scale);
            out.data_mut()[r * self.output_width()..(r + 1) * self.output_width()]
                .copy_from_slice(scaled.data());
            self.caches.push(cache);
        }
        Ok(out)
    }

    /// Accumulates threshold gradients from a batch of flattened
    /// `levels x levels` output gradients. Input gradients stop here:
    /// quantization has zero derivative almost everywhere.
    pub fn backward_batch(&mut self, grad_out: &Tensor) -> Result<(), NglcmError> {
        if self.caches.is_empty() {
            return Err(NglcmError::BackwardBeforeForward);
        }
        assert_eq!(grad_out.rows(), self.caches.len(), "batch size mismatch");
        for (r, cache) in self.caches.iter().enumerate() {
            let g = Tensor::from_vec(self.levels, self.levels, grad_out.row(r).to_vec())
                .expect("row length is levels^2")
                .scale(self.output_scale);
            let (gpa, gpb, _) = nglcm_backward(cache, &g)?;
            self.grad_phi_a = self.grad_phi_a.add(&gpa).expect("shape fixed");
            self.grad_phi_b = self.grad_phi_b.add(&gpb).expect("shape fixed");
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grad_phi_a = Tensor::zeros(self.levels, 1);
        self.grad_phi_b = Tensor::zeros(self.levels, 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_image(rng: &mut StdRng, side: usize, levels: usize) -> QuantizedImage {
        let pixels = (0..side * side)
            .map(|_| rng.random_range(0..levels) as u8)
            .collect();
        QuantizedImage::new(side, levels, pixels).unwrap()
    }

    #[test]
    fn flatten_row_major() {
        let img = QuantizedImage::new(2, 4, vec![0, 1, 2, 3]).unwrap();
        let a = flatten_image(&img);
        assert_eq!(a.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(a.shape(), (1, 4));
    }

    #[test]
    fn shift_diff_constant_image_zero_on_valid() {
        let img = QuantizedImage::new(3, 4, vec![2; 9]).unwrap();
        let a = flatten_image(&img);
        let (b, mask) = shift_diff(&a, 3, Direction::Deg0).unwrap();
        for (j, &valid) in mask.iter().enumerate() {
            if valid {
                assert_eq!(b.data()[j], 0.0);
            }
        }
        assert_eq!(mask.iter().filter(|&&v| v).count(), 6);
    }

    #[test]
    fn shift_diff_two_by_two() {
        let a = Tensor::from_vec(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (b, mask) = shift_diff(&a, 2, Direction::Deg0).unwrap();
        assert_eq!(mask, vec![true, false, true, false]);
        assert_eq!(b.data()[0], -1.0);
        assert_eq!(b.data()[2], -1.0);
        assert_eq!(b.data()[1], 0.0);
    }

    /// Dense shift-operator oracle: D[i,i] = 1, D[i, i+off] = -1 on the
    /// flattened index, including row-wrapping entries the implementation
    /// deliberately masks out. Valid positions must agree exactly.
    #[test]
    fn shift_diff_matches_dense_operator_oracle() {
        let mut rng = StdRng::seed_from_u64(21);
        let side = 8usize;
        let n = side * side;
        let img = random_image(&mut rng, side, 16);
        let a = flatten_image(&img);
        for dir in Direction::ALL {
            let (dr, dc) = dir.offset();
            let off = dr * side as i32 + dc;
            let mut d = Tensor::zeros(n, n);
            for i in 0..n as i32 {
                let j = i + off;
                if j >= 0 && (j as usize) < n {
                    d.set(i as usize, i as usize, 1.0);
                    d.set(i as usize, j as usize, -1.0);
                }
            }
            let oracle = a.matmul(&d.transpose()).unwrap();
            let (b, mask) = shift_diff(&a, side, dir).unwrap();
            for j in 0..n {
                if mask[j] {
                    assert_eq!(b.data()[j], oracle.data()[j], "dir {dir:?} pos {j}");
                }
            }
        }
    }

    #[test]
    fn threshold_saturation_and_interior() {
        let v = Tensor::from_vec(1, 3, vec![0.0, 0.5, 3.0]).unwrap();
        let phi = Tensor::from_vec(3, 1, vec![-10.0, 0.2, 20.0]).unwrap();
        let s = threshold_s(&v, &phi);
        // Far-below threshold: all ones.
        assert_eq!(s.row(0), &[1.0, 1.0, 1.0]);
        // Far-above threshold: all zeros.
        assert_eq!(s.row(2), &[0.0, 0.0, 0.0]);
        // Interior linear region: 0.5 - 0.2 = 0.3.
        assert!((s.get(1, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn forward_all_ones_thresholds_count_valid_positions() {
        let mut rng = StdRng::seed_from_u64(22);
        let img = random_image(&mut rng, 4, 4);
        let a = flatten_image(&img);
        // phi <= -1 saturates every in-range value to 1 for a; differences
        // range in [-3, 3], so phi_b <= -4 saturates b as well.
        let params = NglcmParams {
            phi_a: Tensor::filled(4, 1, -2.0),
            phi_b: Tensor::filled(4, 1, -5.0),
        };
        let (g, cache) = nglcm_forward(&a, 4, &params, Direction::Deg0).unwrap();
        let valid = cache.mask.iter().filter(|&&m| m).count() as f64;
        for &v in g.data() {
            assert_eq!(v, valid);
        }
    }

    #[test]
    fn forward_all_zero_thresholds_annihilate() {
        let mut rng = StdRng::seed_from_u64(23);
        let img = random_image(&mut rng, 4, 4);
        let a = flatten_image(&img);
        let params = NglcmParams {
            phi_a: Tensor::filled(4, 1, 100.0),
            phi_b: Tensor::filled(4, 1, -5.0),
        };
        let (g, _) = nglcm_forward(&a, 4, &params, Direction::Deg0).unwrap();
        assert_eq!(g.sum(), 0.0);
    }

    /// Brute-force per-position evaluation of the staircase product:
    /// w(v, n_k) = eps if v == n_k, 1 if v > n_k, 0 otherwise.
    #[test]
    fn forward_staircase_matches_cumulative_mass_oracle() {
        let mut rng = StdRng::seed_from_u64(24);
        let eps = 0.5;
        let img = random_image(&mut rng, 8, 16);
        let a = flatten_image(&img);
        let params = staircase_phi(16, eps).unwrap();
        let (g, cache) = nglcm_forward(&a, 8, &params, Direction::Deg0).unwrap();
        let w = |v: f64, level: f64| -> f64 {
            if v == level {
                eps
            } else if v > level {
                1.0
            } else {
                0.0
            }
        };
        for k in 0..16 {
            for l in 0..16 {
                let mut want = 0.0;
                for j in 0..64 {
                    if cache.mask[j] {
                        want += w(a.data()[j], k as f64) * w(cache.b.data()[j], l as f64);
                    }
                }
                assert_eq!(g.get(k, l), want, "cell ({k},{l})");
            }
        }
    }

    #[test]
    fn backward_saturated_thresholds_give_zero_grads() {
        let mut rng = StdRng::seed_from_u64(25);
        let img = random_image(&mut rng, 4, 4);
        let a = flatten_image(&img);
        let params = NglcmParams {
            phi_a: Tensor::filled(4, 1, -2.0),
            phi_b: Tensor::filled(4, 1, -5.0),
        };
        let (_, cache) = nglcm_forward(&a, 4, &params, Direction::Deg0).unwrap();
        let grad_g = Tensor::filled(4, 4, 1.0);
        let (gpa, gpb, ga) = nglcm_backward(&cache, &grad_g).unwrap();
        assert_eq!(gpa.max_abs(), 0.0);
        assert_eq!(gpb.max_abs(), 0.0);
        assert_eq!(ga.max_abs(), 0.0);
    }

    #[test]
    fn backward_single_position_hand_check() {
        // One valid position, one level: S_a = [0.3], S_b = [0.2],
        // G = [0.06]. With grad_G = [g]: grad_S_a = g*S_b and
        // d S_a / d phi_a = -1, so grad_phi_a = -g*0.2.
        let a = Tensor::from_vec(1, 4, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(1, 4, vec![0.3, 0.0, 0.0, 0.0]).unwrap();
        let mask = [true, false, false, false];
        let params = NglcmParams {
            phi_a: Tensor::from_vec(1, 1, vec![0.2]).unwrap(),
            phi_b: Tensor::from_vec(1, 1, vec![0.1]).unwrap(),
        };
        let (g, cache) = nglcm_forward_parts(&a, &b, &mask, &params, 2, Direction::Deg0);
        assert!((g.get(0, 0) - 0.06).abs() < 1e-15);
        let grad_g = Tensor::from_vec(1, 1, vec![3.0]).unwrap();
        let (gpa, gpb, _) = nglcm_backward(&cache, &grad_g).unwrap();
        assert!((gpa.get(0, 0) + 3.0 * 0.2).abs() < 1e-15);
        assert!((gpb.get(0, 0) + 3.0 * 0.3).abs() < 1e-15);
    }

    /// Central finite differences over phi_a, phi_b, and the input vector,
    /// at a random off-kink configuration.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(26);
        let side = 4usize;
        let levels = 5usize;
        let n = side * side;
        // Continuous inputs keep every pre-clamp value off the kinks almost
        // surely; assert the margin anyway.
        let a = Tensor::from_fn(1, n, |_, _| rng.random_range(0.0..levels as f64));
        let params = NglcmParams {
            phi_a: Tensor::from_fn(levels, 1, |_, _| rng.random_range(0.0..levels as f64 - 1.0)),
            phi_b: Tensor::from_fn(levels, 1, |_, _| rng.random_range(-2.0..2.0)),
        };
        let weights = Tensor::from_fn(levels, levels, |_, _| rng.random_range(-1.0..1.0));
        let step = 1e-5;

        let loss = |pa: &Tensor, pb: &Tensor, av: &Tensor| -> f64 {
            let p = NglcmParams {
                phi_a: pa.clone(),
                phi_b: pb.clone(),
            };
            let (g, _) = nglcm_forward(av, side, &p, Direction::Deg0).unwrap();
            g.hadamard(&weights).unwrap().sum()
        };

        // Kink margin check for the sampled point.
        let (b, mask) = shift_diff(&a, side, Direction::Deg0).unwrap();
        for (v, phi) in [(&a, &params.phi_a), (&b, &params.phi_b)] {
            for (j, &valid) in mask.iter().enumerate() {
                if !valid {
                    continue;
                }
                for k in 0..levels {
                    let pre = v.data()[j] - phi.data()[k];
                    assert!(pre.abs() > 10.0 * step && (pre - 1.0).abs() > 10.0 * step);
                }
            }
        }

        let (_, cache) = nglcm_forward(&a, side, &params, Direction::Deg0).unwrap();
        let (gpa, gpb, ga) = nglcm_backward(&cache, &weights).unwrap();

        let check = |analytic: f64, fd: f64| {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "analytic {analytic}, fd {fd}");
        };
        for k in 0..levels {
            let mut p = params.phi_a.clone();
            p.data_mut()[k] += step;
            let up = loss(&p, &params.phi_b, &a);
            p.data_mut()[k] -= 2.0 * step;
            let dn = loss(&p, &params.phi_b, &a);
            check(gpa.data()[k], (up - dn) / (2.0 * step));

            let mut p = params.phi_b.clone();
            p.data_mut()[k] += step;
            let up = loss(&params.phi_a, &p, &a);
            p.data_mut()[k] -= 2.0 * step;
            let dn = loss(&params.phi_a, &p, &a);
            check(gpb.data()[k], (up - dn) / (2.0 * step));
        }
        for j in 0..n {
            let mut av = a.clone();
            av.data_mut()[j] += step;
            let up = loss(&params.phi_a, &params.phi_b, &av);
            av.data_mut()[j] -= 2.0 * step;
            let dn = loss(&params.phi_a, &params.phi_b, &av);
            check(ga.data()[j], (up - dn) / (2.0 * step));
        }
    }

    #[test]
    fn staircase_phi_direct_construction() {
        let params = staircase_phi(4, 0.5).unwrap();
        assert_eq!(params.phi_a.data(), &[-0.5, 0.5, 1.5, 2.5]);
        assert_eq!(params.phi_b.data(), &[-0.5, 0.5, 1.5, 2.5]);
        assert!(matches!(staircase_phi(4, 0.0), Err(NglcmError::BadEpsilon(_))));
        assert!(matches!(staircase_phi(4, 1.0), Err(NglcmError::BadEpsilon(_))));
    }

    #[test]
    fn staircase_rows_are_cumulative() {
        // A single pixel value 2: row k is nonzero exactly when phi_k < 2.
        let v = Tensor::from_vec(1, 1, vec![2.0]).unwrap();
        let params = staircase_phi(4, 0.5).unwrap();
        let s = threshold_s(&v, &params.phi_a);
        for k in 0..4 {
            let nonzero = s.get(k, 0) > 0.0;
            assert_eq!(nonzero, params.phi_a.data()[k] < 2.0, "row {k}");
        }
        // Rows below the value saturate at 1; the value's own row carries eps.
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(1, 0), 1.0);
        assert_eq!(s.get(2, 0), 0.5);
        assert_eq!(s.get(3, 0), 0.0);
    }

    /// Differencing oracle: back-substituted rows equal directly-built
    /// one-hot indicators on random integer vectors.
    #[test]
    fn differencing_recovers_one_hot_indicators() {
        let mut rng = StdRng::seed_from_u64(27);
        for eps in [0.5, 0.25] {
            let levels = 8usize;
            let v = Tensor::from_fn(1, 40, |_, _| rng.random_range(0..levels) as f64);
            let phi = staircase_thresholds(0, levels, eps).unwrap();
            let s = threshold_s(&v, &phi);
            let ind = cumulative_to_indicators(&s, eps).unwrap();
            for k in 0..levels {
                for j in 0..40 {
                    let want = if v.data()[j] == k as f64 { 1.0 } else { 0.0 };
                    assert_eq!(ind.get(k, j), want, "eps {eps} level {k} pos {j}");
                }
            }
        }
    }

    #[test]
    fn differencing_zeroes_columns_above_range() {
        let v = Tensor::from_vec(1, 3, vec![1.0, 5.0, 2.0]).unwrap();
        let phi = staircase_thresholds(0, 4, 0.5).unwrap(); // covers 0..3
        let s = threshold_s(&v, &phi);
        let ind = cumulative_to_indicators(&s, 0.5).unwrap();
        for k in 0..4 {
            assert_eq!(ind.get(k, 1), 0.0, "value 5 is above the range");
        }
        assert_eq!(ind.get(1, 0), 1.0);
        assert_eq!(ind.get(2, 2), 1.0);
    }

    #[test]
    fn staircase_counts_equal_classic_counts() {
        let mut rng = StdRng::seed_from_u64(28);
        for _ in 0..5 {
            let img = random_image(&mut rng, 8, 16);
            for dir in Direction::ALL {
                let via_staircase = counts_via_staircase(&img, dir, 0.5).unwrap();
                let classic = crate::glcm::glcm_count(&img, dir);
                assert_eq!(via_staircase, classic, "dir {dir:?}");
            }
        }
    }

    #[test]
    fn saturated_entries_invariant_under_small_phi_shift() {
        let mut rng = StdRng::seed_from_u64(29);
        let img = random_image(&mut rng, 6, 8);
        let a = flatten_image(&img);
        // Saturating thresholds: values >= phi + 1 everywhere.
        let params = NglcmParams {
            phi_a: Tensor::filled(8, 1, -2.0),
            phi_b: Tensor::filled(8, 1, -9.0),
        };
        let (g0, _) = nglcm_forward(&a, 6, &params, Direction::Deg90).unwrap();
        let shifted = NglcmParams {
            phi_a: params.phi_a.scale(1.0).add(&Tensor::filled(8, 1, 1e-6)).unwrap(),
            phi_b: params.phi_b.clone(),
        };
        let (g1, _) = nglcm_forward(&a, 6, &shifted, Direction::Deg90).unwrap();
        assert_eq!(g0, g1);
    }

    #[test]
    fn output_shape_is_levels_squared_regardless_of_side() {
        let mut rng = StdRng::seed_from_u64(30);
        for side in [2usize, 5, 9] {
            let img = random_image(&mut rng, side, 16);
            let a = flatten_image(&img);
            let params = NglcmParams::init_random(16, &mut rng);
            let (g, _) = nglcm_forward(&a, side, &params, Direction::Deg135).unwrap();
            assert_eq!(g.shape(), (16, 16));
        }
    }

    #[test]
    fn layer_backward_before_forward_is_state_error() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut layer = NglcmLayer::new(4, 4, Direction::Deg0, &mut rng);
        let grad = Tensor::zeros(1, 16);
        assert!(matches!(
            layer.backward_batch(&grad),
            Err(NglcmError::BackwardBeforeForward)
        ));
    }
}
