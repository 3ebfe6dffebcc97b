//! Projection classification head.
//!
//! The head decodes three logit sets from an encoder representation `h` and
//! a texture representation `g`: `F_A` from both (concatenated), `F_G` from
//! the texture branch alone (raw block zeroed), and `F_P` from the raw
//! branch alone (texture block zeroed). Training then regresses the
//! texture-only logits out of the combined logits column by column,
//!
//! `F_L = (I - F_G (F_G^T F_G)^{-1} F_G^T) F_A`,
//!
//! so the trainable signal is exactly the part of `F_A` not linearly
//! explainable by `F_G`. The residual-maker product is evaluated through a
//! Cholesky solve and has an exact backward pass, including through the
//! matrix inverse; both logit branches receive gradient because the
//! projection matrix itself depends on `F_G`.
//!
//! The exact path needs the Gram matrix invertible, which holds when the
//! minibatch is larger than the class count; otherwise a diagonally loaded
//! ridge variant takes over. Both representations are column-normalized per
//! minibatch before decoding so the two branches live on the same scale.

use crate::linalg::{self, solve_spd, LinalgError, Tensor};
use crate::netcore::{cross_entropy, Dense, NetError, Sigmoid};
use crate::nglcm::{NglcmError, NglcmLayer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HexError {
    #[error("exact projection unavailable ({0}); route to the ridge fallback")]
    FallbackNeeded(String),
    #[error("ridge loading must be positive, got {0}")]
    BadLambda(f64),
    #[error("row-count mismatch: h has {h_rows} rows, g has {g_rows}")]
    RowMismatch { h_rows: usize, g_rows: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Nglcm(#[from] NglcmError),
}

/// Columns below this norm are left untouched by normalization.
const NORM_EPS: f64 = 1e-12;

/// Per-minibatch column normalization: center each column and scale it to
/// unit L2 norm. Near-constant columns (centered norm below the guard)
/// stay as they are. Centering keeps the decoder bias out of the texture
/// logits' column space, which the projection's regression needs.
pub fn column_normalize(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for c in 0..t.cols() {
        let mut mean = 0.0;
        for r in 0..t.rows() {
            mean += t.get(r, c);
        }
        mean /= t.rows() as f64;
        let mut norm = 0.0;
        for r in 0..t.rows() {
            norm += (t.get(r, c) - mean).powi(2);
        }
        let norm = norm.sqrt();
        if norm < NORM_EPS {
            continue;
        }
        for r in 0..t.rows() {
            out.set(r, c, (t.get(r, c) - mean) / norm);
        }
    }
    out
}

/// Exact gradient through [`column_normalize`]. With `y` the normalized
/// column and `n` the centered norm:
/// `grad_x = (grad_y - mean(grad_y) - y (y . grad_y)) / n`.
pub fn column_normalize_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(input.shape(), grad_out.shape());
    let rows = input.rows() as f64;
    let mut grad_in = grad_out.clone();
    for c in 0..input.cols() {
        let mut mean = 0.0;
        for r in 0..input.rows() {
            mean += input.get(r, c);
        }
        mean /= rows;
        let mut norm = 0.0;
        for r in 0..input.rows() {
            norm += (input.get(r, c) - mean).powi(2);
        }
        let norm = norm.sqrt();
        if norm < NORM_EPS {
            // Normalization left the column untouched; pass through.
            continue;
        }
        let mut dot = 0.0;
        let mut gmean = 0.0;
        for r in 0..input.rows() {
            let y = (input.get(r, c) - mean) / norm;
            dot += y * grad_out.get(r, c);
            gmean += grad_out.get(r, c);
        }
        gmean /= rows;
        for r in 0..input.rows() {
            let y = (input.get(r, c) - mean) / norm;
            grad_in.set(r, c, (grad_out.get(r, c) - gmean - y * dot) / norm);
        }
    }
    grad_in
}

/// The final linear decoder over the concatenated `[h, g]` representation,
/// stored as explicit blocks so zero-padded evaluations never materialize
/// padding: `f([h, g]) = h W_h + g W_g + bias`.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub w_h: Tensor,
    pub w_g: Tensor,
    pub bias: Tensor,
    pub gw_h: Tensor,
    pub gw_g: Tensor,
    pub gbias: Tensor,
}

impl Decoder {
    pub fn new(h_width: usize, g_width: usize, classes: usize, rng: &mut rand::rngs::StdRng) -> Self {
        use rand::Rng;
        let fan_in = h_width + g_width;
        let bound = (6.0 / (fan_in + classes) as f64).sqrt();
        let mut draw =
            |rows: usize| Tensor::from_fn(rows, classes, |_, _| rng.random_range(-bound..bound));
        Decoder {
            w_h: draw(h_width),
            w_g: draw(g_width),
            bias: Tensor::zeros(1, classes),
            gw_h: Tensor::zeros(h_width, classes),
            gw_g: Tensor::zeros(g_width, classes),
            gbias: Tensor::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.cols()
    }

    /// Decode with either block optionally zeroed.
    pub fn decode(
        &self,
        h: Option<&Tensor>,
        g: Option<&Tensor>,
        rows: usize,
    ) -> Result<Tensor, HexError> {
        let mut out = Tensor::from_fn(rows, self.classes(), |_, c| self.bias.get(0, c));
        if let Some(h) = h {
            out = out.add(&h.matmul(&self.w_h)?)?;
        }
        if let Some(g) = g {
            out = out.add(&g.matmul(&self.w_g)?)?;
        }
        Ok(out)
    }

    /// Accumulate parameter gradients for one decoded output and return the
    /// gradients w.r.t. whichever inputs were live.
    pub fn backward(
        &mut self,
        h: Option<&Tensor>,
        g: Option<&Tensor>,
        grad_f: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>), HexError> {
        for r in 0..grad_f.rows() {
            for c in 0..grad_f.cols() {
                self.gbias.set(0, c, self.gbias.get(0, c) + grad_f.get(r, c));
            }
        }
        let grad_h = match h {
            Some(h) => {
                self.gw_h = self.gw_h.add(&h.transpose().matmul(grad_f)?)?;
                Some(grad_f.matmul(&self.w_h.transpose())?)
            }
            None => None,
        };
        let grad_g = match g {
            Some(g) => {
                self.gw_g = self.gw_g.add(&g.transpose().matmul(grad_f)?)?;
                Some(grad_f.matmul(&self.w_g.transpose())?)
            }
            None => None,
        };
        Ok((grad_h, grad_g))
    }

    pub fn zero_grads(&mut self) {
        self.gw_h = Tensor::zeros(self.gw_h.rows(), self.gw_h.cols());
        self.gw_g = Tensor::zeros(self.gw_g.rows(), self.gw_g.cols());
        self.gbias = Tensor::zeros(1, self.gbias.cols());
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &Tensor)) {
        f(&mut self.w_h, &self.gw_h);
        f(&mut self.w_g, &self.gw_g);
        f(&mut self.bias, &self.gbias);
    }
}

/// The four logit matrices for one minibatch.
#[derive(Debug, Clone)]
pub struct HexOutputs {
    pub f_a: Tensor,
    pub f_g: Tensor,
    pub f_p: Tensor,
    pub f_l: Tensor,
}

/// Which logits train and which predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HexMode {
    /// Train on F_L, predict with F_P.
    Hex,
    /// Train on F_L plus a weighted task loss on F_G, predict with F_P.
    HexAdv,
    /// Train on F_L, predict with F_L (evaluates the texture branch at
    /// prediction time).
    HexAll,
    /// Ablation: train on F_A without the projection, predict with F_P.
    AblationN,
}

/// Decode the three raw logit sets from already-normalized representations.
pub fn build_outputs(
    h_norm: &Tensor,
    g_norm: &Tensor,
    decoder: &Decoder,
) -> Result<(Tensor, Tensor, Tensor), HexError> {
    if h_norm.rows() != g_norm.rows() {
        return Err(HexError::RowMismatch {
            h_rows: h_norm.rows(),
            g_rows: g_norm.rows(),
        });
    }
    let rows = h_norm.rows();
    let f_a = decoder.decode(Some(h_norm), Some(g_norm), rows)?;
    let f_g = decoder.decode(None, Some(g_norm), rows)?;
    let f_p = decoder.decode(Some(h_norm), None, rows)?;
    Ok((f_a, f_g, f_p))
}

/// Cached intermediates of one projection, enough for the exact backward.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    f_a: Tensor,
    f_g: Tensor,
    /// (F_G^T F_G + lambda I)^{-1}; lambda = 0 on the exact path.
    k_inv: Tensor,
    /// T = K^{-1} F_G^T F_A, the per-column regression coefficients.
    coeffs: Tensor,
    /// True when the exact (non-ridge) path produced this cache.
    pub exact: bool,
}

fn project_with_loading(
    f_a: &Tensor,
    f_g: &Tensor,
    lambda: f64,
) -> Result<(Tensor, ProjectionCache), HexError> {
    let mut k = f_g.transpose().matmul(f_g)?;
    if lambda != 0.0 {
        for i in 0..k.rows() {
            k.set(i, i, k.get(i, i) + lambda);
        }
    }
    let c = k.rows();
    let k_inv = match solve_spd(&k, &Tensor::identity(c)) {
        Ok(inv) => inv,
        Err(LinalgError::NotPositiveDefinite { pivot, index }) => {
            return Err(HexError::FallbackNeeded(format!(
                "Gram matrix singular: pivot {pivot:.3e} at index {index}"
            )))
        }
        Err(other) => return Err(other.into()),
    };
    let coeffs = k_inv.matmul(&f_g.transpose().matmul(f_a)?)?;
    let f_l = f_a.sub(&f_g.matmul(&coeffs)?)?;
    Ok((
        f_l,
        ProjectionCache {
            f_a: f_a.clone(),
            f_g: f_g.clone(),
            k_inv,
            coeffs,
            exact: lambda == 0.0,
        },
    ))
}

/// Exact residual-maker projection.
///
/// Requires more batch rows than classes; a singular Gram matrix (or a
/// violated precondition) signals that the caller should route to
/// [`hex_project_ridge`].
pub fn hex_project(f_a: &Tensor, f_g: &Tensor) -> Result<(Tensor, ProjectionCache), HexError> {
    if f_a.shape() != f_g.shape() {
        return Err(LinalgError::Dimension {
            op: "hex_project",
            lhs: f_a.shape(),
            rhs: f_g.shape(),
        }
        .into());
    }
    if f_g.rows() <= f_g.cols() {
        return Err(HexError::FallbackNeeded(format!(
            "batch size {} not greater than class count {}",
            f_g.rows(),
            f_g.cols()
        )));
    }
    project_with_loading(f_a, f_g, 0.0)
}

/// Diagonally loaded projection, defined for any batch size.
pub fn hex_project_ridge(
    f_a: &Tensor,
    f_g: &Tensor,
    lambda: f64,
) -> Result<(Tensor, ProjectionCache), HexError> {
    if lambda <= 0.0 {
        return Err(HexError::BadLambda(lambda));
    }
    project_with_loading(f_a, f_g, lambda)
}

/// The same ridge projection through the push-through identity
/// `(F_G^T F_G + lambda I)^{-1} F_G^T = F_G^T (F_G F_G^T + lambda I)^{-1}`,
/// solving a batch-sized system instead of a class-sized one. Exists to
/// cross-validate the direct formula.
pub fn hex_project_ridge_dual(f_a: &Tensor, f_g: &Tensor, lambda: f64) -> Result<Tensor, HexError> {
    if lambda <= 0.0 {
        return Err(HexError::BadLambda(lambda));
    }
    let n = f_g.rows();
    let mut outer = f_g.matmul(&f_g.transpose())?;
    for i in 0..n {
        outer.set(i, i, outer.get(i, i) + lambda);
    }
    let solved = solve_spd(&outer, f_a)?;
    let coeffs = f_g.transpose().matmul(&solved)?;
    Ok(f_a.sub(&f_g.matmul(&coeffs)?)?)
}

/// Default loading when the exact path signals fallback: a small multiple
/// of the Gram matrix's mean diagonal, floored away from zero.
pub fn default_ridge_lambda(f_g: &Tensor) -> f64 {
    let c = f_g.cols().max(1);
    let mean_diag = f_g.frobenius_norm().powi(2) / c as f64;
    (1e-4 * mean_diag).max(1e-12)
}

/// Exact projection with automatic ridge fallback; the flag on the returned
/// cache records which path ran.
pub fn project_with_fallback(
    f_a: &Tensor,
    f_g: &Tensor,
) -> Result<(Tensor, ProjectionCache), HexError> {
    match hex_project(f_a, f_g) {
        Ok(done) => Ok(done),
        Err(HexError::FallbackNeeded(_)) => hex_project_ridge(f_a, f_g, default_ridge_lambda(f_g)),
        Err(other) => Err(other),
    }
}

/// Exact gradients of the projection w.r.t. both logit branches.
///
/// With `detach_projection`, the projection matrix is treated as a constant
/// in F_G (stop-gradient through the residual maker): F_A still receives
/// the projected gradient, F_G receives none from this path.
pub fn hex_backward(
    cache: &ProjectionCache,
    grad_f_l: &Tensor,
    detach_projection: bool,
) -> Result<(Tensor, Tensor), HexError> {
    let f_g = &cache.f_g;
    let f_a = &cache.f_a;
    // grad_M for M = F_G^T F_A: -K^{-1} F_G^T grad.
    let grad_m = cache
        .k_inv
        .matmul(&f_g.transpose().matmul(grad_f_l)?)?
        .scale(-1.0);
    // grad_F_A = grad + F_G grad_M = (I - P) grad.
    let grad_f_a = grad_f_l.add(&f_g.matmul(&grad_m)?)?;
    if detach_projection {
        return Ok((grad_f_a, Tensor::zeros(f_g.rows(), f_g.cols())));
    }
    // Left factor of B = F_G T.
    let mut grad_f_g = grad_f_l.matmul(&cache.coeffs.transpose())?.scale(-1.0);
    // Through the inverse: grad_Kinv = gT M^T with gT = -F_G^T grad.
    let g_t = f_g.transpose().matmul(grad_f_l)?.scale(-1.0);
    let m = f_g.transpose().matmul(f_a)?;
    let grad_k_inv = g_t.matmul(&m.transpose())?;
    let grad_k = linalg::inverse_backward(&cache.k_inv, &grad_k_inv)?;
    // K = F_G^T F_G contributes F_G (grad_K + grad_K^T).
    grad_f_g = grad_f_g.add(&f_g.matmul(&grad_k.add(&grad_k.transpose())?)?)?;
    // M = F_G^T F_A contributes F_A grad_M^T.
    grad_f_g = grad_f_g.add(&f_a.matmul(&grad_m.transpose())?)?;
    Ok((grad_f_a, grad_f_g))
}

/// Per-mode gradients on the raw logit sets; the projection backward is the
/// caller's job (it owns the cache).
#[derive(Debug, Clone)]
pub struct HexLossGrads {
    pub grad_f_l: Option<Tensor>,
    pub grad_f_g: Option<Tensor>,
    pub grad_f_a: Option<Tensor>,
}

/// Differentiable training loss for each mode: cross-entropy on the mode's
/// logits, with `HexAdv` adding `lambda_loss` times the task loss on the
/// texture-only logits.
pub fn hex_loss(
    outputs: &HexOutputs,
    labels: &[usize],
    mode: HexMode,
    lambda_loss: f64,
) -> Result<(f64, HexLossGrads), HexError> {
    let mut grads = HexLossGrads {
        grad_f_l: None,
        grad_f_g: None,
        grad_f_a: None,
    };
    let loss = match mode {
        HexMode::Hex | HexMode::HexAll => {
            let (l, g) = cross_entropy(&outputs.f_l, labels)?;
            grads.grad_f_l = Some(g);
            l
        }
        HexMode::HexAdv => {
            let (l, g) = cross_entropy(&outputs.f_l, labels)?;
            let (lg, gg) = cross_entropy(&outputs.f_g, labels)?;
            grads.grad_f_l = Some(g);
            grads.grad_f_g = Some(gg.scale(lambda_loss));
            l + lambda_loss * lg
        }
        HexMode::AblationN => {
            let (l, g) = cross_entropy(&outputs.f_a, labels)?;
            grads.grad_f_a = Some(g);
            l
        }
    };
    Ok((loss, grads))
}

/// Row argmax with ties broken toward the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Test-time prediction: F_P for every mode except `HexAll`, which pays the
/// texture-branch evaluation to predict from F_L.
pub fn predict(outputs: &HexOutputs, mode: HexMode) -> Vec<usize> {
    match mode {
        HexMode::HexAll => argmax_rows(&outputs.f_l),
        _ => argmax_rows(&outputs.f_p),
    }
}

/// Texture branch: the differentiable co-occurrence block with a one-layer
/// head, or the one-layer MLP ablation that replaces it.
#[derive(Debug, Clone)]
pub enum GBranch {
    Nglcm {
        nglcm: NglcmLayer,
        head: Dense,
        act: Sigmoid,
    },
    Mlp {
        head: Dense,
        act: Sigmoid,
    },
}

impl GBranch {
    pub fn nglcm(nglcm: NglcmLayer, width: usize, rng: &mut rand::rngs::StdRng) -> Self {
        let head = Dense::new(nglcm.output_width(), width, rng);
        GBranch::Nglcm {
            nglcm,
            head,
            act: Sigmoid::default(),
        }
    }

    pub fn mlp(input_width: usize, width: usize, rng: &mut rand::rngs::StdRng) -> Self {
        GBranch::Mlp {
            head: Dense::new(input_width, width, rng),
            act: Sigmoid::default(),
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            GBranch::Nglcm { head, .. } | GBranch::Mlp { head, .. } => head.output_width(),
        }
    }

    /// `x_raw`: batch of flattened raw images with values in [0, 256).
    pub fn forward(&mut self, x_raw: &Tensor) -> Result<Tensor, HexError> {
        match self {
            GBranch::Nglcm { nglcm, head, act } => {
                let g = nglcm.forward_batch(x_raw)?;
                Ok(act.forward(&head.forward(&g)?)?)
            }
            GBranch::Mlp { head, act } => {
                // Same value scaling the encoder sees.
                let x = x_raw.scale(1.0 / 255.0);
                Ok(act.forward(&head.forward(&x)?)?)
            }
        }
    }

    /// Accumulate parameter gradients; input gradients stop here (the
    /// branch reads raw pixels, and quantization in front of the
    /// co-occurrence block has zero derivative almost everywhere).
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<(), HexError> {
        match self {
            GBranch::Nglcm { nglcm, head, act } => {
                let g = act.backward(grad_out)?;
                let g = head.backward(&g)?;
                nglcm.backward_batch(&g)?;
            }
            GBranch::Mlp { head, act } => {
                let g = act.backward(grad_out)?;
                head.backward(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        match self {
            GBranch::Nglcm { nglcm, head, .. } => {
                nglcm.zero_grads();
                head.gw = Tensor::zeros(head.gw.rows(), head.gw.cols());
                head.gb = Tensor::zeros(1, head.gb.cols());
            }
            GBranch::Mlp { head, .. } => {
                head.gw = Tensor::zeros(head.gw.rows(), head.gw.cols());
                head.gb = Tensor::zeros(1, head.gb.cols());
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &Tensor)) {
        match self {
            GBranch::Nglcm { nglcm, head, .. } => {
                f(&mut nglcm.params.phi_a, &nglcm.grad_phi_a);
                f(&mut nglcm.params.phi_b, &nglcm.grad_phi_b);
                f(&mut head.w, &head.gw);
                f(&mut head.b, &head.gb);
            }
            GBranch::Mlp { head, .. } => {
                f(&mut head.w, &head.gw);
                f(&mut head.b, &head.gb);
            }
        }
    }

    /// Forward evaluations of the texture product so far, if this branch
    /// carries the co-occurrence block.
    pub fn texture_eval_count(&self) -> Option<u64> {
        match self {
            GBranch::Nglcm { nglcm, .. } => Some(nglcm.forward_count),
            GBranch::Mlp { .. } => None,
        }
    }
}
