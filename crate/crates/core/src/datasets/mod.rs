//! Synthetic distribution-shift dataset generators and corpus file IO.
//!
//! Three shift recipes, all deterministic given (recipe, seed):
//!
//! * background-correlated: class glyphs composited over procedural
//!   background textures; train/val backgrounds correlate with the label
//!   (mixture weight `rho` on the class-designated texture), test
//!   backgrounds are independent of it.
//! * fourier-patterned: a base corpus gets one of three surface
//!   regularities stamped on (radial-filtered, random-filtered, or left
//!   original); two appear in train/val, the held-out one in test.
//! * rotation domains: a class-balanced subset replicated at several
//!   counter-clockwise rotation angles, one domain per angle.
//!
//! Nuisance ids (background, kernel, or angle index) ride along as
//! generator metadata and are never fed to models.

pub mod dft;
mod io;
mod rotate;
mod textures;

pub use dft::{
    apply_spectrum_mask, dft2, idft2, radial_mask, random_symmetric_mask, rescale_guard, Spectrum,
};
pub use io::{
    export_pgm, load_idx_images, load_idx_labels, load_idx_pair, read_manifest, write_idx_images,
    write_idx_labels, write_manifest, DataIoError, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use rotate::rotate_bilinear;
pub use textures::{draw_glyph, render_background, GLYPH_INTENSITY};

use crate::linalg::Tensor;
use crate::seeding;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("correlation rho must lie in [0, 1], got {0}")]
    BadRho(f64),
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    BadSplit((f64, f64, f64)),
    #[error("need at least {need} backgrounds for {classes} classes, got {got}")]
    TooFewBackgrounds { need: usize, classes: usize, got: usize },
    #[error("class {class} has only {have} samples, need {need}")]
    InsufficientSamples { class: usize, have: usize, need: usize },
    #[error("train kernels must be distinct from each other and the test kernel")]
    KernelsNotDistinct,
}

/// Stack of grayscale images with labels and a per-image nuisance id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    /// n x side^2 raw values in [0, 256).
    pub images: Tensor,
    pub side: usize,
    pub labels: Vec<usize>,
    /// Texture / kernel / domain identifier; generator metadata only.
    pub nuisance_ids: Vec<usize>,
    pub classes: usize,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_row(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Square tensor view of one image.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_vec(self.side, self.side, self.image_row(i).to_vec()).expect("side^2 row")
    }

    /// Select a subset in the index order given.
    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        let mut data = Vec::with_capacity(indices.len() * self.side * self.side);
        let mut labels = Vec::with_capacity(indices.len());
        let mut nuisance = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image_row(i));
            labels.push(self.labels[i]);
            nuisance.push(self.nuisance_ids[i]);
        }
        LabeledImageSet {
            images: Tensor::from_vec(indices.len(), self.side * self.side, data)
                .expect("length computed"),
            side: self.side,
            labels,
            nuisance_ids: nuisance,
            classes: self.classes,
        }
    }
}

/// Train/validation/test fractions; must be nonnegative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DataError> {
        let ok =
            train >= 0.0 && val >= 0.0 && test >= 0.0 && ((train + val + test) - 1.0).abs() < 1e-9;
        if !ok {
            return Err(DataError::BadSplit((train, val, test)));
        }
        Ok(SplitFractions { train, val, test })
    }

    /// The 50/30/20 split the correlated-background experiments use.
    pub fn default_shift() -> Self {
        SplitFractions {
            train: 0.5,
            val: 0.3,
            test: 0.2,
        }
    }

    pub fn counts(&self, total: usize) -> (usize, usize, usize) {
        let train = (total as f64 * self.train).round() as usize;
        let val = (total as f64 * self.val).round() as usize;
        let val = val.min(total - train);
        (train, val, total - train - val)
    }
}

/// How surface patterns attach to train/val images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachStrategy {
    /// Pattern independent of the label: uniform over the two train kernels.
    Independently,
    /// Pattern determined by the label: classes below C/2 get the first
    /// kernel, the rest the second.
    Dependently,
}

impl std::str::FromStr for AttachStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "independently" | "independent" => Ok(AttachStrategy::Independently),
            "dependently" | "dependent" => Ok(AttachStrategy::Dependently),
            other => Err(format!("unknown attach strategy '{other}'")),
        }
    }
}

/// The three surface regularities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKernel {
    /// Low-pass: keep frequency magnitudes up to side/4.
    Radial,
    /// Fixed conjugate-symmetric Bernoulli(0.5) mask, DC kept.
    Random,
    /// Leave the image unfiltered.
    Original,
}

impl FilterKernel {
    pub fn nuisance_id(self) -> usize {
        match self {
            FilterKernel::Radial => 0,
            FilterKernel::Random => 1,
            FilterKernel::Original => 2,
        }
    }
}

impl std::str::FromStr for FilterKernel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "radial" => Ok(FilterKernel::Radial),
            "random" => Ok(FilterKernel::Random),
            "original" => Ok(FilterKernel::Original),
            other => Err(format!("unknown kernel '{other}'")),
        }
    }
}

/// Which shift generator to run, with its knobs.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftKind {
    BackgroundCorrelated {
        classes: usize,
        backgrounds: usize,
        rho: f64,
    },
    FourierPattern {
        strategy: AttachStrategy,
        train_kernels: (FilterKernel, FilterKernel),
        test_kernel: FilterKernel,
    },
    Rotation {
        angles: Vec<f64>,
        per_class: usize,
    },
}

/// A full dataset recipe: shift kind, image side, total sample count, and
/// split fractions. Together with a seed this determines every byte.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRecipe {
    pub kind: ShiftKind,
    pub side: usize,
    pub total: usize,
    pub split: SplitFractions,
}

#[derive(Debug, Clone)]
pub struct DatasetTriple {
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub test: LabeledImageSet,
}

/// Compose one background-correlated image: texture by id, glyph by class.
fn compose_image(side: usize, class: usize, background: usize, rng: &mut StdRng) -> Tensor {
    let mut img = render_background(background, side, rng);
    draw_glyph(&mut img, class, rng);
    img
}

fn gen_correlated_split(
    n: usize,
    side: usize,
    classes: usize,
    backgrounds: usize,
    rho: Option<f64>,
    rng: &mut StdRng,
) -> LabeledImageSet {
    // Balanced labels in shuffled order.
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(n * side * side);
    let mut nuisance = Vec::with_capacity(n);
    for &class in &labels {
        let background = match rho {
            // Mixture: designated texture with weight rho, else uniform
            // over all backgrounds. P(designated | class) = rho + (1-rho)/B.
            Some(rho) => {
                if rng.random_range(0.0..1.0) < rho {
                    class % backgrounds
                } else {
                    rng.random_range(0..backgrounds)
                }
            }
            // Test split: independent of the class.
            None => rng.random_range(0..backgrounds),
        };
        let img = compose_image(side, class, background, rng);
        data.extend_from_slice(img.data());
        nuisance.push(background);
    }
    LabeledImageSet {
        images: Tensor::from_vec(n, side * side, data).expect("length computed"),
        side,
        labels,
        nuisance_ids: nuisance,
        classes,
    }
}

/// Plain glyph corpus: class shapes over a near-black background, no
/// texture nuisance. Serves as the base for the fourier-pattern and
/// rotation recipes.
pub fn gen_glyph_corpus(classes: usize, total: usize, side: usize, seed: u64) -> LabeledImageSet {
    let mut rng = seeding::stream(seed, "glyph-corpus");
    let mut labels: Vec<usize> = (0..total).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(total * side * side);
    for &class in &labels {
        let mut img = Tensor::from_fn(side, side, |_, _| rng.random_range(0.0..24.0));
        draw_glyph(&mut img, class, &mut rng);
        data.extend_from_slice(img.data());
    }
    LabeledImageSet {
        images: Tensor::from_vec(total, side * side, data).expect("length computed"),
        side,
        labels,
        nuisance_ids: vec![0; total],
        classes,
    }
}

/// Probe corpus with independent factors: shape class and texture id drawn
/// uniformly and independently. Unlike the correlated recipe there is no
/// designation, so the texture count is free of the class count.
pub fn gen_texture_shape_corpus(
    classes: usize,
    textures: usize,
    total: usize,
    side: usize,
    seed: u64,
) -> LabeledImageSet {
    assert!(textures >= 2, "need at least two textures");
    let mut rng = seeding::stream(seed, "texture-shape-corpus");
    let mut labels: Vec<usize> = (0..total).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(total * side * side);
    let mut nuisance = Vec::with_capacity(total);
    for &class in &labels {
        let texture = rng.random_range(0..textures);
        let img = compose_image(side, class, texture, &mut rng);
        data.extend_from_slice(img.data());
        nuisance.push(texture);
    }
    LabeledImageSet {
        images: Tensor::from_vec(total, side * side, data).expect("length computed"),
        side,
        labels,
        nuisance_ids: nuisance,
        classes,
    }
}

/// Background-correlated triple: train/val backgrounds follow the class
/// with mixture weight `rho`, test backgrounds are independent of it.
pub fn gen_background_correlated(
    classes: usize,
    backgrounds: usize,
    rho: f64,
    total: usize,
    side: usize,
    split: SplitFractions,
    seed: u64,
) -> Result<DatasetTriple, DataError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(DataError::BadRho(rho));
    }
    if backgrounds < classes || backgrounds < 2 {
        return Err(DataError::TooFewBackgrounds {
            need: classes.max(2),
            classes,
            got: backgrounds,
        });
    }
    let (n_train, n_val, n_test) = split.counts(total);
    let mut rng_train = seeding::stream(seed, "bg-train");
    let mut rng_val = seeding::stream(seed, "bg-val");
    let mut rng_test = seeding::stream(seed, "bg-test");
    Ok(DatasetTriple {
        train: gen_correlated_split(n_train, side, classes, backgrounds, Some(rho), &mut rng_train),
        val: gen_correlated_split(n_val, side, classes, backgrounds, Some(rho), &mut rng_val),
        test: gen_correlated_split(n_test, side, classes, backgrounds, None, &mut rng_test),
    })
}

/// Filter one image with the named kernel. The random kernel's mask is a
/// fixed function of `seed`, shared by every image of a dataset.
pub fn fourier_filter(img: &Tensor, kernel: FilterKernel, seed: u64) -> Tensor {
    match kernel {
        FilterKernel::Original => img.clone(),
        FilterKernel::Radial => {
            let mask = radial_mask(img.rows(), img.rows() as f64 / 4.0);
            let (out, _) = apply_spectrum_mask(img, &mask);
            rescale_guard(&out)
        }
        FilterKernel::Random => {
            let mask =
                random_symmetric_mask(img.rows(), 0.5, seeding::derive_seed(seed, "random-kernel"));
            let (out, _) = apply_spectrum_mask(img, &mask);
            rescale_guard(&out)
        }
    }
}

fn attach_kernels(
    base: &LabeledImageSet,
    assignment: impl Fn(usize, &mut StdRng) -> FilterKernel,
    seed: u64,
    rng: &mut StdRng,
) -> LabeledImageSet {
    let mut out = base.clone();
    let n_pix = base.side * base.side;
    for i in 0..base.len() {
        let kernel = assignment(base.labels[i], rng);
        let filtered = fourier_filter(&base.image(i), kernel, seed);
        out.images.data_mut()[i * n_pix..(i + 1) * n_pix].copy_from_slice(filtered.data());
        out.nuisance_ids[i] = kernel.nuisance_id();
    }
    out
}

/// Stamp surface regularities onto a base corpus: two kernels in train and
/// validation (assigned by `strategy`), the held-out kernel in test.
pub fn gen_fourier_patterned(
    base: &LabeledImageSet,
    strategy: AttachStrategy,
    train_kernels: (FilterKernel, FilterKernel),
    test_kernel: FilterKernel,
    split: SplitFractions,
    seed: u64,
) -> Result<DatasetTriple, DataError> {
    let (k1, k2) = train_kernels;
    if k1 == k2 || k1 == test_kernel || k2 == test_kernel {
        return Err(DataError::KernelsNotDistinct);
    }
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut seeding::stream(seed, "fourier-split"));
    let (n_train, n_val, _) = split.counts(base.len());
    let train_idx = &order[..n_train];
    let val_idx = &order[n_train..n_train + n_val];
    let test_idx = &order[n_train + n_val..];

    let classes = base.classes;
    let assign = move |label: usize, rng: &mut StdRng| -> FilterKernel {
        match strategy {
            AttachStrategy::Independently => {
                if rng.random_range(0.0..1.0) < 0.5 {
                    k1
                } else {
                    k2
                }
            }
            AttachStrategy::Dependently => {
                if label < classes.div_ceil(2) {
                    k1
                } else {
                    k2
                }
            }
        }
    };
    let mut rng_train = seeding::stream(seed, "fourier-train");
    let mut rng_val = seeding::stream(seed, "fourier-val");
    let mut rng_test = seeding::stream(seed, "fourier-test");
    Ok(DatasetTriple {
        train: attach_kernels(&base.subset(train_idx), &assign, seed, &mut rng_train),
        val: attach_kernels(&base.subset(val_idx), &assign, seed, &mut rng_val),
        test: attach_kernels(
            &base.subset(test_idx),
            move |_, _| test_kernel,
            seed,
            &mut rng_test,
        ),
    })
}

/// Per-angle domains from a class-balanced subset of `base`: every selected
/// image appears once per angle, rotated counter-clockwise. The nuisance id
/// is the angle index.
pub fn gen_rotation_domains(
    base: &LabeledImageSet,
    angles: &[f64],
    per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledImageSet>, DataError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); base.classes];
    for (i, &label) in base.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut rng = seeding::stream(seed, "rotation-sample");
    let mut chosen = Vec::with_capacity(per_class * base.classes);
    for (class, indices) in by_class.iter_mut().enumerate() {
        if indices.len() < per_class {
            return Err(DataError::InsufficientSamples {
                class,
                have: indices.len(),
                need: per_class,
            });
        }
        indices.shuffle(&mut rng);
        chosen.extend_from_slice(&indices[..per_class]);
    }
    chosen.sort_unstable();
    let subset = base.subset(&chosen);
    let n_pix = base.side * base.side;
    let mut domains = Vec::with_capacity(angles.len());
    for (angle_idx, &angle) in angles.iter().enumerate() {
        let mut domain = subset.clone();
        for i in 0..subset.len() {
            let rotated = rotate_bilinear(&subset.image(i), angle);
            domain.images.data_mut()[i * n_pix..(i + 1) * n_pix].copy_from_slice(rotated.data());
            domain.nuisance_ids[i] = angle_idx;
        }
        domains.push(domain);
    }
    Ok(domains)
}
