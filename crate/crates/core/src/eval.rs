//! Distortion and realism metrics: PSNR, the 256-pixel patch protocol,
//! Fréchet distance over pluggable features, and a Monte Carlo check of the
//! "at most twice the MSE" bound for posterior sampling.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, invalid, Error, Result};
use crate::image::{extract_patch, ImageBuffer, Patch};
use crate::math;
use crate::rng::SeededStream;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const EVAL_PATCH: usize = 256;

/// Mean squared error between two equally sized slices.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(invalid("empty input"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / MSE)` for `[0, 1]` data, capped at [`PSNR_CAP`].
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * math::log10(m)).min(PSNR_CAP))
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.data().len(),
            got: b.data().len(),
        });
    }
    psnr_values(a.data(), b.data())
}

/// Patches cut from a set of images; `skipped` counts images smaller than a
/// patch in either dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub skipped: usize,
}

/// Non-overlapping `patch × patch` grid from the top-left corner of each
/// image; remainders are cropped.
pub fn patchify(images: &[ImageBuffer], patch: usize) -> Result<PatchSet> {
    if patch == 0 {
        return Err(invalid("patch size must be positive"));
    }
    let mut out = PatchSet::default();
    for img in images {
        let (gh, gw) = (img.height() / patch, img.width() / patch);
        if gh == 0 || gw == 0 {
            out.skipped += 1;
            continue;
        }
        for r in 0..gh {
            for c in 0..gw {
                out.patches.push(extract_patch(img, (r * patch, c * patch), (patch, patch))?);
            }
        }
    }
    Ok(out)
}

/// Maps an image patch to a feature vector of fixed length.
pub trait FeatureExtractor {
    fn extract(&self, img: &ImageBuffer) -> Result<Vec<f64>>;
}

/// Default extractor, version 1: luma (BT.601 weights for RGB), box-averaged
/// over `factor × factor` blocks, flattened row-major. For 256-pixel patches
/// and factor 8 that is 1024 features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxGrayFeatures {
    pub factor: usize,
}

impl BoxGrayFeatures {
    pub const VERSION: &'static str = "box-gray-v1";
}

impl Default for BoxGrayFeatures {
    fn default() -> Self {
        Self { factor: 8 }
    }
}

impl FeatureExtractor for BoxGrayFeatures {
    fn extract(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        let f = self.factor;
        if f == 0 || !img.height().is_multiple_of(f) || !img.width().is_multiple_of(f) {
            return Err(invalid("patch size must be a multiple of the box factor"));
        }
        let (gh, gw) = (img.height() / f, img.width() / f);
        let mut out = vec![0.0; gh * gw];
        for y in 0..img.height() {
            for x in 0..img.width() {
                let g = match img.channels() {
                    1 => img.get(y, x, 0),
                    _ => 0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2),
                };
                out[(y / f) * gw + x / f] += g;
            }
        }
        let inv = 1.0 / (f * f) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(out)
    }
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Moments of raw feature vectors. External features (e.g. exported
    /// from another network) enter here.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(invalid("at least two samples are needed"));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(invalid("empty feature vector"));
        }
        let n = features.len();
        let mut mean = DVector::zeros(d);
        for f in features {
            check_len(d, f.len())?;
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("features"));
            }
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut centered = DMatrix::zeros(d, n);
        for (j, f) in features.iter().enumerate() {
            for i in 0..d {
                centered[(i, j)] = f[i] - mean[i];
            }
        }
        let cov = (&centered * centered.transpose()) / (n - 1) as f64;
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Whether there are enough samples for a full-rank covariance.
    pub fn full_rank_possible(&self) -> bool {
        self.n > self.dim()
    }

    /// Statistics of the union of the two underlying sample sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        check_len(self.dim(), other.dim())?;
        let (n1, n2) = (self.n as f64, other.n as f64);
        let n = n1 + n2;
        let diff = &self.mean - &other.mean;
        let mean = (&self.mean * n1 + &other.mean * n2) / n;
        let cov = (&self.cov * (n1 - 1.0) + &other.cov * (n2 - 1.0) + (&diff * diff.transpose()) * (n1 * n2 / n)) / (n - 1.0);
        Ok(Self {
            mean,
            cov,
            n: self.n + other.n,
        })
    }
}

pub fn feature_stats<E: FeatureExtractor + ?Sized>(patches: &[Patch], extractor: &E) -> Result<FeatureStats> {
    let feats = patches.iter().map(|p| extractor.extract(&p.data)).collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&feats)
}

const PSD_TOLERANCE: f64 = 1e-8;

/// Symmetric square root through an eigendecomposition; eigenvalues down to
/// `-1e-8` (relative to the spectrum scale) are clipped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(invalid("covariance is not positive semidefinite"));
        }
        *v = math::sqrt(v.max(0.0));
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `|m1 - m2|² + tr(C1 + C2 - 2 (C1 C2)^{1/2})`.
///
/// The cross term uses `tr((C1 C2)^{1/2}) = tr((S C2 S)^{1/2})` with
/// `S = C1^{1/2}`, which keeps every decomposition symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    check_len(a.dim(), b.dim())?;
    let s = sqrt_psd(&a.cov)?;
    sqrt_psd(&b.cov)?;
    let inner = &s * &b.cov * &s;
    let cross = sqrt_psd(&inner)?.trace();
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Scalar Gaussian toy problem: `x ~ N(0, prior_var)`, observed through
/// `y = x + n`, `n ~ N(0, noise_var)`. The first stage outputs
/// `E[x | y] + bias`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianToyModel {
    pub prior_var: f64,
    pub noise_var: f64,
    pub bias: f64,
}

impl GaussianToyModel {
    pub fn new(prior_var: f64, noise_var: f64, bias: f64) -> Result<Self> {
        if !(prior_var > 0.0 && noise_var >= 0.0 && prior_var.is_finite() && noise_var.is_finite() && bias.is_finite()) {
            return Err(invalid("variances must be finite, prior positive"));
        }
        Ok(Self {
            prior_var,
            noise_var,
            bias,
        })
    }

    pub fn posterior_mean(&self, y: f64) -> f64 {
        self.prior_var / (self.prior_var + self.noise_var) * y
    }

    pub fn posterior_var(&self) -> f64 {
        self.prior_var * self.noise_var / (self.prior_var + self.noise_var)
    }

    /// Expected ratio for exact posterior sampling:
    /// `2 v / (v + bias²)` with `v` the posterior variance.
    pub fn expected_sampling_ratio(&self) -> f64 {
        let v = self.posterior_var();
        2.0 * v / (v + self.bias * self.bias)
    }
}

/// Second-stage decoder in the toy problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorDecoder {
    /// A draw from `p(x | y)`.
    Sample,
    /// `E[x | y]`.
    Mean,
}

/// Monte Carlo estimate of `E|x̂ - x|² / E|x̂_mse - x|²`. Trial `i` uses
/// normals `3i`, `3i + 1`, `3i + 2` of `stream`.
pub fn mse_bound_check(model: &GaussianToyModel, decoder: PosteriorDecoder, trials: usize, stream: &SeededStream) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("need at least one trial"));
    }
    let (sx, sn, sp) = (
        math::sqrt(model.prior_var),
        math::sqrt(model.noise_var),
        math::sqrt(model.posterior_var()),
    );
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..trials as u64 {
        let x = sx * stream.normal_at(3 * i);
        let y = x + sn * stream.normal_at(3 * i + 1);
        let mean = model.posterior_mean(y);
        let first = mean + model.bias;
        let second = match decoder {
            PosteriorDecoder::Sample => mean + sp * stream.normal_at(3 * i + 2),
            PosteriorDecoder::Mean => mean,
        };
        num += (second - x) * (second - x);
        den += (first - x) * (first - x);
    }
    if den == 0.0 {
        return Err(invalid("first-stage MSE is zero"));
    }
    Ok(num / den)
}
