//! Image-quality metrics, the cubic z-interpolation baseline and
//! evaluation reports.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, resize_map, ConvGeometry, Var};
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::volio::{BitDepth, VolumeStack};

/// Intensity ceiling used by every metric.
pub const MAX_I: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn rmse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(mse.sqrt())
}

/// `20·log10(255 / rmse)`; `+∞` for a zero error.
pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (MAX_I / rmse).log10()
    }
}

pub fn psnr(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(a, b)?))
}

fn gaussian_window() -> &'static [f64; SSIM_WINDOW] {
    static W: OnceLock<[f64; SSIM_WINDOW]> = OnceLock::new();
    W.get_or_init(|| {
        let mut w = [0.0; SSIM_WINDOW];
        let c = (SSIM_WINDOW / 2) as f64;
        for (i, v) in w.iter_mut().enumerate() {
            *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    })
}

/// Separable valid-mode Gaussian filtering.
fn filter_valid(x: &Array2<f64>) -> Array2<f64> {
    let w = gaussian_window();
    let (h, wd) = x.dim();
    let (ho, wo) = (h + 1 - SSIM_WINDOW, wd + 1 - SSIM_WINDOW);
    let rows = Array2::from_shape_fn((h, wo), |(y, xx)| (0..SSIM_WINDOW).map(|k| w[k] * x[[y, xx + k]]).sum::<f64>());
    Array2::from_shape_fn((ho, wo), |(y, xx)| (0..SSIM_WINDOW).map(|k| w[k] * rows[[y + k, xx]]).sum::<f64>())
}

/// Mean SSIM over all valid 11×11 Gaussian windows, dynamic range 255.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let c1 = (K1 * MAX_I).powi(2);
    let c2 = (K2 * MAX_I).powi(2);
    let mu_a = filter_valid(a);
    let mu_b = filter_valid(b);
    let aa = filter_valid(&(a * a));
    let bb = filter_valid(&(b * b));
    let ab = filter_valid(&(a * b));
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// `[0,1]` frame to rounded 8-bit intensities.
pub fn to_8bit(frame: &Array2<f64>) -> Array2<f64> {
    frame.mapv(|v| (v * MAX_I).round().clamp(0.0, MAX_I))
}

/// Stack intensities requantized and mapped onto the 0–255 scale.
pub fn stack_8bit(s: &VolumeStack) -> Array3<f64> {
    let q = s.quantized();
    match s.bit_depth() {
        BitDepth::Eight => q,
        BitDepth::Sixteen => q.mapv(|v| v * MAX_I / BitDepth::Sixteen.max_value()),
    }
}

/// Catmull-Rom interpolation between `p1` (t = 0) and `p2` (t = 1).
pub fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * ((2.0 * p1)
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3)
}

/// Slice `i` of a stack, with linear extrapolation one step past each end.
fn slice_ext(v: &Array3<f64>, i: isize) -> Array2<f64> {
    let n = v.dim().0 as isize;
    let at = |k: isize| v.index_axis(Axis(0), k as usize).to_owned();
    if i < 0 {
        &at(0) * 2.0 - &at(1)
    } else if i >= n {
        &at(n - 1) * 2.0 - &at(n - 2)
    } else {
        at(i)
    }
}

/// Cubic (or, with fewer than 4 slices, linear) interpolation at fractional
/// position `t` within gap `i` of `v`.
fn interp_gap(v: &Array3<f64>, i: usize, t: f64, cubic: bool) -> Array2<f64> {
    let i = i as isize;
    let p1 = slice_ext(v, i);
    let p2 = slice_ext(v, i + 1);
    if !cubic {
        return &p1 * (1.0 - t) + &p2 * t;
    }
    let p0 = slice_ext(v, i - 1);
    let p3 = slice_ext(v, i + 2);
    let mut out = Array2::zeros(p1.dim());
    ndarray::Zip::from(&mut out)
        .and(&p0)
        .and(&p1)
        .and(&p2)
        .and(&p3)
        .for_each(|o, &a, &b, &c, &d| *o = catmull_rom(a, b, c, d, t));
    out
}

/// Result of [`bicubic_z`].
#[derive(Debug, Clone)]
pub struct Upsampled {
    pub stack: VolumeStack,
    pub warning: Option<String>,
}

/// Inserts `factor − 1` slices per gap by Catmull-Rom interpolation along z.
pub fn bicubic_z(s: &VolumeStack, factor: usize) -> Result<Upsampled> {
    if ![2, 4, 8].contains(&factor) {
        return Err(Error::invalid(format!("factor {factor} not in {{2, 4, 8}}")));
    }
    let n = s.depth();
    if n < 2 {
        return Err(Error::invalid("need at least 2 slices"));
    }
    let cubic = n >= 4;
    let warning = (!cubic).then(|| {
        let w = format!("{n} slices: linear interpolation used");
        log::warn!("{w}");
        w
    });
    let v = s.voxels();
    let hi = if s.is_normalized() { 1.0 } else { s.bit_depth().max_value() };
    let out_n = factor * (n - 1) + 1;
    let mut out = Array3::zeros((out_n, s.height(), s.width()));
    for k in 0..out_n {
        let (gap, r) = (k / factor, k % factor);
        let plane = if r == 0 {
            v.index_axis(Axis(0), gap).to_owned()
        } else {
            interp_gap(v, gap, r as f64 / factor as f64, cubic).mapv(|x| x.clamp(0.0, hi))
        };
        out.index_axis_mut(Axis(0), k).assign(&plane);
    }
    let mut stack = s.with_voxels(out);
    if let Some(sp) = stack.meta.spacing.as_mut() {
        sp[2] /= factor as f64;
    }
    Ok(Upsampled { stack, warning })
}

/// The slice between `n1` and `n3` (1-based, midpoint) predicted by cubic
/// interpolation from the stack subsampled with step `n3 − n1`.
pub fn bicubic_midpoint(v: &Array3<f64>, n1: usize, n3: usize) -> Array2<f64> {
    let step = (n3 - n1) as isize;
    let depth = v.dim().0 as isize;
    let (a, b) = (n1 as isize - 1, n3 as isize - 1);
    let pick = |i: isize, fallback_a: isize, fallback_b: isize| {
        if (0..depth).contains(&i) {
            v.index_axis(Axis(0), i as usize).to_owned()
        } else {
            let fa = v.index_axis(Axis(0), fallback_a as usize).to_owned();
            let fb = v.index_axis(Axis(0), fallback_b as usize).to_owned();
            &fa * 2.0 - &fb
        }
    };
    let p0 = pick(a - step, a, b);
    let p1 = v.index_axis(Axis(0), a as usize).to_owned();
    let p2 = v.index_axis(Axis(0), b as usize).to_owned();
    let p3 = pick(b + step, b, a);
    let mut out = Array2::zeros(p1.dim());
    ndarray::Zip::from(&mut out)
        .and(&p0)
        .and(&p1)
        .and(&p2)
        .and(&p3)
        .for_each(|o, &w, &x, &y, &z| *o = catmull_rom(w, x, y, z, 0.5));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub rmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl SliceMetrics {
    fn from_parts(rmses: &[f64], ssims: &[f64]) -> Self {
        let n = rmses.len().max(1) as f64;
        let r = rmses.iter().sum::<f64>() / n;
        SliceMetrics {
            rmse: r,
            psnr_db: psnr_from_rmse(r),
            ssim: ssims.iter().sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapMetrics {
    pub gap: usize,
    /// 0-based output indices scored in this gap.
    pub positions: Vec<usize>,
    #[serde(flatten)]
    pub metrics: SliceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    #[serde(flatten)]
    pub metrics: SliceMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<FidReport>,
    pub slices_scored: usize,
    pub ssim_window: String,
    pub per_gap: Vec<GapMetrics>,
}

/// Metrics over the generated slices only; originals sit every
/// `stride + 1` slices.
pub fn interstack_report(pred: &VolumeStack, gt: &VolumeStack, stride: usize) -> Result<MetricReport> {
    if pred.depth() != gt.depth() || pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.depth(),
            pred.height(),
            pred.width(),
            gt.depth(),
            gt.height(),
            gt.width()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let period = stride + 1;
    let p = stack_8bit(pred);
    let g = stack_8bit(gt);
    let gaps = (gt.depth() - 1) / period;
    let mut per_gap = Vec::with_capacity(gaps);
    let (mut all_r, mut all_s) = (Vec::new(), Vec::new());
    for gap in 0..gaps {
        let positions: Vec<usize> = (1..=stride).map(|k| gap * period + k).collect();
        let (mut rs, mut ss) = (Vec::new(), Vec::new());
        for &i in &positions {
            let a = p.index_axis(Axis(0), i).to_owned();
            let b = g.index_axis(Axis(0), i).to_owned();
            rs.push(rmse(&a, &b)?);
            ss.push(ssim(&a, &b)?);
        }
        all_r.extend(&rs);
        all_s.extend(&ss);
        per_gap.push(GapMetrics {
            gap,
            positions,
            metrics: SliceMetrics::from_parts(&rs, &ss),
        });
    }
    Ok(MetricReport {
        dataset: String::new(),
        model: String::new(),
        metrics: SliceMetrics::from_parts(&all_r, &all_s),
        fid: None,
        slices_scored: all_r.len(),
        ssim_window: format!("gaussian {SSIM_WINDOW}x{SSIM_WINDOW}, sigma {SSIM_SIGMA}"),
        per_gap,
    })
}

/// Fréchet distance and how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub value: f64,
    pub jitter_applied: bool,
    pub extractor: String,
    pub extractor_sha256: String,
}

fn mean_and_centered(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n as f64));
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    (mu, c)
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples). When features outnumber samples, `tr((Σ_A Σ_B)^{1/2})` is
/// taken as the nuclear norm of `X_A X_Bᵀ / sqrt((n_A−1)(n_B−1))` for
/// centred `X`, which avoids a `d×d` matrix square root.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid("each set needs at least 2 samples"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch("feature dimensions differ".into()));
    }
    let to_m = |x: &Array2<f64>| DMatrix::from_row_iterator(x.nrows(), x.ncols(), x.iter().copied());
    let (mu_a, xa) = mean_and_centered(&to_m(a));
    let (mu_b, xb) = mean_and_centered(&to_m(b));
    let (na, nb) = ((a.nrows() - 1) as f64, (b.nrows() - 1) as f64);
    let tr_a = xa.norm_squared() / na;
    let tr_b = xb.norm_squared() / nb;
    let dim = a.ncols();
    let nuclear: f64 = if dim < a.nrows().min(b.nrows()) {
        // fewer features than samples: work with the d×d covariances
        let ca = xa.transpose() * &xa / na;
        let cb = xb.transpose() * &xb / nb;
        let (sa, _) = sqrtm_psd(&ca);
        let inner = &sa * cb * &sa;
        let e = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
        e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
    } else {
        let cross = (&xa * xb.transpose()) / (na * nb).sqrt();
        cross.singular_values().iter().sum()
    };
    let d = (mu_a - mu_b).norm_squared() + tr_a + tr_b - 2.0 * nuclear;
    Ok(d.max(0.0))
}

fn sqrtm_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let e = SymmetricEigen::new(m.clone());
    let min = e.eigenvalues.min();
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    (&e.eigenvectors * s * e.eigenvectors.transpose(), min)
}

/// Fréchet distance from Gaussian statistics. Adds `1e-6·I` to both
/// covariances when the product is numerically indefinite.
pub fn frechet_from_stats(
    mu_a: &[f64],
    cov_a: &Array2<f64>,
    mu_b: &[f64],
    cov_b: &Array2<f64>,
) -> Result<(f64, bool)> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.dim() != (d, d) || cov_b.dim() != (d, d) {
        return Err(Error::ShapeMismatch("statistics dimensions differ".into()));
    }
    let to_m = |x: &Array2<f64>| DMatrix::from_row_iterator(d, d, x.iter().copied());
    let compute = |ca: &DMatrix<f64>, cb: &DMatrix<f64>| {
        let (sa, min_a) = sqrtm_psd(ca);
        let inner = &sa * cb * &sa;
        let inner = (&inner + inner.transpose()) * 0.5;
        let e = SymmetricEigen::new(inner);
        let tr: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
        (tr, min_a.min(e.eigenvalues.min()))
    };
    let (mut ca, mut cb) = (to_m(cov_a), to_m(cov_b));
    let (mut tr, min) = compute(&ca, &cb);
    let scale = ca.trace().abs().max(cb.trace().abs()).max(1.0);
    let jitter = min < -1e-9 * scale;
    if jitter {
        let eye = DMatrix::<f64>::identity(d, d) * 1e-6;
        ca += &eye;
        cb += &eye;
        tr = compute(&ca, &cb).0;
    }
    let dm: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(((dm + ca.trace() + cb.trace() - 2.0 * tr).max(0.0), jitter))
}

/// Fixed, seeded convolutional embedding producing 2048 features per frame.
/// Its weights are deterministic, so reports pin it by hash.
pub struct FeatureExtractor {
    convs: Vec<(Var, ConvGeometry)>,
    sha256: String,
}

pub const FEATURE_DIM: usize = 2048;
const EXTRACTOR_INPUT: usize = 64;
const EXTRACTOR_SEED: u64 = 0x5eed_f1d0;

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let plan = [(1, 32, 3, 2), (32, 64, 3, 2), (64, 128, 3, 2), (128, 256, 3, 2), (256, FEATURE_DIM, 1, 1)];
        let mut bytes = Vec::new();
        let convs = plan
            .iter()
            .map(|&(ci, co, k, s)| {
                let bound = (6.0 / (ci * k * k) as f64).sqrt();
                let w = ArrayD::from_shape_fn(IxDyn(&[co, ci, k, k]), |_| rng.random_range(-bound..bound));
                w.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
                (Var::constant(w), ConvGeometry::new(k, s, k / 2))
            })
            .collect();
        FeatureExtractor {
            convs,
            sha256: sha256_hex(&bytes),
        }
    }

    pub fn name(&self) -> &'static str {
        "axsr-randconv-2048-v1"
    }

    pub fn sha256(&self) -> &str {
        &self.sha256
    }

    /// Features of `[0,1]` frames, one row each.
    pub fn embed(&self, frames: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let _g = autograd::no_grad();
        let mut rows = Array2::zeros((frames.len(), FEATURE_DIM));
        for (i, f) in frames.iter().enumerate() {
            let (h, w) = f.dim();
            let x = Var::constant((*f).clone().into_shape_with_order((1, 1, h, w)).unwrap().into_dyn());
            let mut y = x.separable(&resize_map(h, w, EXTRACTOR_INPUT, EXTRACTOR_INPUT)).add_scalar(-0.5);
            for (k, (wt, g)) in self.convs.iter().enumerate() {
                y = y.conv2d(wt, *g);
                if k + 1 < self.convs.len() {
                    y = y.leaky_relu(0.0);
                }
            }
            let v = y.value();
            let hw = (v.shape()[2] * v.shape()[3]) as f64;
            for c in 0..FEATURE_DIM {
                rows[[i, c]] = v.index_axis(Axis(1), c).sum() / hw;
            }
        }
        Ok(rows)
    }

    pub fn fid(&self, a: &[&Array2<f64>], b: &[&Array2<f64>]) -> Result<FidReport> {
        let fa = self.embed(a)?;
        let fb = self.embed(b)?;
        Ok(FidReport {
            value: frechet_distance(&fa, &fb)?,
            jitter_applied: false,
            extractor: self.name().to_string(),
            extractor_sha256: self.sha256.clone(),
        })
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// One row of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    #[serde(flatten)]
    pub metrics: SliceMetrics,
    pub train_seconds: Option<f64>,
    pub predict_seconds: f64,
}

/// Markdown table: method, RMSE ↓, PSNR ↑, SSIM ↑, runtimes.
pub fn render_table(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "| Method | RMSE ↓ | PSNR (dB) ↑ | SSIM ↑ | Training (s) | Prediction (s) |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let train = r.train_seconds.map_or("-".to_string(), |t| format!("{t:.2}"));
        s.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.3} | {} | {:.3} |\n",
            r.method, r.metrics.rmse, r.metrics.psnr_db, r.metrics.ssim, train, r.predict_seconds
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn rand_img(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random_range(0..256) as f64)
    }

    #[test]
    fn psnr_identity() {
        assert!((psnr_from_rmse(16.68) - 23.69).abs() <= 0.02);
        assert!((psnr_from_rmse(19.15) - 22.49).abs() <= 0.02);
        let a = rand_img(1, 16);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    /// Direct per-window SSIM with a 2-D Gaussian window.
    fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let w1 = gaussian_window();
        let (h, w) = a.dim();
        let (c1, c2) = ((K1 * 255.0f64).powi(2), (K2 * 255.0f64).powi(2));
        let mut tot = 0.0;
        let mut cnt = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = w1[i] * w1[j];
                        let (p, q) = (a[[y + i, x + j]], b[[y + i, x + j]]);
                        ma += k * p;
                        mb += k * q;
                        aa += k * p * p;
                        bb += k * q * q;
                        ab += k * p * q;
                    }
                }
                let (va, vb, cv) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                tot += ((2.0 * ma * mb + c1) * (2.0 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                cnt += 1.0;
            }
        }
        tot / cnt
    }

    #[test]
    fn ssim_matches_oracle_and_is_symmetric() {
        let a = rand_img(2, 24);
        let b = a.mapv(|v| (v * 0.8 + 20.0).round());
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-10);
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(s < 1.0);
        assert!(ssim(&rand_img(1, 8), &rand_img(2, 8)).is_err());
    }

    fn gaussian_set(n: usize, d: usize, mean: &[f64], sd: &[f64], seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |(_, j)| mean[j] + sd[j] * z.sample(&mut rng))
    }

    #[test]
    fn fid_identical_sets() {
        let a = gaussian_set(50, 8, &[0.0; 8], &[1.0; 8], 1);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn fid_equal_covariance_is_mean_gap() {
        let d = 4;
        let a = gaussian_set(400, d, &[0.0; 4], &[1.0; 4], 2);
        let shift = [3.0, -2.0, 1.0, 0.5];
        // identical samples shifted: covariances exactly equal
        let mut b = a.clone();
        for mut row in b.rows_mut() {
            for j in 0..d {
                row[j] += shift[j];
            }
        }
        let expect: f64 = shift.iter().map(|v| v * v).sum();
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - expect).abs() <= 0.01 * expect, "{got} vs {expect}");
    }

    #[test]
    fn fid_diagonal_trace_term() {
        let sa = [1.0, 4.0, 0.25, 2.0];
        let sb = [2.0, 1.0, 1.0, 0.5];
        let cov = |s: &[f64]| Array2::from_shape_fn((4, 4), |(i, j)| if i == j { s[i] } else { 0.0 });
        let (got, jitter) = frechet_from_stats(&[0.0; 4], &cov(&sa), &[0.0; 4], &cov(&sb)).unwrap();
        let oracle: f64 = sa.iter().zip(&sb).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
        assert!(!jitter);
        assert!((got - oracle).abs() <= 0.01 * oracle);

        let sd_a: Vec<f64> = sa.iter().map(|v| v.sqrt()).collect();
        let sd_b: Vec<f64> = sb.iter().map(|v| v.sqrt()).collect();
        let a = gaussian_set(20000, 4, &[0.0; 4], &sd_a, 3);
        let b = gaussian_set(20000, 4, &[0.0; 4], &sd_b, 4);
        let sample = frechet_distance(&a, &b).unwrap();
        assert!((sample - oracle).abs() <= 0.05 * oracle, "{sample} vs {oracle}");
    }

    #[test]
    fn fid_sample_and_stats_paths_agree() {
        let a = gaussian_set(30, 5, &[0.0; 5], &[1.0, 2.0, 0.5, 1.0, 3.0], 5);
        let b = gaussian_set(25, 5, &[1.0; 5], &[2.0, 1.0, 1.0, 0.5, 1.0], 6);
        let stats = |x: &Array2<f64>| {
            let n = x.nrows() as f64;
            let mu = x.mean_axis(Axis(0)).unwrap();
            let c = x - &mu;
            (mu.to_vec(), c.t().dot(&c) / (n - 1.0))
        };
        let (ma, ca) = stats(&a);
        let (mb, cb) = stats(&b);
        let (s, _) = frechet_from_stats(&ma, &ca, &mb, &cb).unwrap();
        assert!((s - frechet_distance(&a, &b).unwrap()).abs() < 1e-8);
        assert!((frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn extractor_is_deterministic() {
        let e = FeatureExtractor::new();
        assert_eq!(e.sha256(), FeatureExtractor::new().sha256());
        let f: Vec<Array2<f64>> = (0..3).map(|s| rand_img(s, 32) / 255.0).collect();
        let refs: Vec<&Array2<f64>> = f.iter().collect();
        let r = e.fid(&refs, &refs).unwrap();
        assert!(r.value.abs() < 1e-6);
        assert_eq!(e.embed(&refs).unwrap().ncols(), FEATURE_DIM);
    }

    fn ramp_stack(n: usize) -> VolumeStack {
        let v = Array3::from_shape_fn((n, 4, 4), |(z, y, x)| (10 * z + y + x) as f64);
        VolumeStack::new(v, BitDepth::Eight).unwrap()
    }

    #[test]
    fn bicubic_reproduces_ramps_and_counts() {
        let s = ramp_stack(6);
        let up = bicubic_z(&s, 4).unwrap();
        assert!(up.warning.is_none());
        assert_eq!(up.stack.depth(), 21);
        for k in 0..21 {
            let expect = 10.0 * k as f64 / 4.0;
            assert!((up.stack.voxels()[[k, 0, 0]] - expect).abs() < 1e-12);
        }
        for i in 0..6 {
            assert_eq!(up.stack.slice(4 * i), s.slice(i));
        }
        assert_eq!(bicubic_z(&ramp_stack(18), 8).unwrap().stack.depth(), 137);
        assert!(bicubic_z(&ramp_stack(3), 2).unwrap().warning.is_some());
        assert!(bicubic_z(&s, 3).is_err());
    }

    #[test]
    fn bicubic_symmetry() {
        let vals = [0.0, 50.0, 200.0, 50.0, 0.0];
        let v = Array3::from_shape_fn((5, 1, 1), |(z, _, _)| vals[z]);
        let up = bicubic_z(&VolumeStack::new(v, BitDepth::Eight).unwrap(), 2).unwrap();
        let o = up.stack.voxels();
        let n = o.dim().0;
        for k in 0..n {
            assert!((o[[k, 0, 0]] - o[[n - 1 - k, 0, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_midpoint_on_ramp() {
        let v = Array3::from_shape_fn((5, 2, 2), |(z, _, _)| 3.0 * z as f64);
        let m = bicubic_midpoint(&v, 1, 3);
        assert!(m.iter().all(|&x| (x - 3.0).abs() < 1e-12));
        let m = bicubic_midpoint(&v, 3, 5);
        assert!(m.iter().all(|&x| (x - 9.0).abs() < 1e-12));
    }

    #[test]
    fn interstack_scoring() {
        let gt = {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let v = Array3::from_shape_fn((137, 16, 16), |_| rng.random_range(0..256) as f64);
            VolumeStack::new(v, BitDepth::Eight).unwrap()
        };
        let r = interstack_report(&gt, &gt, 7).unwrap();
        assert_eq!((r.per_gap.len(), r.slices_scored), (17, 119));
        assert_eq!(r.metrics.rmse, 0.0);
        assert!(r.per_gap.iter().all(|g| (g.metrics.ssim - 1.0).abs() < 1e-12));
        let small = VolumeStack::new(gt.voxels().slice(ndarray::s![..9, .., ..]).to_owned(), BitDepth::Eight).unwrap();
        let r = interstack_report(&small, &small, 1).unwrap();
        let idx: Vec<usize> = r.per_gap.iter().flat_map(|g| g.positions.clone()).collect();
        assert_eq!(idx, vec![1, 3, 5, 7]);
        assert!(interstack_report(&small, &gt, 1).is_err());
    }

    #[test]
    fn table_has_runtime_columns() {
        let row = BenchRow {
            method: "bicubic".into(),
            metrics: SliceMetrics {
                rmse: 16.68,
                psnr_db: psnr_from_rmse(16.68),
                ssim: 0.5,
            },
            train_seconds: None,
            predict_seconds: 0.1,
        };
        let t = render_table(&[row]);
        assert!(t.contains("Prediction (s)") && t.contains("| bicubic | 16.68 | 23.69 |"));
    }
}
