//! Shape analyses on labeled masks: spherical-harmonic roughness, label
//! matching by overlap and smoothed-mask IoU.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many points a degree-5 fit is rank-deficient.
pub const MIN_SURFACE_POINTS: usize = 50;
pub const L_MAX: usize = 5;
/// Designs with a larger singular-value ratio are rejected.
pub const MAX_CONDITION: f64 = 1e8;
pub const SH_CONVENTION: &str = "real orthonormal, no Condon-Shortley phase";

/// Boundary points of one labeled object, in physical `(x, y, z)` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePointCloud {
    pub points: Vec<[f64; 3]>,
    pub label: u32,
    /// Mean of the points.
    pub center: [f64; 3],
}

impl SurfacePointCloud {
    pub fn new(points: Vec<[f64; 3]>, label: u32) -> Result<Self> {
        if points.len() < MIN_SURFACE_POINTS {
            return Err(Error::invalid(format!(
                "label {label}: {} surface points, at least {MIN_SURFACE_POINTS} needed",
                points.len()
            )));
        }
        let mut c = [0.0; 3];
        for p in &points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = points.len() as f64;
        Ok(SurfacePointCloud {
            center: c.map(|v| v / n),
            points,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point mapped through `f`.
    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        SurfacePointCloud::new(self.points.iter().map(|&p| f(p)).collect(), self.label)
    }
}

const NEIGHBOURS: [[isize; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Voxels of `label` with at least one face neighbour carrying another
/// label (the volume border counts as another label). `spacing` is
/// `(dx, dy, dz)`; the mask is indexed `[z, y, x]`.
pub fn boundary_voxels(mask: &Array3<u32>, label: u32) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for ((z, y, x), &v) in mask.indexed_iter() {
        if v != label {
            continue;
        }
        let edge = NEIGHBOURS.iter().any(|o| {
            let (zz, yy, xx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
            if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                return true;
            }
            mask[[zz as usize, yy as usize, xx as usize]] != label
        });
        if edge {
            out.push([z, y, x]);
        }
    }
    out
}

pub fn extract_surface(mask: &Array3<u32>, label: u32, spacing: [f64; 3]) -> Result<SurfacePointCloud> {
    if label == 0 || !mask.iter().any(|&v| v == label) {
        return Err(Error::invalid(format!("label {label} not present in mask")));
    }
    let pts = boundary_voxels(mask, label)
        .into_iter()
        .map(|[z, y, x]| [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]])
        .collect();
    SurfacePointCloud::new(pts, label)
}

/// Associated Legendre values `P_l^m(x)` for `0 ≤ m ≤ l ≤ l_max`, without
/// the Condon–Shortley phase; indexed `[l][m]`.
fn legendre(l_max: usize, x: f64) -> Vec<Vec<f64>> {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut p = vec![vec![0.0; l_max + 1]; l_max + 1];
    let mut pmm = 1.0;
    for m in 0..=l_max {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        p[m][m] = pmm;
        if m < l_max {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in m + 2..=l_max {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m]) / (l - m) as f64;
        }
    }
    p
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Position of `(l, m)` in the coefficient vector.
pub fn sh_index(l: usize, m: i64) -> usize {
    l * l + (m + l as i64) as usize
}

/// All real orthonormal harmonics up to `l_max` at polar angle `theta`
/// (from +z) and azimuth `phi`, in [`sh_index`] order.
pub fn real_sh(l_max: usize, theta: f64, phi: f64) -> Vec<f64> {
    let p = legendre(l_max, theta.cos());
    let mut out = vec![0.0; (l_max + 1) * (l_max + 1)];
    for l in 0..=l_max {
        for m in -(l as i64)..=l as i64 {
            let am = m.unsigned_abs() as usize;
            let norm = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - am) / factorial(l + am)).sqrt();
            let v = if m == 0 {
                norm * p[l][0]
            } else if m > 0 {
                2f64.sqrt() * norm * p[l][am] * (am as f64 * phi).cos()
            } else {
                2f64.sqrt() * norm * p[l][am] * (am as f64 * phi).sin()
            };
            out[sh_index(l, m)] = v;
        }
    }
    out
}

/// `R(θ, φ) = Σ f_lm Y_lm(θ, φ)` truncated at `l_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShExpansion {
    pub l_max: usize,
    /// `(l_max + 1)²` coefficients in [`sh_index`] order.
    pub coeffs: Vec<f64>,
    /// `f00 / √(4π)`.
    pub mean_radius: f64,
    pub condition: f64,
    /// Direction cells whose radii disagree, i.e. where the surface is not
    /// star-shaped about its centre.
    pub star_violations: usize,
    pub convention: String,
}

impl ShExpansion {
    pub fn coeff(&self, l: usize, m: i64) -> f64 {
        self.coeffs[sh_index(l, m)]
    }

    /// Evaluates the expansion in direction `(theta, phi)`.
    pub fn radius(&self, theta: f64, phi: f64) -> f64 {
        real_sh(self.l_max, theta, phi).iter().zip(&self.coeffs).map(|(y, f)| y * f).sum()
    }
}

fn spherical(p: [f64; 3], c: [f64; 3]) -> (f64, f64, f64) {
    let (x, y, z) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
    let r = (x * x + y * y + z * z).sqrt();
    let theta = if r > 0.0 { (z / r).clamp(-1.0, 1.0).acos() } else { 0.0 };
    (r, theta, y.atan2(x))
}

/// Counts 5° direction cells whose largest radius exceeds the smallest by
/// more than half.
fn star_violations(sph: &[(f64, f64, f64)]) -> usize {
    let mut cells: HashMap<(i64, i64), (f64, f64)> = HashMap::new();
    let step = 5f64.to_radians();
    for &(r, t, p) in sph {
        let key = ((t / step) as i64, ((p + PI) / step) as i64);
        let e = cells.entry(key).or_insert((r, r));
        e.0 = e.0.min(r);
        e.1 = e.1.max(r);
    }
    cells.values().filter(|(lo, hi)| *hi > 1.5 * *lo).count()
}

/// Least-squares fit of the radius about the centroid.
pub fn fit_sh(cloud: &SurfacePointCloud, l_max: usize) -> Result<ShExpansion> {
    if cloud.len() < MIN_SURFACE_POINTS {
        return Err(Error::invalid(format!("{} points, at least {MIN_SURFACE_POINTS} needed", cloud.len())));
    }
    let k = (l_max + 1) * (l_max + 1);
    if cloud.len() < k {
        return Err(Error::invalid(format!("{} points cannot determine {k} coefficients", cloud.len())));
    }
    let sph: Vec<(f64, f64, f64)> = cloud.points.iter().map(|&p| spherical(p, cloud.center)).collect();
    let violations = star_violations(&sph);
    if violations > 0 {
        log::warn!("label {}: {violations} direction cells are not star-shaped", cloud.label);
    }
    let rows: Vec<Vec<f64>> = sph.par_iter().map(|&(_, t, p)| real_sh(l_max, t, p)).collect();
    let a = DMatrix::from_fn(sph.len(), k, |i, j| rows[i][j]);
    let b = DVector::from_iterator(sph.len(), sph.iter().map(|s| s.0));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition.is_nan() || condition > MAX_CONDITION {
        return Err(Error::Numerical(format!(
            "label {}: design condition number {condition:.3e} exceeds {MAX_CONDITION:.0e}; angular coverage too poor",
            cloud.label
        )));
    }
    let f = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    let coeffs: Vec<f64> = f.iter().copied().collect();
    Ok(ShExpansion {
        l_max,
        mean_radius: coeffs[0] / (4.0 * PI).sqrt(),
        coeffs,
        condition,
        star_violations: violations,
        convention: SH_CONVENTION.to_string(),
    })
}

/// `P_l = 4π / ((2l + 1) f00²) · Σ_m f_lm²` for `l = 0..=l_max`.
pub fn power_spectrum(e: &ShExpansion) -> Result<Vec<f64>> {
    let f00 = e.coeff(0, 0);
    if f00 == 0.0 || !f00.is_finite() {
        return Err(Error::Numerical("f00 is zero; degenerate surface".into()));
    }
    Ok((0..=e.l_max)
        .map(|l| {
            let s: f64 = (-(l as i64)..=l as i64).map(|m| e.coeff(l, m).powi(2)).sum();
            4.0 * PI / ((2 * l + 1) as f64 * f00 * f00) * s
        })
        .collect())
}

/// `Ro = Σ_{l ≥ 3} (2l + 1) P_l`.
pub fn roughness(e: &ShExpansion) -> Result<f64> {
    let p = power_spectrum(e)?;
    Ok((3..=e.l_max).map(|l| (2 * l + 1) as f64 * p[l]).sum())
}

/// `n` nearly uniform unit vectors on a golden-angle spiral.
pub fn fibonacci_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Spectrum row of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughnessRow {
    pub label: u32,
    pub points: usize,
    pub mean_radius: f64,
    pub power: Vec<f64>,
    pub roughness: f64,
    pub star_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughnessTable {
    pub convention: String,
    pub l_max: usize,
    pub rows: Vec<RoughnessRow>,
    /// Labels that could not be analysed, with the reason.
    pub skipped: Vec<(u32, String)>,
}

/// Roughness of every non-zero label, analysed in parallel.
pub fn roughness_table(mask: &Array3<u32>, spacing: [f64; 3]) -> RoughnessTable {
    let labels: BTreeSet<u32> = mask.iter().copied().filter(|&v| v != 0).collect();
    let results: Vec<(u32, Result<RoughnessRow>)> = labels
        .into_par_iter()
        .map(|label| {
            let row = (|| {
                let cloud = extract_surface(mask, label, spacing)?;
                let e = fit_sh(&cloud, L_MAX)?;
                Ok(RoughnessRow {
                    label,
                    points: cloud.len(),
                    mean_radius: e.mean_radius,
                    power: power_spectrum(&e)?,
                    roughness: roughness(&e)?,
                    star_violations: e.star_violations,
                })
            })();
            (label, row)
        })
        .collect();
    let mut table = RoughnessTable {
        convention: SH_CONVENTION.to_string(),
        l_max: L_MAX,
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for (label, r) in results {
        match r {
            Ok(row) => table.rows.push(row),
            Err(e) => table.skipped.push((label, e.to_string())),
        }
    }
    table
}

/// One A-label and its best-overlapping B-label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRow {
    pub label_a: u32,
    /// `None` when the object overlaps no B-label.
    pub label_b: Option<u32>,
    pub vol_a: u64,
    pub vol_b: u64,
    pub overlap: u64,
    /// Another B-label had the same overlap; the smaller id was taken.
    pub tie: bool,
}

fn volumes(m: &Array3<u32>) -> BTreeMap<u32, u64> {
    let mut v = BTreeMap::new();
    for &l in m.iter().filter(|&&l| l != 0) {
        *v.entry(l).or_insert(0) += 1;
    }
    v
}

/// Maps every non-zero label of `a` to the non-zero label of `b` it
/// overlaps most.
pub fn match_labels(a: &Array3<u32>, b: &Array3<u32>) -> Result<Vec<MatchRow>> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("masks {:?} and {:?}", a.dim(), b.dim())));
    }
    let mut overlap: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&la, &lb) in a.iter().zip(b.iter()) {
        if la != 0 && lb != 0 {
            *overlap.entry((la, lb)).or_insert(0) += 1;
        }
    }
    let (va, vb) = (volumes(a), volumes(b));
    Ok(va
        .iter()
        .map(|(&la, &vol_a)| {
            // BTreeMap order visits smaller B ids first, so strict `>` keeps
            // the smallest id among equal overlaps
            let mut best: Option<(u32, u64)> = None;
            let mut tie = false;
            for (&(_, lb), &n) in overlap.range((la, 0)..=(la, u32::MAX)) {
                match best {
                    Some((_, m)) if n == m => tie = true,
                    Some((_, m)) if n < m => {}
                    _ => {
                        best = Some((lb, n));
                        tie = false;
                    }
                }
            }
            MatchRow {
                label_a: la,
                label_b: best.map(|b| b.0),
                vol_a,
                vol_b: best.map(|b| vb[&b.0]).unwrap_or(0),
                overlap: best.map(|b| b.1).unwrap_or(0),
                tie,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouParams {
    pub dilate_r: usize,
    pub sigma: f64,
    pub threshold: f64,
}

impl Default for IouParams {
    fn default() -> Self {
        IouParams {
            dilate_r: 2,
            sigma: 1.0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub iou: f64,
    /// Both processed masks were empty; `iou` is then 1 by definition.
    pub both_empty: bool,
}

/// Binary dilation with a ball of radius `r` voxels.
pub fn dilate(m: &Array3<bool>, r: usize) -> Array3<bool> {
    if r == 0 {
        return m.clone();
    }
    let ri = r as isize;
    let mut offsets = Vec::new();
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if dz * dz + dy * dy + dx * dx <= ri * ri {
                    offsets.push((dz, dy, dx));
                }
            }
        }
    }
    let (d, h, w) = m.dim();
    let mut out = Array3::from_elem((d, h, w), false);
    for ((z, y, x), &v) in m.indexed_iter() {
        if !v {
            continue;
        }
        for &(dz, dy, dx) in &offsets {
            let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
            if zz >= 0 && yy >= 0 && xx >= 0 && (zz as usize) < d && (yy as usize) < h && (xx as usize) < w {
                out[[zz as usize, yy as usize, xx as usize]] = true;
            }
        }
    }
    out
}

/// Separable Gaussian smoothing truncated at 3σ; voxels outside the
/// volume count as zero.
pub fn gaussian_smooth(v: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return v.clone();
    }
    let rad = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|x| x / total).collect();
    let mut cur = v.clone();
    for axis in 0..3 {
        let n = cur.len_of(Axis(axis)) as isize;
        let mut next = Array3::zeros(cur.raw_dim());
        for (mut o, i) in next.lanes_mut(Axis(axis)).into_iter().zip(cur.lanes(Axis(axis))) {
            for t in 0..n {
                let mut acc = 0.0;
                for (j, &kw) in k.iter().enumerate() {
                    let s = t + j as isize - rad;
                    if (0..n).contains(&s) {
                        acc += kw * i[s as usize];
                    }
                }
                o[t as usize] = acc;
            }
        }
        cur = next;
    }
    cur
}

fn process(m: &Array3<bool>, p: &IouParams) -> Array3<bool> {
    let d = dilate(m, p.dilate_r).mapv(|b| if b { 1.0 } else { 0.0 });
    gaussian_smooth(&d, p.sigma).mapv(|v| v >= p.threshold)
}

/// Dilate, smooth and re-threshold both masks, then `|A∩B| / |A∪B|`.
pub fn smoothed_iou(a: &Array3<bool>, b: &Array3<bool>, p: &IouParams) -> Result<IouResult> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("masks {:?} and {:?}", a.dim(), b.dim())));
    }
    if !(p.sigma >= 0.0 && p.sigma.is_finite() && p.threshold.is_finite()) {
        return Err(Error::invalid(format!("bad smoothing parameters {p:?}")));
    }
    let (pa, pb) = (process(a, p), process(b, p));
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in pa.iter().zip(pb.iter()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        log::warn!("both masks empty after processing; IoU defined as 1");
        return Ok(IouResult {
            iou: 1.0,
            both_empty: true,
        });
    }
    Ok(IouResult {
        iou: inter as f64 / union as f64,
        both_empty: false,
    })
}
