//! Synthetic volumes for probes, tests and demos.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{BitDepth, VolumeStack};

/// Gaussian blobs whose centres move linearly with z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub blobs: usize,
    /// Standard deviation in pixels.
    pub sigma: f64,
    /// Largest per-slice displacement along each lateral axis, in pixels.
    pub max_shift: f64,
    pub background: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            blobs: 3,
            sigma: 3.0,
            max_shift: 1.5,
            background: 0.05,
        }
    }
}

/// An 8-bit `depth × size × size` stack of translating blobs.
pub fn blob_stack(depth: usize, size: usize, p: &BlobParams, seed: u64) -> Result<VolumeStack> {
    if depth == 0 || size == 0 {
        return Err(Error::invalid("empty synthetic stack"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let blobs: Vec<_> = (0..p.blobs)
        .map(|_| {
            let c = [rng.random_range(0.25 * s..0.75 * s), rng.random_range(0.25 * s..0.75 * s)];
            let v = [
                rng.random_range(-p.max_shift..=p.max_shift),
                rng.random_range(-p.max_shift..=p.max_shift),
            ];
            let amp = rng.random_range(0.6..1.0);
            (c, v, amp)
        })
        .collect();
    let mid = (depth as f64 - 1.0) / 2.0;
    let inv = 1.0 / (2.0 * p.sigma * p.sigma);
    let vox = Array3::from_shape_fn((depth, size, size), |(z, y, x)| {
        let t = z as f64 - mid;
        let mut v = p.background;
        for (c, d, amp) in &blobs {
            let dy = y as f64 - (c[0] + d[0] * t);
            let dx = x as f64 - (c[1] + d[1] * t);
            v += amp * (-(dy * dy + dx * dx) * inv).exp();
        }
        (v.min(1.0) * 255.0).round()
    });
    VolumeStack::new(vox, BitDepth::Eight)
}

/// Eight 6-slice 32 × 32 blob stacks (32 midpoint triplets) for the
/// overfit probe.
pub fn probe_stacks(seed: u64) -> Result<Vec<VolumeStack>> {
    let p = BlobParams {
        sigma: 2.5,
        max_shift: 4.0,
        ..BlobParams::default()
    };
    (0..8).map(|k| blob_stack(6, 32, &p, k + 10 * seed)).collect()
}

/// Labeled volume of balls: `(centre [z,y,x], radius)` per label, labels
/// numbered from 1 in order. Later balls overwrite earlier ones.
pub fn ball_labels(shape: (usize, usize, usize), balls: &[([f64; 3], f64)]) -> Array3<u32> {
    let mut out = Array3::zeros(shape);
    for (i, (c, r)) in balls.iter().enumerate() {
        let label = i as u32 + 1;
        for ((z, y, x), v) in out.indexed_iter_mut() {
            let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
            if d2 <= r * r {
                *v = label;
            }
        }
    }
    out
}

/// Every `step`-th slice, starting at the first.
pub fn subsample_z(s: &VolumeStack, step: usize) -> Result<VolumeStack> {
    if step == 0 {
        return Err(Error::invalid("subsampling step must be positive"));
    }
    let keep: Vec<usize> = (0..s.depth()).step_by(step).collect();
    let vox = s.voxels().select(Axis(0), &keep);
    let mut out = VolumeStack::new(vox, s.bit_depth())?;
    out.meta = s.meta.clone();
    if let Some(sp) = out.meta.spacing.as_mut() {
        sp[2] *= step as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_stack_is_deterministic_and_in_range() {
        let p = BlobParams::default();
        let a = blob_stack(9, 32, &p, 3).unwrap();
        let b = blob_stack(9, 32, &p, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.voxels().dim(), (9, 32, 32));
        assert!(a.voxels().iter().all(|v| (0.0..=255.0).contains(v)));
        assert_ne!(a.slice(0), a.slice(8));
    }

    #[test]
    fn balls_are_labeled_in_order() {
        let l = ball_labels((10, 10, 10), &[([3.0, 3.0, 3.0], 1.5), ([7.0, 7.0, 7.0], 1.0)]);
        assert_eq!(l[[3, 3, 3]], 1);
        assert_eq!(l[[7, 7, 7]], 2);
        assert_eq!(l[[0, 9, 0]], 0);
    }

    #[test]
    fn subsampling_keeps_every_other_slice() {
        let s = blob_stack(9, 16, &BlobParams::default(), 1).unwrap().with_spacing([1.0, 1.0, 0.5]);
        let t = subsample_z(&s, 2).unwrap();
        assert_eq!(t.depth(), 5);
        assert_eq!(t.slice(2), s.slice(4));
        assert_eq!(t.spacing().unwrap()[2], 1.0);
    }
}
