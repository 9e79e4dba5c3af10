//! Self-supervised training triplets cut from high-resolution stacks,
//! joint augmentation, and constant relative-position planes (DPMs).
//!
//! Slice indices in [`TripletSource`] are 1-based.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{self, FramePolicy, ModelFrame, VolumeStack};

/// Where a triplet came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TripletSource {
    pub stack: String,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    /// Frame index within the slice layout (0 for the resize policy).
    pub tile: usize,
}

#[derive(Debug, Clone)]
pub struct TripletSample {
    pub i0: ModelFrame,
    pub ig: ModelFrame,
    pub i1: ModelFrame,
    pub z: f64,
    pub source: TripletSource,
}

/// Relative position of the middle slice.
pub fn relative_z(n1: usize, n2: usize, n3: usize) -> f64 {
    (n2 - n1) as f64 / (n3 - n1) as f64
}

/// How slices become model frames during extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameOptions {
    pub policy: FramePolicy,
    pub model_size: usize,
}

impl Default for FrameOptions {
    fn default() -> Self {
        FrameOptions {
            policy: FramePolicy::Resize,
            model_size: volio::MODEL_SIZE,
        }
    }
}

/// Triplets plus any non-fatal warning raised while extracting them.
#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub triplets: Vec<TripletSample>,
    pub warning: Option<String>,
}

/// `(i, i+1, i+2)` for `i = 1..=depth-2`.
pub fn fixed_triplet_indices(depth: usize) -> Vec<(usize, usize, usize)> {
    (1..=depth.saturating_sub(2)).map(|i| (i, i + 1, i + 2)).collect()
}

/// Unique strictly increasing `(n1, n2, n3)` with `t - window <= n1` and
/// `n3 <= t`, over `t` from `min(window, depth)` to `depth`; indices below 1
/// are clipped.
pub fn windowed_triplet_indices(depth: usize, window: usize) -> Vec<(usize, usize, usize)> {
    let mut set = BTreeSet::new();
    if depth < 3 {
        return Vec::new();
    }
    for t in window.min(depth)..=depth {
        let lo = t.saturating_sub(window).max(1);
        for n1 in lo..=t {
            for n2 in n1 + 1..=t {
                for n3 in n2 + 1..=t {
                    set.insert((n1, n2, n3));
                }
            }
        }
    }
    set.into_iter().collect()
}

fn build(
    s: &VolumeStack,
    stack_id: &str,
    indices: &[(usize, usize, usize)],
    opts: FrameOptions,
) -> Result<Vec<TripletSample>> {
    let norm = volio::normalize_stack(s).stack;
    let frames: Vec<Vec<ModelFrame>> = (0..norm.depth())
        .map(|z| volio::to_model_frames(norm.slice(z), opts.policy, opts.model_size).map(|f| f.frames))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &(n1, n2, n3) in indices {
        let z = relative_z(n1, n2, n3);
        #[allow(clippy::needless_range_loop)]
        for tile in 0..frames[0].len() {
            out.push(TripletSample {
                i0: frames[n1 - 1][tile].clone(),
                ig: frames[n2 - 1][tile].clone(),
                i1: frames[n3 - 1][tile].clone(),
                z,
                source: TripletSource {
                    stack: stack_id.to_string(),
                    n1,
                    n2,
                    n3,
                    tile,
                },
            });
        }
    }
    Ok(out)
}

/// One triplet per interior slice, each at `z = 0.5`.
pub fn extract_fixed_triplets(s: &VolumeStack, stack_id: &str, opts: FrameOptions) -> Result<Extraction> {
    if s.depth() < 3 {
        let warning = format!("stack {stack_id} has {} slices; no triplets", s.depth());
        log::warn!("{warning}");
        return Ok(Extraction {
            triplets: Vec::new(),
            warning: Some(warning),
        });
    }
    Ok(Extraction {
        triplets: build(s, stack_id, &fixed_triplet_indices(s.depth()), opts)?,
        warning: None,
    })
}

/// All unique triplets inside a sliding window of `window` slices.
pub fn extract_windowed_triplets(
    s: &VolumeStack,
    stack_id: &str,
    window: usize,
    opts: FrameOptions,
) -> Result<Extraction> {
    if s.depth() < 3 {
        return Err(Error::invalid(format!("stack {stack_id} has fewer than 3 slices")));
    }
    let idx = windowed_triplet_indices(s.depth(), window);
    Ok(Extraction {
        triplets: build(s, stack_id, &idx, opts)?,
        warning: None,
    })
}

/// Constant plane holding a relative position.
#[derive(Debug, Clone, PartialEq)]
pub struct Dpm {
    pub data: Array2<f64>,
    pub z: f64,
}

pub fn make_dpm(z: f64, size: (usize, usize)) -> Result<Dpm> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::invalid(format!("relative position {z} outside [0,1]")));
    }
    Ok(Dpm {
        data: Array2::from_elem(size, z),
        z,
    })
}

/// One draw of the joint augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub gain: f64,
    pub offset: f64,
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub hflip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        gain: 1.0,
        offset: 0.0,
        quarter_turns: 0,
        hflip: false,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AugmentParams {
            gain: rng.random_range(0.9..=1.1),
            offset: rng.random_range(-0.05..=0.05),
            quarter_turns: rng.random_range(0..4),
            hflip: rng.random_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Quarter turn: pixel `(y, x)` moves to `(x, H-1-y)`.
pub fn rotate90(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(y, x)| a[[h - 1 - x, y]])
}

pub fn hflip(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| a[[y, w - 1 - x]])
}

/// Geometry only: flip first, then quarter turns.
pub fn apply_geometry(a: &Array2<f64>, p: &AugmentParams) -> Array2<f64> {
    let mut out = if p.hflip { hflip(a) } else { a.clone() };
    for _ in 0..p.quarter_turns {
        out = rotate90(&out);
    }
    out
}

/// Inverse of [`apply_geometry`].
pub fn invert_geometry(a: &Array2<f64>, p: &AugmentParams) -> Array2<f64> {
    let mut out = a.clone();
    for _ in 0..(4 - p.quarter_turns % 4) % 4 {
        out = rotate90(&out);
    }
    if p.hflip {
        out = hflip(&out);
    }
    out
}

fn transform_frame(f: &ModelFrame, p: &AugmentParams) -> ModelFrame {
    let mut d = apply_geometry(f.data(), p);
    if p.gain != 1.0 || p.offset != 0.0 {
        d.mapv_inplace(|v| v * p.gain + p.offset);
    }
    ModelFrame::clamped(d, f.native_height, f.native_width)
}

/// Applies the same transform to all three frames.
pub fn augment_with(t: &TripletSample, p: &AugmentParams) -> TripletSample {
    TripletSample {
        i0: transform_frame(&t.i0, p),
        ig: transform_frame(&t.ig, p),
        i1: transform_frame(&t.i1, p),
        z: t.z,
        source: t.source.clone(),
    }
}

/// Deterministic random augmentation.
pub fn augment(t: &TripletSample, seed: u64) -> TripletSample {
    augment_with(t, &AugmentParams::sample(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletMode {
    Fixed,
    Windowed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub mode: TripletMode,
}

/// TOML list of training stacks:
///
/// ```toml
/// [[stacks]]
/// path = "a.tif"
/// mode = "fixed"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_window")]
    pub window: usize,
    pub stacks: Vec<ManifestEntry>,
}

fn default_window() -> usize {
    7
}

impl DatasetManifest {
    /// Parses the manifest; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for e in &mut m.stacks {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DatasetManifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Triplet count per stack without building frames.
    pub fn dry_run(&self) -> Result<Vec<(PathBuf, usize)>> {
        self.stacks
            .iter()
            .map(|e| {
                let depth = volio::load_stack(&e.path)?.depth();
                let n = match e.mode {
                    TripletMode::Fixed => fixed_triplet_indices(depth).len(),
                    TripletMode::Windowed => windowed_triplet_indices(depth, self.window).len(),
                };
                Ok((e.path.clone(), n))
            })
            .collect()
    }

    /// Loads every stack and extracts its triplets, in manifest order.
    pub fn build(&self, opts: FrameOptions) -> Result<Vec<TripletSample>> {
        let per_stack: Vec<Vec<TripletSample>> = self
            .stacks
            .par_iter()
            .map(|e| {
                let s = volio::load_stack(&e.path)?;
                let id = e.path.display().to_string();
                let ex = match e.mode {
                    TripletMode::Fixed => extract_fixed_triplets(&s, &id, opts)?,
                    TripletMode::Windowed => extract_windowed_triplets(&s, &id, self.window, opts)?,
                };
                Ok(ex.triplets)
            })
            .collect::<Result<_>>()?;
        Ok(per_stack.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::BitDepth;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn stack(depth: usize) -> VolumeStack {
        let v = Array3::from_shape_fn((depth, 32, 32), |(z, y, x)| ((z * 13 + y * 3 + x) % 256) as f64);
        VolumeStack::new(v, BitDepth::Eight).unwrap()
    }

    fn opts() -> FrameOptions {
        FrameOptions {
            policy: FramePolicy::Resize,
            model_size: 32,
        }
    }

    #[test]
    fn fixed_counts() {
        let ex = extract_fixed_triplets(&stack(36), "s", opts()).unwrap();
        assert_eq!(ex.triplets.len(), 34);
        assert!(ex.triplets.iter().all(|t| t.z == 0.5 && t.source.n3 == t.source.n1 + 2));
        let ex = extract_fixed_triplets(&stack(3), "s", opts()).unwrap();
        let s = &ex.triplets[0].source;
        assert_eq!((ex.triplets.len(), s.n1, s.n2, s.n3), (1, 1, 2, 3));
        let ex = extract_fixed_triplets(&stack(2), "s", opts()).unwrap();
        assert!(ex.triplets.is_empty() && ex.warning.is_some());
    }

    #[test]
    fn fixed_frames_are_the_right_slices() {
        let s = stack(5);
        let ex = extract_fixed_triplets(&s, "s", opts()).unwrap();
        let norm = volio::normalize_stack(&s).stack;
        let t = &ex.triplets[1];
        assert_eq!(t.i0.data(), &norm.slice(1).to_owned());
        assert_eq!(t.ig.data(), &norm.slice(2).to_owned());
        assert_eq!(t.i1.data(), &norm.slice(3).to_owned());
    }

    /// Brute-force oracle: every triple, kept if some window contains it.
    fn window_oracle(n: usize, window: usize) -> usize {
        let mut count = 0;
        for a in 1..=n {
            for b in a + 1..=n {
                for c in b + 1..=n {
                    if (window.min(n)..=n).any(|t| a + window >= t && c <= t) {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn windowed_counts() {
        assert_eq!(windowed_triplet_indices(9, 7).len(), window_oracle(9, 7));
        assert_eq!(windowed_triplet_indices(9, 7).len(), 77);
        assert_eq!(windowed_triplet_indices(9, 8).len(), 84);
        assert_eq!(windowed_triplet_indices(3, 7), vec![(1, 2, 3)]);
        assert_eq!(windowed_triplet_indices(7, 7).len(), 35);
        assert_eq!(relative_z(1, 3, 9), 0.25);
        let ex = extract_windowed_triplets(&stack(3), "s", 7, opts()).unwrap();
        assert_eq!(ex.triplets[0].z, 0.5);
    }

    #[test]
    fn dpm() {
        let d = make_dpm(0.25, (256, 256)).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.25));
        assert!(make_dpm(0.0, (4, 4)).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(make_dpm(1.5, (4, 4)).is_err());
        assert!(make_dpm(-0.1, (4, 4)).is_err());
    }

    #[test]
    fn rotation_index_map() {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let r = rotate90(&a);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(r[[x, 3 - y]], a[[y, x]]);
            }
        }
    }

    #[test]
    fn identity_and_flip_involution() {
        let t = &extract_fixed_triplets(&stack(3), "s", opts()).unwrap().triplets[0];
        let same = augment_with(t, &AugmentParams::IDENTITY);
        assert_eq!(same.ig.data(), t.ig.data());
        let flip = AugmentParams {
            hflip: true,
            ..AugmentParams::IDENTITY
        };
        let twice = augment_with(&augment_with(t, &flip), &flip);
        assert_eq!(twice.i0.data(), t.i0.data());
        assert_eq!(twice.i1.data(), t.i1.data());
    }

    #[test]
    fn augmentation_is_deterministic_and_joint() {
        let t = &extract_fixed_triplets(&stack(3), "s", opts()).unwrap().triplets[0];
        let a = augment(t, 42);
        let b = augment(t, 42);
        assert_eq!(a.i0.data(), b.i0.data());
        let p = AugmentParams::sample(42);
        let geo = AugmentParams {
            gain: 1.0,
            offset: 0.0,
            ..p
        };
        for (src, out) in [(&t.i0, &a.i0), (&t.ig, &a.ig), (&t.i1, &a.i1)] {
            let expect = apply_geometry(src.data(), &geo).mapv(|v| (v * p.gain + p.offset).clamp(0.0, 1.0));
            assert_eq!(out.data(), &expect);
        }
        assert_eq!(a.z, t.z);
    }

    #[test]
    fn manifest_parse() {
        let m = DatasetManifest::parse(
            "[[stacks]]\npath = \"a.tif\"\nmode = \"fixed\"\n[[stacks]]\npath = \"/b.tif\"\nmode = \"windowed\"\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(m.window, 7);
        assert_eq!(m.stacks[0].path, PathBuf::from("/data/a.tif"));
        assert_eq!(m.stacks[1].mode, TripletMode::Windowed);
    }

    proptest! {
        #[test]
        fn windowed_triplets_are_unique_and_valid(n in 3usize..14, window in 2usize..10) {
            let idx = windowed_triplet_indices(n, window);
            let set: BTreeSet<_> = idx.iter().collect();
            prop_assert_eq!(set.len(), idx.len());
            prop_assert_eq!(idx.len(), window_oracle(n, window));
            for &(a, b, c) in &idx {
                prop_assert!(1 <= a && a < b && b < c && c <= n);
                let z = relative_z(a, b, c);
                prop_assert!(z > 0.0 && z < 1.0);
            }
        }

        #[test]
        fn geometry_inverts(seed in any::<u64>()) {
            let p = AugmentParams::sample(seed);
            let a = Array2::from_shape_fn((6, 6), |(y, x)| (y * 6 + x) as f64);
            prop_assert_eq!(invert_geometry(&apply_geometry(&a, &p), &p), a);
        }
    }
}
