//! Whole-stack inference: iterative z-doubling and continuous insertion.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flownet::{Generator, InterpMode};
use crate::volio::{self, FramePolicy, FrameSet, ModelFrame, VolumeStack};

/// Provenance keys written into output metadata.
pub const KEY_PASSES: &str = "zaugment.passes";
pub const KEY_POSITIONS: &str = "zaugment.positions";
pub const KEY_POLICY: &str = "zaugment.frame_policy";
pub const KEY_MODE: &str = "zaugment.mode";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub policy: FramePolicy,
    /// Frame pairs per forward pass.
    pub batch_size: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            policy: FramePolicy::Tile,
            batch_size: 8,
        }
    }
}

/// Either `k` midpoint doublings or one insertion at the given positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Passes(usize),
    Positions(Vec<f64>),
}

fn check_z(model: &Generator, z: f64) -> Result<()> {
    if !(z > 0.0 && z < 1.0) {
        return Err(Error::invalid(format!("relative position {z} outside (0,1)")));
    }
    if model.mode() == InterpMode::Fixed && z != 0.5 {
        return Err(Error::ModeMismatch(format!("midpoint model cannot predict z = {z}")));
    }
    Ok(())
}

/// The frame at relative position `z` between `i0` and `i1`.
pub fn interpolate_pair(model: &Generator, i0: &ModelFrame, i1: &ModelFrame, z: f64) -> Result<ModelFrame> {
    check_z(model, z)?;
    let zs = (model.mode() == InterpMode::Plus).then_some([z]);
    let out = model.predict(&[i0.data()], &[i1.data()], zs.as_ref().map(|z| &z[..]))?;
    let mut f = ModelFrame::new(out.into_iter().next().unwrap().mapv(|v| v.clamp(0.0, 1.0)))?;
    f.native_height = i0.native_height;
    f.native_width = i0.native_width;
    Ok(f)
}

/// Inserts one predicted slice per position in `zs` into every gap.
/// Original slices are copied through untouched; predictions are mapped
/// back to the stack's native intensity scale.
fn insert_slices(model: &Generator, s: &VolumeStack, zs: &[f64], opts: &InferenceOptions) -> Result<VolumeStack> {
    let n = s.depth();
    if n < 2 {
        return Err(Error::invalid(format!("stack has {n} slice(s); at least 2 needed")));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("inference batch size must be positive"));
    }
    for &z in zs {
        check_z(model, z)?;
    }
    let raw = s.denormalize();
    let norm = volio::normalize_stack(&raw).stack;
    let range = norm.norm_range().expect("normalized");
    let m = model.config().model_size;
    let sets: Vec<FrameSet> = (0..n)
        .into_par_iter()
        .map(|z| volio::to_model_frames(norm.slice(z), opts.policy, m))
        .collect::<Result<_>>()?;
    let layout = sets[0].layout.clone();
    let tiles = layout.offsets.len();
    let k = zs.len();

    let jobs: Vec<(usize, usize, usize)> = (0..n - 1)
        .flat_map(|gap| (0..k).flat_map(move |zi| (0..tiles).map(move |t| (gap, zi, t))))
        .collect();
    let preds: Vec<Array2<f64>> = jobs
        .par_chunks(opts.batch_size)
        .map(|chunk| {
            let i0: Vec<&Array2<f64>> = chunk.iter().map(|&(g, _, t)| sets[g].frames[t].data()).collect();
            let i1: Vec<&Array2<f64>> = chunk.iter().map(|&(g, _, t)| sets[g + 1].frames[t].data()).collect();
            let zv: Vec<f64> = chunk.iter().map(|&(_, zi, _)| zs[zi]).collect();
            let zv = (model.mode() == InterpMode::Plus).then_some(zv);
            model.predict(&i0, &i1, zv.as_deref())
        })
        .collect::<Result<Vec<_>>>()?
        .concat();

    let (h, w) = (s.height(), s.width());
    let hi = s.bit_depth().max_value();
    let mut out = Array3::zeros((n + (n - 1) * k, h, w));
    for i in 0..n {
        out.index_axis_mut(Axis(0), i * (k + 1)).assign(&raw.slice(i));
    }
    for (j, frames) in preds.chunks(tiles).enumerate() {
        let (gap, zi) = (j / k, j % k);
        let plane = volio::from_model_frames(frames, &layout)?;
        let plane = plane.mapv(|v| range.denormalize(v.clamp(0.0, 1.0)).clamp(0.0, hi));
        out.index_axis_mut(Axis(0), gap * (k + 1) + 1 + zi).assign(&plane);
    }
    let mut result = VolumeStack::new(out, s.bit_depth())?;
    result.meta = s.meta.clone();
    let prov = &mut result.meta.provenance;
    prov.insert(KEY_POLICY.into(), serde_json::to_value(opts.policy)?.as_str().unwrap_or_default().into());
    prov.insert(KEY_MODE.into(), serde_json::to_value(model.mode())?.as_str().unwrap_or_default().into());
    Ok(result)
}

/// One midpoint pass: `n` slices become `2n − 1`.
pub fn double_stack(model: &Generator, s: &VolumeStack) -> Result<VolumeStack> {
    double_stack_with(model, s, &InferenceOptions::default())
}

pub fn double_stack_with(model: &Generator, s: &VolumeStack, opts: &InferenceOptions) -> Result<VolumeStack> {
    let mut out = insert_slices(model, s, &[0.5], opts)?;
    if let Some(sp) = out.meta.spacing.as_mut() {
        sp[2] /= 2.0;
    }
    let prev: usize = s.meta.provenance.get(KEY_PASSES).and_then(|p| p.parse().ok()).unwrap_or(0);
    out.meta.provenance.insert(KEY_PASSES.into(), (prev + 1).to_string());
    Ok(out)
}

/// Inserts a slice at every position of `zs` (strictly ascending, inside
/// `(0,1)`) into each gap: `n + (n − 1)·|zs|` slices.
pub fn upsample_continuous(model: &Generator, s: &VolumeStack, zs: &[f64]) -> Result<VolumeStack> {
    upsample_continuous_with(model, s, zs, &InferenceOptions::default())
}

pub fn upsample_continuous_with(
    model: &Generator,
    s: &VolumeStack,
    zs: &[f64],
    opts: &InferenceOptions,
) -> Result<VolumeStack> {
    if model.mode() != InterpMode::Plus {
        return Err(Error::ModeMismatch("continuous insertion needs a plus-mode model".into()));
    }
    if zs.is_empty() {
        return Err(Error::invalid("no relative positions given"));
    }
    if zs.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::invalid(format!("positions {zs:?} are not strictly ascending")));
    }
    let mut out = insert_slices(model, s, zs, opts)?;
    let k = zs.len();
    let uniform = zs
        .iter()
        .enumerate()
        .all(|(i, &z)| (z - (i + 1) as f64 / (k + 1) as f64).abs() < 1e-9);
    if uniform {
        if let Some(sp) = out.meta.spacing.as_mut() {
            sp[2] /= (k + 1) as f64;
        }
    } else if out.meta.spacing.is_some() {
        log::warn!("positions {zs:?} are not evenly spaced; z spacing left unchanged");
    }
    let list: Vec<String> = zs.iter().map(|z| z.to_string()).collect();
    out.meta.provenance.insert(KEY_POSITIONS.into(), list.join(","));
    Ok(out)
}

/// Runs a schedule end to end.
pub fn augment_volume(
    model: &Generator,
    s: &VolumeStack,
    schedule: &Schedule,
    opts: &InferenceOptions,
) -> Result<VolumeStack> {
    match schedule {
        Schedule::Passes(0) => Err(Error::invalid("at least one pass is needed")),
        Schedule::Passes(k) => {
            let mut cur = double_stack_with(model, s, opts)?;
            for _ in 1..*k {
                cur = double_stack_with(model, &cur, opts)?;
            }
            Ok(cur)
        }
        Schedule::Positions(zs) => upsample_continuous_with(model, s, zs, opts),
    }
}

/// Depth after `passes` doublings of an `n`-slice stack.
pub fn doubled_depth(n: usize, passes: u32) -> usize {
    (n - 1) * 2usize.pow(passes) + 1
}
