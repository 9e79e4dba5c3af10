//! The generator: three coarse-to-fine student blocks estimating the two
//! intermediate flows and a fusion mask, plus a teacher block that also sees
//! the ground-truth slice.
//!
//! Images are `[N, 1, H, W]` tensors in `[0, 1]`. Flows are `[N, 4, H, W]`:
//! channels 0–1 hold `(dx, dy)` towards `I0`, channels 2–3 towards `I1`.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, resize_map, warp_tensor, ConvGeometry, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvTranspose2d, Module};
use crate::volio::ModelFrame;

const SLOPE: f64 = 0.1;
const BODY_DEPTH: usize = 8;
/// Downsampling factor of each student block.
pub const BLOCK_SCALES: [usize; 3] = [4, 2, 1];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    /// Midpoint only.
    #[default]
    Fixed,
    /// Arbitrary relative position supplied as an extra input plane.
    Plus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default)]
    pub mode: InterpMode,
    pub model_size: usize,
    /// Feature width of the three student blocks.
    pub widths: [usize; 3],
    pub teacher_width: usize,
    /// Whether the teacher's reconstruction loss also trains the shared
    /// student blocks.
    pub teacher_grads_into_students: bool,
    /// Start every block head at zero, so an untrained model blends the two
    /// inputs equally without displacement.
    #[serde(default)]
    pub zero_init_heads: bool,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Full-size model.
    pub fn paper(mode: InterpMode) -> Self {
        GeneratorConfig {
            mode,
            model_size: 256,
            widths: [302, 188, 112],
            teacher_width: 208,
            teacher_grads_into_students: true,
            zero_init_heads: false,
            seed: 0,
        }
    }

    /// A few-thousand-parameter model for tests and probes.
    pub fn tiny(mode: InterpMode, model_size: usize) -> Self {
        GeneratorConfig {
            mode,
            model_size,
            widths: [16, 16, 16],
            teacher_width: 16,
            teacher_grads_into_students: true,
            zero_init_heads: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_size < 32 || !self.model_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "model_size {} must be a multiple of 16 and at least 32",
                self.model_size
            )));
        }
        if self.widths.iter().chain([&self.teacher_width]).any(|&w| w < 2 || w % 2 != 0) {
            return Err(Error::Config("block widths must be even and at least 2".into()));
        }
        Ok(())
    }
}

/// One flow-estimation block: two stride-2 convolutions, a residual body
/// and a transposed-convolution head producing 4 flow and 1 mask channel.
#[derive(Clone)]
pub struct FlowBlock {
    pub scale: usize,
    pub down: [Conv2d; 2],
    pub body: Vec<Conv2d>,
    pub head: ConvTranspose2d,
}

impl FlowBlock {
    pub fn new(c_in: usize, width: usize, scale: usize, rng: &mut ChaCha8Rng) -> Self {
        let s2 = ConvGeometry::new(3, 2, 1);
        let s1 = ConvGeometry::new(3, 1, 1);
        FlowBlock {
            scale,
            down: [
                Conv2d::new(c_in, width / 2, s2, rng),
                Conv2d::new(width / 2, width, s2, rng),
            ],
            body: (0..BODY_DEPTH).map(|_| Conv2d::new(width, width, s1, rng)).collect(),
            head: ConvTranspose2d::new(width, 5, ConvGeometry::new(4, 2, 1), rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.down[0].weight.shape()[1]
    }

    /// `x` at full resolution, `flow` optional full-resolution flow; returns
    /// the full-resolution flow increment `[N,4,H,W]` and mask-logit
    /// increment `[N,1,H,W]`.
    pub fn forward(&self, x: &Var, flow: Option<&Var>) -> (Var, Var) {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let s = self.scale;
        let (hs, ws) = (h / s, w / s);
        let mut inp = if s > 1 { x.separable(&resize_map(h, w, hs, ws)) } else { x.clone() };
        if let Some(f) = flow {
            let f = if s > 1 {
                f.separable(&resize_map(h, w, hs, ws)).scale(1.0 / s as f64)
            } else {
                f.clone()
            };
            inp = Var::concat_channels(&[&inp, &f]);
        }
        let mut y = self.down[0].forward(&inp).leaky_relu(SLOPE);
        y = self.down[1].forward(&y).leaky_relu(SLOPE);
        let mut b = y.clone();
        for conv in &self.body {
            b = conv.forward(&b).leaky_relu(SLOPE);
        }
        let y = b.add(&y);
        let out = self.head.forward(&y);
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        let out = out.separable(&resize_map(ho, wo, h, w));
        let up = (h / ho) as f64;
        (out.narrow_channels(0, 4).scale(up), out.narrow_channels(4, 1))
    }
}

impl Module for FlowBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        for (i, c) in self.down.iter().enumerate() {
            c.visit(&join(prefix, &format!("down{i}")), f);
        }
        for (i, c) in self.body.iter().enumerate() {
            c.visit(&join(prefix, &format!("body{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Var)) {
        for (i, c) in self.down.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
        for (i, c) in self.body.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("body{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Products of one block after warping.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// Accumulated flows `[N,4,H,W]`.
    pub flow: Var,
    pub mask_logit: Var,
    /// `sigmoid(mask_logit)`, in `[0,1]`.
    pub mask: Var,
    pub warped0: Var,
    pub warped1: Var,
}

impl BlockOutput {
    fn from_flow(i0: &Var, i1: &Var, flow: Var, mask_logit: Var) -> Self {
        let mask = mask_logit.sigmoid();
        let warped0 = i0.warp(&flow.narrow_channels(0, 2));
        let warped1 = i1.warp(&flow.narrow_channels(2, 2));
        BlockOutput {
            flow,
            mask_logit,
            mask,
            warped0,
            warped1,
        }
    }

    /// `M ⊙ W0 + (1 − M) ⊙ W1`.
    pub fn fused(&self) -> Var {
        self.warped0.lerp_with(&self.warped1, &self.mask)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub blocks: Vec<BlockOutput>,
    pub student: Var,
    pub teacher: Option<TeacherOutput>,
}

#[derive(Clone, Debug)]
pub struct TeacherOutput {
    pub block: BlockOutput,
    pub frame: Var,
}

/// Student blocks S0–S2 and teacher block T3. The teacher path reuses the
/// student blocks themselves.
#[derive(Clone)]
pub struct Generator {
    config: GeneratorConfig,
    pub students: Vec<FlowBlock>,
    pub teacher: FlowBlock,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s0_in = if config.mode == InterpMode::Plus { 3 } else { 2 };
        let students = vec![
            FlowBlock::new(s0_in, config.widths[0], BLOCK_SCALES[0], &mut rng),
            FlowBlock::new(9, config.widths[1], BLOCK_SCALES[1], &mut rng),
            FlowBlock::new(9, config.widths[2], BLOCK_SCALES[2], &mut rng),
        ];
        let mut teacher = FlowBlock::new(10, config.teacher_width, 1, &mut rng);
        let mut students = students;
        if config.zero_init_heads {
            for b in students.iter_mut().chain(std::iter::once(&mut teacher)) {
                b.head.weight = Var::param(Tensor::zeros(b.head.weight.value().raw_dim()));
                b.head.bias = Var::param(Tensor::zeros(b.head.bias.value().raw_dim()));
            }
        }
        Ok(Generator {
            config,
            students,
            teacher,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn mode(&self) -> InterpMode {
        self.config.mode
    }

    pub fn student_param_count(&self) -> usize {
        self.students.iter().map(|b| b.param_count()).sum()
    }

    fn check_frames(&self, x: &Var, what: &str) -> Result<()> {
        let m = self.config.model_size;
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != m || s[3] != m {
            return Err(Error::ShapeMismatch(format!("{what} is {s:?}, expected [N,1,{m},{m}]")));
        }
        Ok(())
    }

    /// Student pass, plus the teacher pass when `ig` is given.
    pub fn forward(&self, i0: &Var, i1: &Var, dpm: Option<&Var>, ig: Option<&Var>) -> Result<GeneratorOutput> {
        self.check_frames(i0, "I0")?;
        self.check_frames(i1, "I1")?;
        if i0.shape() != i1.shape() {
            return Err(Error::ShapeMismatch("I0 and I1 batch sizes differ".into()));
        }
        match (self.config.mode, dpm) {
            (InterpMode::Fixed, Some(_)) => {
                return Err(Error::ModeMismatch("relative-position plane given to a midpoint model".into()))
            }
            (InterpMode::Plus, None) => {
                return Err(Error::ModeMismatch("continuous model needs a relative-position plane".into()))
            }
            (_, Some(d)) if d.shape() != i0.shape() => {
                return Err(Error::ShapeMismatch(format!("DPM is {:?}", d.shape())));
            }
            _ => {}
        }
        if let Some(g) = ig {
            if g.shape() != i0.shape() {
                return Err(Error::ShapeMismatch(format!("ground truth is {:?}", g.shape())));
            }
        }

        let x0 = match dpm {
            Some(d) => Var::concat_channels(&[i0, i1, d]),
            None => Var::concat_channels(&[i0, i1]),
        };
        let (flow, logit) = self.students[0].forward(&x0, None);
        let mut blocks = vec![BlockOutput::from_flow(i0, i1, flow, logit)];
        for block in &self.students[1..] {
            let prev = blocks.last().unwrap();
            let x = Var::concat_channels(&[i0, i1, &prev.warped0, &prev.warped1, &prev.mask]);
            let (df, dm) = block.forward(&x, Some(&prev.flow));
            let next = BlockOutput::from_flow(i0, i1, prev.flow.add(&df), prev.mask_logit.add(&dm));
            blocks.push(next);
        }
        let student = blocks.last().unwrap().fused();

        let teacher = ig.map(|g| {
            let last = blocks.last().unwrap();
            let keep = |v: &Var| {
                if self.config.teacher_grads_into_students {
                    v.clone()
                } else {
                    v.detach()
                }
            };
            let (w0, w1, m, f, l) = (
                keep(&last.warped0),
                keep(&last.warped1),
                keep(&last.mask),
                keep(&last.flow),
                keep(&last.mask_logit),
            );
            let x = Var::concat_channels(&[i0, i1, &w0, &w1, &m, g]);
            let (df, dm) = self.teacher.forward(&x, Some(&f));
            let block = BlockOutput::from_flow(i0, i1, f.add(&df), l.add(&dm));
            let frame = block.fused();
            TeacherOutput { block, frame }
        });
        Ok(GeneratorOutput {
            blocks,
            student,
            teacher,
        })
    }

    /// Inference on batches of frame pairs; `zs` is required in plus mode
    /// and must be absent (or all 0.5) otherwise.
    pub fn predict(&self, i0: &[&Array2<f64>], i1: &[&Array2<f64>], zs: Option<&[f64]>) -> Result<Vec<Array2<f64>>> {
        let _g = autograd::no_grad();
        let a = Var::constant(stack_frames(i0)?);
        let b = Var::constant(stack_frames(i1)?);
        let dpm = match (self.config.mode, zs) {
            (InterpMode::Plus, Some(zs)) => Some(Var::constant(dpm_batch(zs, a.shape())?)),
            (InterpMode::Plus, None) => {
                return Err(Error::ModeMismatch("continuous model needs relative positions".into()))
            }
            (InterpMode::Fixed, Some(zs)) if zs.iter().any(|&z| z != 0.5) => {
                return Err(Error::ModeMismatch("midpoint model can only predict z = 0.5".into()))
            }
            (InterpMode::Fixed, _) => None,
        };
        let out = self.forward(&a, &b, dpm.as_ref(), None)?;
        Ok(unstack_frames(out.student.value()))
    }
}

impl Module for Generator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        for (i, b) in self.students.iter().enumerate() {
            b.visit(&join(prefix, &format!("s{i}")), f);
        }
        self.teacher.visit(&join(prefix, "t3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Var)) {
        for (i, b) in self.students.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("s{i}")), f);
        }
        self.teacher.visit_mut(&join(prefix, "t3"), f);
    }
}

/// `[N,1,H,W]` from N equally sized frames.
pub fn stack_frames(frames: &[&Array2<f64>]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::invalid("empty frame batch"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        if f.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!("frame {:?} in a batch of {:?}", f.dim(), (h, w))));
        }
        data.extend(f.iter().copied());
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[frames.len(), 1, h, w]), data).unwrap())
}

pub fn unstack_frames(t: &Tensor) -> Vec<Array2<f64>> {
    let (n, h, w) = (t.shape()[0], t.shape()[2], t.shape()[3]);
    (0..n)
        .map(|i| {
            t.index_axis(Axis(0), i)
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_shape_with_order((h, w))
                .unwrap()
        })
        .collect()
}

/// Constant planes `[N,1,H,W]` with one relative position per sample.
pub fn dpm_batch(zs: &[f64], shape: &[usize]) -> Result<Tensor> {
    if zs.len() != shape[0] {
        return Err(Error::ShapeMismatch(format!("{} positions for a batch of {}", zs.len(), shape[0])));
    }
    if let Some(z) = zs.iter().find(|z| !(0.0..=1.0).contains(*z)) {
        return Err(Error::invalid(format!("relative position {z} outside [0,1]")));
    }
    let mut t = ArrayD::zeros(IxDyn(shape));
    for (mut s, &z) in t.outer_iter_mut().zip(zs) {
        s.fill(z);
    }
    Ok(t)
}

/// Per-pixel displacement `(dx, dy)` stored as `[2, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Array3<f64>,
}

impl FlowField {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != 2 {
            return Err(Error::ShapeMismatch(format!("flow field is {:?}, expected [2,H,W]", data.dim())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite flow".into()));
        }
        Ok(FlowField { data })
    }

    pub fn constant(dx: f64, dy: f64, h: usize, w: usize) -> Self {
        let mut data = Array3::zeros((2, h, w));
        data.index_axis_mut(Axis(0), 0).fill(dx);
        data.index_axis_mut(Axis(0), 1).fill(dy);
        FlowField { data }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// Per-pixel blend weight in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMask {
    data: Array2<f64>,
}

impl FusionMask {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {v} outside [0,1]")));
        }
        Ok(FusionMask { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

/// Samples `img` at `p + F(p)` with border replication.
pub fn backward_warp(img: &ModelFrame, flow: &FlowField) -> Result<ModelFrame> {
    let (h, w) = img.data().dim();
    if flow.data.dim() != (2, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "flow {:?} for a {h}x{w} frame",
            flow.data.dim()
        )));
    }
    let x = img.data().clone().into_shape_with_order((1, 1, h, w)).unwrap().into_dyn();
    let f = flow.data.clone().into_shape_with_order((1, 2, h, w)).unwrap().into_dyn();
    let out = warp_tensor(&x, &f).into_shape_with_order((h, w)).unwrap();
    Ok(ModelFrame::clamped(
        out.into_dimensionality().unwrap(),
        img.native_height,
        img.native_width,
    ))
}

/// `M ⊙ W0 + (1 − M) ⊙ W1`.
pub fn fuse(w0: &ModelFrame, w1: &ModelFrame, m: &FusionMask) -> Result<ModelFrame> {
    if w0.data().dim() != w1.data().dim() || w0.data().dim() != m.data.dim() {
        return Err(Error::ShapeMismatch("fuse inputs differ in shape".into()));
    }
    let mut out = w0.data() * &m.data;
    out.zip_mut_with(&(w1.data() * &m.data.mapv(|v| 1.0 - v)), |a, b| *a += b);
    Ok(ModelFrame::clamped(out, w0.native_height, w0.native_width))
}

/// Parameter tensors of a module keyed by name, as plain arrays.
pub fn state_dict(m: &dyn Module) -> BTreeMap<String, Tensor> {
    m.named_params().into_iter().map(|(n, v)| (n, v.value().clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward, max_abs_diff};
    use rand::Rng;

    fn frame(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random::<f64>())
    }

    fn mf(a: Array2<f64>) -> ModelFrame {
        ModelFrame::new(a).unwrap()
    }

    #[test]
    fn paper_parameter_counts() {
        let g = Generator::new(GeneratorConfig::paper(InterpMode::Fixed)).unwrap();
        assert_eq!(g.student_param_count(), 10_709_300);
        assert_eq!(g.teacher.param_count(), 3_337_677);
        let p = Generator::new(GeneratorConfig::paper(InterpMode::Plus)).unwrap();
        assert_eq!(p.student_param_count() - g.student_param_count(), 1_359);
    }

    #[test]
    fn config_validation() {
        let mut c = GeneratorConfig::tiny(InterpMode::Fixed, 40);
        assert!(Generator::new(c.clone()).is_err());
        c.model_size = 16;
        assert!(Generator::new(c).is_err());
    }

    #[test]
    fn zero_flow_is_identity() {
        let a = mf(frame(1, 16));
        let out = backward_warp(&a, &FlowField::constant(0.0, 0.0, 16, 16)).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn integer_shift_recovers_original() {
        let orig = frame(2, 16);
        let shifted = Array2::from_shape_fn((16, 16), |(y, x)| orig[[y, x.saturating_sub(1)]]);
        let out = backward_warp(&mf(shifted), &FlowField::constant(1.0, 0.0, 16, 16)).unwrap();
        for y in 0..16 {
            for x in 0..15 {
                assert_eq!(out.data()[[y, x]], orig[[y, x]]);
            }
        }
    }

    #[test]
    fn half_pixel_on_ramp_is_neighbour_mean() {
        let ramp = Array2::from_shape_fn((8, 8), |(_, x)| x as f64 / 8.0);
        let out = backward_warp(&mf(ramp.clone()), &FlowField::constant(0.5, 0.0, 8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..7 {
                let expect = 0.5 * (ramp[[y, x]] + ramp[[y, x + 1]]);
                assert!((out.data()[[y, x]] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn warp_shape_mismatch() {
        let a = mf(frame(1, 16));
        assert!(backward_warp(&a, &FlowField::constant(0.0, 0.0, 8, 8)).is_err());
    }

    #[test]
    fn fuse_cases() {
        let c = |v| mf(Array2::from_elem((4, 4), v));
        let m = |v| FusionMask::new(Array2::from_elem((4, 4), v)).unwrap();
        assert_eq!(fuse(&c(0.2), &c(0.6), &m(1.0)).unwrap().data(), c(0.2).data());
        assert_eq!(fuse(&c(0.2), &c(0.6), &m(0.0)).unwrap().data(), c(0.6).data());
        let half = fuse(&c(0.2), &c(0.6), &m(0.5)).unwrap();
        assert!(half.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert!(FusionMask::new(Array2::from_elem((2, 2), 1.5)).is_err());
    }

    #[test]
    fn warp_flow_gradient_matches_finite_differences() {
        let n = 16;
        let img = Array2::from_shape_fn((n, n), |(y, x)| {
            0.5 + 0.3 * (x as f64 * 0.4).sin() * (y as f64 * 0.3).cos()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flow = ArrayD::from_shape_fn(IxDyn(&[1, 2, n, n]), |_| rng.random_range(-1.3..1.3));
        let x = Var::constant(img.into_shape_with_order((1, 1, n, n)).unwrap().into_dyn());
        let f = Var::param(flow.clone());
        let g = backward(&x.warp(&f).mean(), &[&f]).remove(0);
        let loss = |fl: &Tensor| warp_tensor(x.value(), fl).mean().unwrap();
        let eps = 1e-6;
        let mut num = ArrayD::zeros(flow.raw_dim());
        for i in 0..flow.len() {
            let mut p = flow.clone();
            let mut m = flow.clone();
            p.as_slice_mut().unwrap()[i] += eps;
            m.as_slice_mut().unwrap()[i] -= eps;
            num.as_slice_mut().unwrap()[i] = (loss(&p) - loss(&m)) / (2.0 * eps);
        }
        let rel = max_abs_diff(&g, &num) / num.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn student_forward_contract() {
        let g = Generator::new(GeneratorConfig::tiny(InterpMode::Fixed, 32)).unwrap();
        let a = frame(4, 32);
        let b = frame(5, 32);
        let out = g.predict(&[&a, &a], &[&b, &b], None).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].iter().all(|v| (0.0..=1.0).contains(v)));
        let alone = g.predict(&[&a], &[&b], None).unwrap();
        assert!(max_abs_diff(&alone[0].clone().into_dyn(), &out[1].clone().into_dyn()) < 1e-5);
        assert!(g.predict(&[&a], &[&b], Some(&[0.3])).is_err());
    }

    #[test]
    fn plus_mode_requires_dpm_and_is_deterministic() {
        let g = Generator::new(GeneratorConfig::tiny(InterpMode::Plus, 32)).unwrap();
        let a = frame(6, 32);
        let b = frame(7, 32);
        assert!(g.predict(&[&a], &[&b], None).is_err());
        let x = g.predict(&[&a], &[&b], Some(&[0.5])).unwrap();
        let y = g.predict(&[&a], &[&b], Some(&[0.5])).unwrap();
        assert_eq!(x, y);
        let fixed = Generator::new(GeneratorConfig::tiny(InterpMode::Fixed, 32)).unwrap();
        let i0 = Var::constant(stack_frames(&[&a]).unwrap());
        let dpm = Var::constant(dpm_batch(&[0.5], i0.shape()).unwrap());
        assert!(matches!(fixed.forward(&i0, &i0, Some(&dpm), None), Err(Error::ModeMismatch(_))));
    }

    #[test]
    fn teacher_shares_student_blocks() {
        let mut g = Generator::new(GeneratorConfig::tiny(InterpMode::Fixed, 32)).unwrap();
        let i0 = Var::constant(stack_frames(&[&frame(8, 32)]).unwrap());
        let i1 = Var::constant(stack_frames(&[&frame(9, 32)]).unwrap());
        let ig = Var::constant(stack_frames(&[&frame(10, 32)]).unwrap());
        let before = g.forward(&i0, &i1, None, Some(&ig)).unwrap();
        let t = before.teacher.as_ref().unwrap();
        assert_eq!(t.block.flow.shape(), &[1, 4, 32, 32]);
        assert!(t.frame.value().iter().all(|v| (0.0..=1.0).contains(v)));
        let w = g.students[1].body[0].weight.value() * 1.5;
        g.students[1].body[0].weight = Var::param(w);
        let after = g.forward(&i0, &i1, None, Some(&ig)).unwrap();
        assert!(max_abs_diff(before.student.value(), after.student.value()) > 0.0);
        assert!(max_abs_diff(t.frame.value(), after.teacher.unwrap().frame.value()) > 0.0);
    }

    #[test]
    fn fused_output_is_convex() {
        let g = Generator::new(GeneratorConfig::tiny(InterpMode::Fixed, 32)).unwrap();
        let i0 = Var::constant(stack_frames(&[&frame(11, 32)]).unwrap());
        let i1 = Var::constant(stack_frames(&[&frame(12, 32)]).unwrap());
        let out = g.forward(&i0, &i1, None, None).unwrap();
        let last = out.blocks.last().unwrap();
        for ((s, a), b) in out.student.value().iter().zip(last.warped0.value()).zip(last.warped1.value()) {
            assert!(*s >= a.min(*b) - 1e-12 && *s <= a.max(*b) + 1e-12);
        }
    }
}
