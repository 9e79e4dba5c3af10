use ndarray::{ArrayD, Axis, IxDyn, Zip};

use super::{require_first_order, Backward, Tensor, Var};

struct Add;
impl Backward for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct Sub;
impl Backward for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone()), Some(g.scale(-1.0))]
    }
}

struct Mul;
impl Backward for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(&inputs[1])), Some(g.mul(&inputs[0]))]
    }
}

struct Scale(f64);
impl Backward for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.scale(self.0))]
    }
}

struct AddScalar;
impl Backward for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

/// Multiplication by a fixed tensor (masks, signs); twice differentiable.
struct MulConst(Tensor);
impl Backward for MulConst {
    fn name(&self) -> &'static str {
        "mul_const"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul_const(self.0.clone()))]
    }
}

struct Sigmoid;
impl Backward for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[Var], out: &Var, g: &Var) -> Vec<Option<Var>> {
        require_first_order("sigmoid");
        let d = out.value().mapv(|y| y * (1.0 - y));
        vec![Some(g.mul_const(d))]
    }
}

/// Square root with a zero subgradient at 0.
struct Sqrt;
impl Backward for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, _: &[Var], out: &Var, g: &Var) -> Vec<Option<Var>> {
        require_first_order("sqrt");
        let d = out.value().mapv(|y| if y > 0.0 { 0.5 / y } else { 0.0 });
        vec![Some(g.mul_const(d))]
    }
}

struct SumAll;
impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.expand_scalar(inputs[0].shape()))]
    }
}

struct ExpandScalar;
impl Backward for ExpandScalar {
    fn name(&self) -> &'static str {
        "expand_scalar"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.sum())]
    }
}

struct SumPerSample;
impl Backward for SumPerSample {
    fn name(&self) -> &'static str {
        "sum_per_sample"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_per_sample(inputs[0].shape()))]
    }
}

struct BroadcastPerSample;
impl Backward for BroadcastPerSample {
    fn name(&self) -> &'static str {
        "broadcast_per_sample"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.sum_per_sample())]
    }
}

struct MulPerSample;
impl Backward for MulPerSample {
    fn name(&self) -> &'static str {
        "mul_per_sample"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let (x, s) = (&inputs[0], &inputs[1]);
        vec![Some(g.mul_per_sample(s)), Some(g.mul(x).sum_per_sample())]
    }
}

struct Reshape;
impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.reshape(inputs[0].shape()))]
    }
}

struct Concat;
impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let mut start = 0;
        inputs
            .iter()
            .map(|inp| {
                let len = inp.shape()[1];
                let part = g.narrow_channels(start, len);
                start += len;
                Some(part)
            })
            .collect()
    }
}

struct Narrow {
    start: usize,
    total: usize,
}
impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow_channels"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.embed_channels(self.start, self.total))]
    }
}

struct Embed {
    start: usize,
    len: usize,
}
impl Backward for Embed {
    fn name(&self) -> &'static str {
        "embed_channels"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.narrow_channels(self.start, self.len))]
    }
}

struct AddChannelBias;
impl Backward for AddChannelBias {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone()), Some(g.sum_to_channels())]
    }
}

struct SumToChannels;
impl Backward for SumToChannels {
    fn name(&self) -> &'static str {
        "sum_to_channels"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_channels(inputs[0].shape()))]
    }
}

struct BroadcastChannels;
impl Backward for BroadcastChannels {
    fn name(&self) -> &'static str {
        "broadcast_channels"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.sum_to_channels())]
    }
}

fn same_shape(op: &str, a: &Var, b: &Var) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        same_shape("add", self, other);
        Var::from_op(self.value() + other.value(), vec![self.clone(), other.clone()], Add)
    }

    pub fn sub(&self, other: &Var) -> Var {
        same_shape("sub", self, other);
        Var::from_op(self.value() - other.value(), vec![self.clone(), other.clone()], Sub)
    }

    pub fn mul(&self, other: &Var) -> Var {
        same_shape("mul", self, other);
        Var::from_op(self.value() * other.value(), vec![self.clone(), other.clone()], Mul)
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::from_op(self.value() * k, vec![self.clone()], Scale(k))
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        Var::from_op(self.value() + k, vec![self.clone()], AddScalar)
    }

    /// `1 - self`.
    pub fn one_minus(&self) -> Var {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn mul_const(&self, k: Tensor) -> Var {
        assert_eq!(self.shape(), k.shape(), "mul_const: shape mismatch");
        let v = self.value() * &k;
        Var::from_op(v, vec![self.clone()], MulConst(k))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = self.value().mapv(|x| if x > 0.0 { 1.0 } else { slope });
        self.mul_const(mask)
    }

    pub fn abs(&self) -> Var {
        let sign = self.value().mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
        self.mul_const(sign)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Var::from_op(v, vec![self.clone()], Sigmoid)
    }

    pub fn sqrt(&self) -> Var {
        let v = self.value().mapv(|x| x.max(0.0).sqrt());
        Var::from_op(v, vec![self.clone()], Sqrt)
    }

    pub fn sum(&self) -> Var {
        let s = self.value().sum();
        Var::from_op(ArrayD::from_elem(IxDyn(&[]), s), vec![self.clone()], SumAll)
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub(crate) fn expand_scalar(&self, shape: &[usize]) -> Var {
        let v = ArrayD::from_elem(IxDyn(shape), self.item());
        Var::from_op(v, vec![self.clone()], ExpandScalar)
    }

    /// `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Var {
        let n = self.shape()[0];
        let flat = self.value().view().into_shape_with_order((n, self.value().len() / n.max(1))).unwrap();
        let v = flat.sum_axis(Axis(1)).into_dyn();
        Var::from_op(v, vec![self.clone()], SumPerSample)
    }

    fn broadcast_per_sample(&self, shape: &[usize]) -> Var {
        let n = shape[0];
        let inner: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(n * inner);
        for &s in self.value().iter() {
            out.extend(std::iter::repeat_n(s, inner));
        }
        let v = ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        Var::from_op(v, vec![self.clone()], BroadcastPerSample)
    }

    /// Multiplies each sample of `[N, ...]` by the matching entry of `[N]`.
    pub fn mul_per_sample(&self, s: &Var) -> Var {
        let n = self.shape()[0];
        assert_eq!(s.shape(), &[n], "mul_per_sample: scale shape");
        let mut v = self.value().clone();
        for (mut sample, &k) in v.outer_iter_mut().zip(s.value().iter()) {
            sample *= k;
        }
        Var::from_op(v, vec![self.clone(), s.clone()], MulPerSample)
    }

    /// Per-sample Euclidean norm of `[N, ...]`, zero subgradient at 0.
    pub fn norm_per_sample(&self) -> Var {
        self.square().sum_per_sample().sqrt()
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        Var::from_op(v, vec![self.clone()], Reshape)
    }

    /// Concatenates `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_channels: shape mismatch");
        Var::from_op(v, parts.iter().map(|p| (*p).clone()).collect(), Concat)
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Var {
        let total = self.shape()[1];
        assert!(start + len <= total, "narrow_channels out of range");
        let v = self
            .value()
            .slice_axis(Axis(1), (start..start + len).into())
            .to_owned();
        Var::from_op(v, vec![self.clone()], Narrow { start, total })
    }

    fn embed_channels(&self, start: usize, total: usize) -> Var {
        let len = self.shape()[1];
        let mut shape = self.shape().to_vec();
        shape[1] = total;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(1), (start..start + len).into())
            .assign(self.value());
        Var::from_op(v, vec![self.clone()], Embed { start, len })
    }

    /// Adds a `[C]` bias to every position of a `[N, C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Var) -> Var {
        let c = self.shape()[1];
        assert_eq!(bias.shape(), &[c], "add_channel_bias: bias shape");
        let mut v = self.value().clone();
        for mut sample in v.outer_iter_mut() {
            for (mut ch, &b) in sample.outer_iter_mut().zip(bias.value().iter()) {
                ch += b;
            }
        }
        Var::from_op(v, vec![self.clone(), bias.clone()], AddChannelBias)
    }

    fn sum_to_channels(&self) -> Var {
        let c = self.shape()[1];
        let mut out = vec![0.0; c];
        for sample in self.value().outer_iter() {
            for (o, ch) in out.iter_mut().zip(sample.outer_iter()) {
                *o += ch.sum();
            }
        }
        Var::from_op(ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap(), vec![self.clone()], SumToChannels)
    }

    fn broadcast_channels(&self, shape: &[usize]) -> Var {
        let mut v = ArrayD::zeros(IxDyn(shape));
        for mut sample in v.outer_iter_mut() {
            for (mut ch, &b) in sample.outer_iter_mut().zip(self.value().iter()) {
                ch.fill(b);
            }
        }
        Var::from_op(v, vec![self.clone()], BroadcastChannels)
    }

    /// Elementwise `a * w + b * (1 - w)`.
    pub fn lerp_with(&self, other: &Var, weight: &Var) -> Var {
        self.mul(weight).add(&other.mul(&weight.one_minus()))
    }
}

/// Elementwise max of absolute differences; handy in tests.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut m: f64 = 0.0;
    Zip::from(a).and(b).for_each(|&x, &y| m = m.max((x - y).abs()));
    m
}
