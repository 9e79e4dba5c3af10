//! Layers and parameter bookkeeping on top of [`crate::autograd`].

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autograd::{ConvGeometry, Tensor, Var};

/// Anything that owns named trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Var));

    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, v| out.push((name, v.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.value().len());
        n
    }

    /// Replaces every parameter present in `values`. Unknown or missing
    /// names and shape changes are reported as an error string.
    fn load_params(&mut self, values: &BTreeMap<String, Tensor>) -> Result<(), String> {
        let mut err = None;
        let mut seen = 0;
        self.visit_mut("", &mut |name, v| match values.get(&name) {
            Some(t) if t.shape() == v.shape() => {
                *v = Var::param(t.clone());
                seen += 1;
            }
            Some(t) => {
                err.get_or_insert(format!("{name}: shape {:?} != {:?}", t.shape(), v.shape()));
            }
            None => {
                err.get_or_insert(format!("missing tensor {name}"));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != values.len() {
            return Err(format!("{} unexpected tensors", values.len() - seen));
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let k = geometry.kernel;
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Var::param(uniform(&[c_out, c_in, k, k], bound, rng)),
            bias: Var::param(uniform(&[c_out], bound, rng)),
            geometry,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.conv2d(&self.weight, self.geometry).add_channel_bias(&self.bias)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Var)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution; weight is `[C_in, C_out, k, k]`.
#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    pub geometry: ConvGeometry,
}

impl ConvTranspose2d {
    pub fn new(c_in: usize, c_out: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let k = geometry.kernel;
        let bound = 1.0 / ((c_out * k * k) as f64).sqrt();
        ConvTranspose2d {
            weight: Var::param(uniform(&[c_in, c_out, k, k], bound, rng)),
            bias: Var::param(uniform(&[c_out], bound, rng)),
            geometry,
        }
    }

    pub fn output_len(&self, input: usize) -> usize {
        let g = self.geometry;
        (input - 1) * g.stride + g.kernel - 2 * g.padding
    }

    pub fn forward(&self, x: &Var) -> Var {
        let (h, w) = (self.output_len(x.shape()[2]), self.output_len(x.shape()[3]));
        Var::conv2d_data_adjoint(x, &self.weight, self.geometry, h, w).add_channel_bias(&self.bias)
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Var)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// `[N, in] -> [N, out]`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Var::param(uniform(&[d_in, d_out], bound, rng)),
            bias: Var::param(uniform(&[d_out], bound, rng)),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.matmul(&self.weight).add_channel_bias(&self.bias)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Var)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Global average pooling `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(x: &Var) -> Var {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ones = Var::constant(ArrayD::from_elem(IxDyn(&[h * w, 1]), 1.0 / (h * w) as f64));
    x.reshape(&[n * c, h * w]).matmul(&ones).reshape(&[n, c])
}

/// Gradients of `loss` w.r.t. every parameter of `module`, keyed by name.
pub fn param_grads(module: &dyn Module, loss: &Var) -> BTreeMap<String, Tensor> {
    let params = module.named_params();
    let refs: Vec<&Var> = params.iter().map(|(_, v)| v).collect();
    let grads = crate::autograd::backward(loss, &refs);
    params.into_iter().map(|(n, _)| n).zip(grads).collect()
}
