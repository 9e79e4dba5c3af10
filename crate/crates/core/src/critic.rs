//! Wasserstein critic over single frames and its gradient penalty.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, ConvGeometry, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, join, Conv2d, Linear, Module};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub input_size: usize,
    /// Output channels of each stride-2 convolution.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl CriticConfig {
    pub fn paper() -> Self {
        CriticConfig {
            input_size: 256,
            channels: vec![64, 128, 256, 512, 512, 512],
            seed: 1,
        }
    }

    pub fn tiny(input_size: usize) -> Self {
        CriticConfig {
            input_size,
            channels: vec![8, 16, 16, 16],
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("critic needs at least one convolution".into()));
        }
        let mut s = self.input_size;
        for _ in &self.channels {
            if s < 2 {
                return Err(Error::Config(format!(
                    "{} stride-2 layers do not fit a {} input",
                    self.channels.len(),
                    self.input_size
                )));
            }
            s /= 2;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Critic {
    config: CriticConfig,
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
}

impl Critic {
    pub fn new(config: CriticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let geo = ConvGeometry::new(4, 2, 1);
        let mut c_in = 1;
        let mut convs = Vec::new();
        for &c in &config.channels {
            convs.push(Conv2d::new(c_in, c, geo, &mut rng));
            c_in = c;
        }
        let fc = Linear::new(c_in, 1, &mut rng);
        Ok(Critic { config, convs, fc })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    /// `[N,1,S,S] -> [N]`; differentiable in both frames and weights, to
    /// any order.
    pub fn forward(&self, x: &Var) -> Var {
        let mut y = x.clone();
        for c in &self.convs {
            y = c.forward(&y).leaky_relu(SLOPE);
        }
        let n = x.shape()[0];
        self.fc.forward(&global_avg_pool(&y)).reshape(&[n])
    }

    /// Scores after checking the frame geometry.
    pub fn score(&self, x: &Var) -> Result<Var> {
        let s = self.config.input_size;
        let sh = x.shape();
        if sh.len() != 4 || sh[1] != 1 || sh[2] != s || sh[3] != s {
            return Err(Error::ShapeMismatch(format!("critic input {sh:?}, expected [N,1,{s},{s}]")));
        }
        Ok(self.forward(x))
    }
}

impl Module for Critic {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Var)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// One interpolation weight per sample.
pub fn sample_alphas(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// `α·real + (1−α)·fake`, per sample.
pub fn interpolate(real: &Tensor, fake: &Tensor, alphas: &[f64]) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch(format!(
            "real {:?} vs fake {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    if alphas.len() != real.shape()[0] {
        return Err(Error::ShapeMismatch("one weight per sample expected".into()));
    }
    let mut out = ArrayD::zeros(IxDyn(real.shape()));
    for (((mut o, r), f), &a) in out.outer_iter_mut().zip(real.outer_iter()).zip(fake.outer_iter()).zip(alphas) {
        o.zip_mut_with(&r, |o, &r| *o = a * r);
        o.zip_mut_with(&f, |o, &f| *o += (1.0 - a) * f);
    }
    Ok(out)
}

/// `mean_n (‖∇ₓ D(x̃_n)‖₂ − 1)²` at the given interpolation weights.
/// The result is differentiable w.r.t. whatever `score` closes over.
pub fn gradient_penalty_at<F>(score: F, real: &Tensor, fake: &Tensor, alphas: &[f64]) -> Result<Var>
where
    F: Fn(&Var) -> Var,
{
    let x = Var::param(interpolate(real, fake, alphas)?);
    // samples are scored independently, so one gradient of the sum serves all
    let total = score(&x).sum();
    let g = autograd::grad(&total, &[&x], true).remove(0);
    Ok(g.norm_per_sample().add_scalar(-1.0).square().mean())
}

/// Gradient penalty with weights drawn from `seed`.
pub fn gradient_penalty<F>(score: F, real: &Tensor, fake: &Tensor, seed: u64) -> Result<Var>
where
    F: Fn(&Var) -> Var,
{
    gradient_penalty_at(score, real, fake, &sample_alphas(real.shape()[0], seed))
}
