//! Reconstruction, distillation and adversarial losses.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Separable, Var};
use crate::error::{Error, Result};
use crate::flownet::GeneratorOutput;

/// Number of pyramid levels, the last being the low-pass residual.
pub const LAP_LEVELS: usize = 5;
const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub distill: f64,
    pub adv: f64,
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            distill: 0.01,
            adv: 0.001,
            gp: 10.0,
        }
    }
}

impl LossWeights {
    /// Reconstruction and distillation only.
    pub fn direct() -> Self {
        LossWeights {
            adv: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.distill, self.adv, self.gp].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Index into `0..n` after mirror reflection without repeating the edge.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// `n x n` Gaussian blur with reflective borders.
fn blur_matrix(n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    for o in 0..n {
        for (k, &w) in KERNEL.iter().enumerate() {
            m[[o, reflect(o as isize + k as isize - 2, n)]] += w;
        }
    }
    m
}

/// Blur then keep even samples: `n/2 x n`.
fn down_matrix(n: usize) -> Array2<f64> {
    let b = blur_matrix(n);
    Array2::from_shape_fn((n / 2, n), |(o, i)| b[[2 * o, i]])
}

/// Zero insertion then blur with a doubled kernel: `n x n/2`.
fn up_matrix(n: usize) -> Array2<f64> {
    let b = blur_matrix(n);
    Array2::from_shape_fn((n, n / 2), |(o, i)| 2.0 * b[[o, 2 * i]])
}

/// Reflective padding from `n` to `m >= n` at the far edge: `m x n`.
fn pad_matrix(n: usize, m: usize) -> Array2<f64> {
    let mut p = Array2::zeros((m, n));
    for o in 0..m {
        p[[o, reflect(o as isize, n)]] = 1.0;
    }
    p
}

struct LapMaps {
    pad: Separable,
    down: Vec<Separable>,
    up: Vec<Separable>,
}

fn lap_maps(h: usize, w: usize) -> Arc<LapMaps> {
    type Cache = Mutex<HashMap<(usize, usize), Arc<LapMaps>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().unwrap().get(&(h, w)) {
        return m.clone();
    }
    let unit = 1 << LAP_LEVELS;
    let (hp, wp) = (h.div_ceil(unit) * unit, w.div_ceil(unit) * unit);
    let mut down = Vec::new();
    let mut up = Vec::new();
    let (mut ch, mut cw) = (hp, wp);
    for _ in 0..LAP_LEVELS - 1 {
        down.push(Separable::new(down_matrix(ch), down_matrix(cw)));
        up.push(Separable::new(up_matrix(ch), up_matrix(cw)));
        ch /= 2;
        cw /= 2;
    }
    let maps = Arc::new(LapMaps {
        pad: Separable::new(pad_matrix(h, hp), pad_matrix(w, wp)),
        down,
        up,
    });
    cache.lock().unwrap().insert((h, w), maps.clone());
    maps
}

/// Laplacian pyramid of a `[.., H, W]` tensor: four band-pass levels from
/// fine to coarse, then the low-pass residual.
pub fn lap_pyramid(x: &Var) -> Vec<Var> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let maps = lap_maps(h, w);
    let mut cur = if maps.pad.output_hw() == (h, w) { x.clone() } else { x.separable(&maps.pad) };
    let mut levels = Vec::with_capacity(LAP_LEVELS);
    for (d, u) in maps.down.iter().zip(&maps.up) {
        let low = cur.separable(d);
        levels.push(cur.sub(&low.separable(u)));
        cur = low;
    }
    levels.push(cur);
    levels
}

/// `Σ_k 2^k · mean|L_k(a) − L_k(b)|`.
pub fn lap_loss(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    // the pyramid is linear, so decompose the difference once
    let levels = lap_pyramid(&a.sub(b));
    let mut total: Option<Var> = None;
    for (k, l) in levels.iter().enumerate() {
        let term = l.abs().mean().scale((1u32 << k) as f64);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// [`lap_loss`] on plain frames.
pub fn lap_loss_frames(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let _g = crate::autograd::no_grad();
    let va = Var::constant(a.clone().into_dyn());
    let vb = Var::constant(b.clone().into_dyn());
    Ok(lap_loss(&va, &vb)?.item())
}

/// Per sample `sqrt(Σ_i ‖F^i_0 − T_0‖₂ + ‖F^i_1 − T_1‖₂)`, averaged over
/// the batch. Flows are `[N,4,H,W]`; the teacher flow is treated as fixed.
pub fn distill_loss(student_flows: &[&Var], teacher_flow: &Var) -> Result<Var> {
    let t = teacher_flow.detach();
    let mut inner: Option<Var> = None;
    for f in student_flows {
        if f.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "student flow {:?} vs teacher {:?}",
                f.shape(),
                t.shape()
            )));
        }
        let d = f.sub(&t);
        let term = d
            .narrow_channels(0, 2)
            .norm_per_sample()
            .add(&d.narrow_channels(2, 2).norm_per_sample());
        inner = Some(match inner {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    let inner = inner.ok_or_else(|| Error::invalid("no student flows"))?;
    Ok(inner.sqrt().mean())
}

/// Scalar terms of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub rec_student: f64,
    pub rec_teacher: f64,
    pub distill: f64,
    /// Mean critic score of student frames.
    pub adv_gen: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_wass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_gp: Option<f64>,
    pub total_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_d: Option<f64>,
}

/// `rec + rec_T + λ_d·dis − λ_adv·adv`.
pub fn assemble_generator_total(rec: f64, rec_teacher: f64, distill: f64, adv: f64, w: &LossWeights) -> f64 {
    rec + rec_teacher + w.distill * distill - w.adv * adv
}

/// Generator objective and its report. `critic_scores` are the critic's
/// scores of the student frames, required when `w.adv > 0`.
pub fn generator_loss(
    out: &GeneratorOutput,
    ig: &Var,
    critic_scores: Option<&Var>,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let teacher = out
        .teacher
        .as_ref()
        .ok_or_else(|| Error::invalid("generator loss needs the teacher pass"))?;
    let rec = lap_loss(&out.student, ig)?;
    let rec_t = lap_loss(&teacher.frame, ig)?;
    let flows: Vec<&Var> = out.blocks.iter().map(|b| &b.flow).collect();
    let dis = distill_loss(&flows, &teacher.block.flow)?;
    let mut total = rec.add(&rec_t).add(&dis.scale(w.distill));
    let mut adv_gen = 0.0;
    if w.adv > 0.0 {
        let s = critic_scores.ok_or_else(|| Error::invalid("adversarial weight set but no critic scores"))?;
        let adv = s.mean();
        adv_gen = adv.item();
        total = total.sub(&adv.scale(w.adv));
    } else if let Some(s) = critic_scores {
        adv_gen = s.value().mean().unwrap_or(0.0);
    }
    let report = LossReport {
        rec_student: rec.item(),
        rec_teacher: rec_t.item(),
        distill: dis.item(),
        adv_gen,
        total_g: total.item(),
        ..LossReport::default()
    };
    Ok((total, report))
}

/// `mean(fake) − mean(real) + λ_GP·gp`.
pub fn critic_loss(real_scores: &Var, fake_scores: &Var, gp: &Var, w: &LossWeights) -> Result<Var> {
    if real_scores.shape() != fake_scores.shape() {
        return Err(Error::ShapeMismatch("real and fake score batches differ".into()));
    }
    Ok(fake_scores.mean().sub(&real_scores.mean()).add(&gp.scale(w.gp)))
}
