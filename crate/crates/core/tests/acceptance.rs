//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, then exits nonzero if any
//! failed.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{s, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use axsr_core::autograd::{backward, max_abs_diff, warp_tensor, Tensor, Var};
use axsr_core::critic::{gradient_penalty, gradient_penalty_at, Critic, CriticConfig};
use axsr_core::evalkit::{frechet_distance, frechet_from_stats, psnr_from_rmse};
use axsr_core::flownet::{state_dict, Generator, GeneratorConfig, InterpMode};
use axsr_core::nn::Module;
use axsr_core::objectives::{critic_loss, distill_loss, lap_loss, LossWeights};
use axsr_core::shapelab::{fibonacci_directions, fit_sh, power_spectrum, real_sh, roughness, sh_index, SurfacePointCloud, L_MAX};
use axsr_core::synth::{blob_stack, probe_stacks, BlobParams};
use axsr_core::trainer::{overfit_probe, TrainConfig, Trainer, PROBE_MAX_STEPS, PROBE_MAX_TRIPLETS};
use axsr_core::triplets::{extract_fixed_triplets, FrameOptions, TripletSample};
use axsr_core::volio::FramePolicy;
use axsr_core::zaugment::{double_stack, upsample_continuous};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}

// 1
fn psnr_identity() -> Check {
    let mut parts = Vec::new();
    for (rmse, paper) in [(16.68, 23.68), (19.15, 22.48)] {
        let p = psnr_from_rmse(rmse);
        ensure((p - paper).abs() <= 0.02, format!("rmse {rmse}: {p:.4} dB vs {paper}"))?;
        parts.push(format!("{rmse} -> {p:.2} dB"));
    }
    Ok(parts.join(", "))
}

// 2
fn slice_counts() -> Check {
    let fixed = Generator::new(GeneratorConfig::tiny(InterpMode::Fixed, 32)).map_err(e2s)?;
    let plus = Generator::new(GeneratorConfig::tiny(InterpMode::Plus, 32)).map_err(e2s)?;
    let mut chains = Vec::new();
    for (n, passes) in [(18, 3), (20, 2)] {
        let mut s = blob_stack(n, 32, &BlobParams::default(), n as u64).map_err(e2s)?;
        let mut depths = vec![s.depth()];
        for _ in 0..passes {
            s = double_stack(&fixed, &s).map_err(e2s)?;
            depths.push(s.depth());
        }
        chains.push(depths);
    }
    ensure(chains[0] == [18, 35, 69, 137], format!("{:?}", chains[0]))?;
    ensure(chains[1] == [20, 39, 77], format!("{:?}", chains[1]))?;
    let s = blob_stack(5, 32, &BlobParams::default(), 5).map_err(e2s)?;
    let up = upsample_continuous(&plus, &s, &[0.25, 0.5, 0.75]).map_err(e2s)?;
    ensure(up.depth() == 17, format!("5 -> {}", up.depth()))?;
    Ok(format!("{:?}, {:?}, 5 -> 17", chains[0], chains[1]))
}

const KERNEL: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

fn blur(x: &Array2<f64>, gain: f64) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(y, xx)| {
        let mut acc = 0.0;
        for (ky, a) in KERNEL.iter().enumerate() {
            for (kx, b) in KERNEL.iter().enumerate() {
                let yy = mirror(y as isize + ky as isize - 2, h);
                let xc = mirror(xx as isize + kx as isize - 2, w);
                acc += a * b / 256.0 * gain * x[[yy, xc]];
            }
        }
        acc
    })
}

fn pyramid(x: &Array2<f64>) -> Vec<Array2<f64>> {
    let mut cur = x.clone();
    let mut out = Vec::new();
    for _ in 0..4 {
        let down = blur(&cur, 1.0).slice(s![..;2, ..;2]).to_owned();
        let mut up = Array2::zeros(cur.dim());
        up.slice_mut(s![..;2, ..;2]).assign(&down);
        out.push(&cur - &blur(&up, 4.0));
        cur = down;
    }
    out.push(cur);
    out
}

fn lap_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    pyramid(a)
        .iter()
        .zip(pyramid(b).iter())
        .enumerate()
        .map(|(k, (x, y))| 2f64.powi(k as i32) * (x - y).mapv(f64::abs).mean().unwrap())
        .sum()
}

fn frame(t: &Tensor) -> Array2<f64> {
    let sh = t.shape();
    t.clone().into_shape_with_order((sh[sh.len() - 2], sh[sh.len() - 1])).unwrap()
}

// 3
fn loss_oracles() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let a = rand_tensor(&[1, 1, 32, 32], seed, 0.0, 1.0);
        let b = rand_tensor(&[1, 1, 32, 32], seed + 100, 0.0, 1.0);
        let got = lap_loss(&Var::constant(a.clone()), &Var::constant(b.clone())).map_err(e2s)?.item();
        worst = worst.max((got - lap_oracle(&frame(&a), &frame(&b))).abs());
    }
    let zero = ArrayD::zeros(IxDyn(&[1, 1, 32, 32]));
    let one = ArrayD::from_elem(IxDyn(&[1, 1, 32, 32]), 1.0);
    let got = lap_loss(&Var::constant(zero.clone()), &Var::constant(one.clone())).map_err(e2s)?.item();
    worst = worst.max((got - lap_oracle(&frame(&zero), &frame(&one))).abs());
    ensure(worst < 1e-6, format!("lap_loss off by {worst:e}"))?;

    let students: Vec<Tensor> = (0..3).map(|i| rand_tensor(&[2, 4, 16, 16], 10 + i, -2.0, 2.0)).collect();
    let teacher = rand_tensor(&[2, 4, 16, 16], 20, -2.0, 2.0);
    let vars: Vec<Var> = students.iter().cloned().map(Var::constant).collect();
    let refs: Vec<&Var> = vars.iter().collect();
    let got = distill_loss(&refs, &Var::constant(teacher.clone())).map_err(e2s)?.item();
    let mut expect = 0.0;
    for n in 0..2 {
        let mut inner = 0.0;
        for f in &students {
            for pair in [0..2, 2..4] {
                let mut sq = 0.0;
                for c in pair {
                    for y in 0..16 {
                        for x in 0..16 {
                            sq += (f[[n, c, y, x]] - teacher[[n, c, y, x]]).powi(2);
                        }
                    }
                }
                inner += sq.sqrt();
            }
        }
        expect += inner.sqrt() / 2.0;
    }
    ensure((got - expect).abs() < 1e-6, format!("distill {got} vs {expect}"))?;

    let t = ArrayD::zeros(IxDyn(&[1, 4, 2, 2]));
    let mut f1 = t.clone();
    f1.slice_mut(s![0, 0, .., ..]).fill(1.0);
    let z = Var::constant(t.clone());
    let hand = distill_loss(&[&Var::constant(f1), &z, &z], &Var::constant(t)).map_err(e2s)?.item();
    ensure(hand == 2f64.sqrt(), format!("hand case {hand}"))?;

    let w = LossWeights::default();
    let real: Vec<f64> = rand_tensor(&[9], 30, -3.0, 3.0).into_raw_vec_and_offset().0;
    let fake: Vec<f64> = rand_tensor(&[9], 31, -3.0, 3.0).into_raw_vec_and_offset().0;
    let rv = Var::constant(ArrayD::from_shape_vec(IxDyn(&[9]), real.clone()).unwrap());
    let fv = Var::constant(ArrayD::from_shape_vec(IxDyn(&[9]), fake.clone()).unwrap());
    let got = critic_loss(&rv, &fv, &Var::scalar(0.37), &w).map_err(e2s)?.item();
    let expect = fake.iter().sum::<f64>() / 9.0 - real.iter().sum::<f64>() / 9.0 + w.gp * 0.37;
    ensure((got - expect).abs() < 1e-6, format!("critic_loss {got} vs {expect}"))?;
    Ok(format!("lap max err {worst:.1e}, distill hand case = sqrt(2) exactly"))
}

fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    max_abs_diff(analytic, numeric) / scale
}

fn numeric_grad(x0: &Tensor, f: impl Fn(&Tensor) -> f64, eps: f64) -> Tensor {
    let mut g = ArrayD::zeros(x0.raw_dim());
    for i in 0..x0.len() {
        let mut p = x0.clone();
        let mut m = x0.clone();
        p.as_slice_mut().unwrap()[i] += eps;
        m.as_slice_mut().unwrap()[i] -= eps;
        g.as_slice_mut().unwrap()[i] = (f(&p) - f(&m)) / (2.0 * eps);
    }
    g
}

// 4
fn gradient_checks() -> Check {
    let n = 16;
    let img = Array2::from_shape_fn((n, n), |(y, x)| 0.5 + 0.3 * (x as f64 * 0.4).sin() * (y as f64 * 0.3).cos());
    let img = img.into_shape_with_order((1, 1, n, n)).unwrap().into_dyn();
    let flow = rand_tensor(&[1, 2, n, n], 3, -1.3, 1.3);
    let fv = Var::param(flow.clone());
    let g = backward(&Var::constant(img.clone()).warp(&fv).mean(), &[&fv]).remove(0);
    let num = numeric_grad(&flow, |f| warp_tensor(&img, f).mean().unwrap(), 1e-6);
    let warp_err = rel_err(&g, &num);
    ensure(warp_err < 1e-3, format!("warp relative error {warp_err:e}"))?;

    let b = Var::constant(rand_tensor(&[1, 1, n, n], 7, 0.0, 1.0));
    let a0 = rand_tensor(&[1, 1, n, n], 8, 0.0, 1.0);
    let av = Var::param(a0.clone());
    let g = backward(&lap_loss(&av, &b).unwrap(), &[&av]).remove(0);
    let num = numeric_grad(&a0, |a| lap_loss(&Var::constant(a.clone()), &b).unwrap().item(), 1e-6);
    let lap_err = rel_err(&g, &num);
    ensure(lap_err < 1e-3, format!("lap_loss relative error {lap_err:e}"))?;

    let critic = Critic::new(CriticConfig {
        input_size: n,
        channels: vec![3, 4],
        seed: 2,
    })
    .map_err(e2s)?;
    let real = rand_tensor(&[2, 1, n, n], 12, 0.0, 1.0);
    let fake = rand_tensor(&[2, 1, n, n], 13, 0.0, 1.0);
    let alphas = [0.3, 0.8];
    let (name, w) = critic.named_params().remove(0);
    let pen = |c: &Critic| gradient_penalty_at(|x| c.forward(x), &real, &fake, &alphas).unwrap();
    let analytic = backward(&pen(&critic), &[&w]).remove(0);
    let base = w.value().clone();
    let numeric = numeric_grad(&base, |p| pen(&critic_with(&critic, &name, p)).item(), 1e-5);
    let gp_err = rel_err(&analytic, &numeric);
    ensure(gp_err < 1e-3, format!("gradient penalty relative error {gp_err:e}"))?;
    Ok(format!("relative errors: warp {warp_err:.1e}, lap {lap_err:.1e}, gp {gp_err:.1e}"))
}

/// Copy of `base` with parameter `name` replaced.
fn critic_with(base: &Critic, name: &str, value: &Tensor) -> Critic {
    let mut c = Critic::new(base.config().clone()).unwrap();
    c.load_params(&state_dict(base)).unwrap();
    c.visit_mut("", &mut |n, v| {
        if n == name {
            *v = Var::param(value.clone());
        }
    });
    c
}

fn linear_critic(u: Tensor, k: f64) -> impl Fn(&Var) -> Var {
    move |x: &Var| {
        let n = x.shape()[0];
        let d = u.len();
        let w = Var::constant(u.clone().into_shape_with_order(IxDyn(&[d, 1])).unwrap());
        x.reshape(&[n, d]).matmul(&w).reshape(&[n]).scale(k)
    }
}

// 5
fn wgan_gp_cases() -> Check {
    let u = rand_tensor(&[64], 7, -0.5, 0.5);
    let u = &u / u.mapv(|v| v * v).sum().sqrt();
    let real = rand_tensor(&[4, 1, 8, 8], 4, 0.0, 1.0);
    let fake = rand_tensor(&[4, 1, 8, 8], 5, 0.0, 1.0);
    let p1 = gradient_penalty(linear_critic(u.clone(), 1.0), &real, &fake, 9).map_err(e2s)?.item();
    let p2 = gradient_penalty(linear_critic(u, 2.0), &real, &fake, 9).map_err(e2s)?.item();
    ensure(p1.abs() < 1e-6, format!("unit critic penalty {p1}"))?;
    ensure((p2 - 1.0).abs() < 1e-6, format!("doubled critic penalty {p2}"))?;
    Ok(format!("penalties {p1:.1e} and {p2:.9}"))
}

// 6
fn overfit() -> Check {
    let t = Instant::now();
    let stacks = probe_stacks(1).map_err(e2s)?;
    let r = overfit_probe(&TrainConfig::probe(1), &stacks, 160).map_err(e2s)?;
    ensure(r.triplets <= PROBE_MAX_TRIPLETS && r.steps <= PROBE_MAX_STEPS, format!("{} triplets, {} steps", r.triplets, r.steps))?;
    let summary = format!(
        "{} triplets, {} steps, ssim {:.4} vs bicubic {:.4} (margin {:+.4}), epoch losses {:?}, {:.0}s",
        r.triplets,
        r.steps,
        r.final_ssim,
        r.bicubic_ssim,
        r.margin(),
        r.epoch_rec.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        t.elapsed().as_secs_f64()
    );
    ensure(r.margin() >= 0.02, format!("margin too small: {summary}"))?;
    ensure(r.loss_monotone(), format!("loss not monotone: {summary}"))?;
    Ok(summary)
}

fn triplets(n_stacks: u64) -> Vec<TripletSample> {
    let opts = FrameOptions {
        policy: FramePolicy::Resize,
        model_size: 32,
    };
    (0..n_stacks)
        .flat_map(|k| {
            let s = blob_stack(5, 32, &BlobParams::default(), k).unwrap();
            extract_fixed_triplets(&s, &format!("s{k}"), opts).unwrap().triplets
        })
        .collect()
}

fn tiny_cfg(adv: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr: 1e-3,
        seed: 11,
        weights: LossWeights {
            adv,
            ..LossWeights::default()
        },
        ..TrainConfig::tiny(InterpMode::Fixed, 32)
    }
}

// 7
fn adversarial_switch() -> Check {
    let data = triplets(2);
    let batch: Vec<&TripletSample> = data.iter().take(4).collect();
    let run = |adv: f64| -> Result<_, String> {
        let mut t = Trainer::new(tiny_cfg(adv)).map_err(e2s)?;
        for _ in 0..10 {
            t.step(&batch, 1).map_err(e2s)?;
        }
        Ok((state_dict(&t.generator), t.critic_steps()))
    };
    let (with_adv, critic_steps) = run(0.001)?;
    let (without, no_critic_steps) = run(0.0)?;
    let diff = with_adv.iter().map(|(k, v)| max_abs_diff(v, &without[k])).fold(0.0, f64::max);
    ensure(diff > 1e-6, format!("max weight difference {diff:e}"))?;
    ensure(no_critic_steps == 0 && critic_steps == 10, format!("critic steps {critic_steps} / {no_critic_steps}"))?;
    Ok(format!("max weight difference after 10 steps {diff:.3e}"))
}

fn sphere_cloud(n: usize, r: impl Fn(f64, f64) -> f64) -> SurfacePointCloud {
    let pts = fibonacci_directions(n)
        .into_iter()
        .map(|d| {
            let theta = d[2].clamp(-1.0, 1.0).acos();
            let phi = d[1].atan2(d[0]);
            let rr = r(theta, phi);
            [rr * d[0], rr * d[1], rr * d[2]]
        })
        .collect();
    SurfacePointCloud::new(pts, 1).unwrap()
}

fn y30(theta: f64) -> f64 {
    (7.0 / (16.0 * PI)).sqrt() * (5.0 * theta.cos().powi(3) - 3.0 * theta.cos())
}

fn rotate(ax: f64, ay: f64, az: f64) -> impl Fn([f64; 3]) -> [f64; 3] {
    move |p| {
        let (s, c) = ax.sin_cos();
        let p = [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]];
        let (s, c) = ay.sin_cos();
        let p = [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]];
        let (s, c) = az.sin_cos();
        [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
    }
}

// 8
fn roughness_oracles() -> Check {
    let sphere = fit_sh(&sphere_cloud(2000, |_, _| 1.0), L_MAX).map_err(e2s)?;
    let ro_sphere = roughness(&sphere).map_err(e2s)?;
    ensure(ro_sphere < 1e-3, format!("sphere Ro {ro_sphere:e}"))?;

    let eps = 0.1;
    let r = |t: f64, _p: f64| 1.0 + eps * y30(t);
    // midpoint quadrature of ∫ R Y30 dΩ
    let (nt, np) = (400, 64);
    let mut quad = 0.0;
    for i in 0..nt {
        let t = (i as f64 + 0.5) * PI / nt as f64;
        for j in 0..np {
            let p = (j as f64 + 0.5) * 2.0 * PI / np as f64;
            quad += r(t, p) * real_sh(3, t, p)[sh_index(3, 0)] * t.sin();
        }
    }
    quad *= (PI / nt as f64) * (2.0 * PI / np as f64);
    ensure((quad - eps).abs() < 1e-3, format!("quadrature f30 {quad}"))?;
    let cloud = sphere_cloud(2000, r);
    let e = fit_sh(&cloud, L_MAX).map_err(e2s)?;
    let p = power_spectrum(&e).map_err(e2s)?;
    let ro = roughness(&e).map_err(e2s)?;
    ensure((e.coeff(3, 0) - quad).abs() < 1e-2, format!("f30 {} vs quadrature {quad}", e.coeff(3, 0)))?;
    ensure((ro - 0.01).abs() <= 0.001, format!("Ro {ro}"))?;
    ensure((p[3] - 0.01 / 7.0).abs() <= 0.1 * 0.01 / 7.0, format!("P3 {}", p[3]))?;

    let mut worst: f64 = 0.0;
    for k in 0..5 {
        let a = k as f64;
        let rotated = cloud.map(rotate(0.3 + a, 1.1 * a, 2.0 - 0.7 * a)).map_err(e2s)?;
        let rr = roughness(&fit_sh(&rotated, L_MAX).map_err(e2s)?).map_err(e2s)?;
        worst = worst.max((rr - ro).abs());
    }
    ensure(worst < 1e-3, format!("rotation changes Ro by {worst:e}"))?;

    let scaled = cloud.map(|q| q.map(|v| 2.0 * v)).map_err(e2s)?;
    let ps = power_spectrum(&fit_sh(&scaled, L_MAX).map_err(e2s)?).map_err(e2s)?;
    ensure(ps == p, format!("scaling by 2 changed the spectrum: {ps:?} vs {p:?}"))?;
    let scaled = cloud.map(|q| q.map(|v| 3.7 * v)).map_err(e2s)?;
    let rs = roughness(&fit_sh(&scaled, L_MAX).map_err(e2s)?).map_err(e2s)?;
    ensure((rs - ro).abs() <= 1e-12 * ro, format!("scaling by 3.7: {rs} vs {ro}"))?;
    Ok(format!(
        "sphere Ro {ro_sphere:.1e}; single mode Ro {ro:.5}, P3 {:.6} (oracle {:.6}); rotation drift {worst:.1e}",
        p[3],
        0.01 / 7.0
    ))
}

fn gaussian_set(n: usize, mean: &[f64], sd: &[f64], seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((n, mean.len()), |(_, j)| mean[j] + sd[j] * z.sample(&mut rng))
}

// 9
fn fid_closed_forms() -> Check {
    let a = gaussian_set(200, &[0.0; 6], &[1.0, 2.0, 0.5, 1.0, 3.0, 1.5], 1);
    let same = frechet_distance(&a, &a).map_err(e2s)?;
    ensure(same.abs() < 1e-6, format!("identical sets {same:e}"))?;

    let shift = [3.0, -2.0, 1.0, 0.5, 0.0, -1.0];
    let mut b = a.clone();
    for mut row in b.rows_mut() {
        for (v, d) in row.iter_mut().zip(shift) {
            *v += d;
        }
    }
    let expect: f64 = shift.iter().map(|v| v * v).sum();
    let got = frechet_distance(&a, &b).map_err(e2s)?;
    ensure((got - expect).abs() <= 0.01 * expect, format!("mean gap {got} vs {expect}"))?;

    let sa = [1.0, 4.0, 0.25, 2.0];
    let sb = [2.0, 1.0, 1.0, 0.5];
    let diag = |s: &[f64]| Array2::from_shape_fn((4, 4), |(i, j)| if i == j { s[i] } else { 0.0 });
    let (trace, _) = frechet_from_stats(&[0.0; 4], &diag(&sa), &[0.0; 4], &diag(&sb)).map_err(e2s)?;
    let oracle: f64 = sa.iter().zip(&sb).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    ensure((trace - oracle).abs() <= 0.01 * oracle, format!("trace term {trace} vs {oracle}"))?;
    Ok(format!("identical {same:.1e}, mean gap {got:.4} (expect {expect}), trace {trace:.6} (oracle {oracle:.6})"))
}

// 10
fn parameter_budget() -> Check {
    let fixed = Generator::new(GeneratorConfig::paper(InterpMode::Fixed)).map_err(e2s)?;
    let plus = Generator::new(GeneratorConfig::paper(InterpMode::Plus)).map_err(e2s)?;
    let critic = Critic::new(CriticConfig::paper()).map_err(e2s)?;
    let (g, gp, c) = (fixed.student_param_count(), plus.student_param_count(), critic.param_count());
    let within = |n: usize, target: f64| (n as f64 - target).abs() <= 0.05 * target;
    ensure(within(g, 10.68e6), format!("generator {g}"))?;
    ensure(within(c, 11.19e6), format!("critic {c}"))?;
    let delta = (gp - g) as f64 / g as f64;
    ensure(gp > g && delta < 1e-3, format!("plus {gp} vs fixed {g}"))?;
    Ok(format!("generator {g}, plus {gp} (+{:.3}%), critic {c}", 100.0 * delta))
}

// 11
fn data_parallel() -> Check {
    let t = Trainer::new(tiny_cfg(0.001)).map_err(e2s)?;
    let data = triplets(2);
    let batch: Vec<&TripletSample> = data.iter().take(4).collect();
    let (g1, _) = t.generator_gradients(&batch, 1).map_err(e2s)?;
    let (g2, _) = t.generator_gradients(&batch, 2).map_err(e2s)?;
    let (c1, _) = t.critic_gradients(&batch, 1, 3).map_err(e2s)?;
    let (c2, _) = t.critic_gradients(&batch, 2, 3).map_err(e2s)?;
    let worst = |a: &std::collections::BTreeMap<String, Tensor>, b: &std::collections::BTreeMap<String, Tensor>| {
        a.iter().map(|(k, v)| max_abs_diff(v, &b[k])).fold(0.0, f64::max)
    };
    let (dg, dc) = (worst(&g1, &g2), worst(&c1, &c2));
    ensure(g1.len() == g2.len() && c1.len() == c2.len(), "gradient sets differ")?;
    ensure(dg <= 1e-5 && dc <= 1e-5, format!("generator {dg:e}, critic {dc:e}"))?;
    Ok(format!("max gradient difference: generator {dg:.1e}, critic {dc:.1e}"))
}

fn main() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 11] = [
        ("PSNR/RMSE consistency", psnr_identity),
        ("slice-count laws", slice_counts),
        ("loss-formula oracles", loss_oracles),
        ("gradient checks", gradient_checks),
        ("WGAN-GP analytic cases", wgan_gp_cases),
        ("overfit probe", overfit),
        ("adversarial switch is live", adversarial_switch),
        ("roughness oracles", roughness_oracles),
        ("FID closed forms", fid_closed_forms),
        ("parameter budget", parameter_budget),
        ("data-parallel equivalence", data_parallel),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("acceptance {:>2} PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("acceptance {:>2} FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
