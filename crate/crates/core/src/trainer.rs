//! Alternating critic and generator optimization over triplet batches.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Tensor, Var};
use crate::checkpoint::{save_checkpoint, sha256_hex};
use crate::critic::{gradient_penalty_at, sample_alphas, Critic, CriticConfig};
use crate::error::{Error, Result};
use crate::evalkit::{bicubic_midpoint, ssim, to_8bit};
use crate::flownet::{dpm_batch, stack_frames, Generator, GeneratorConfig, InterpMode};
use crate::nn::param_grads;
use crate::objectives::{critic_loss, generator_loss, LossReport, LossWeights};
use crate::optim::Adam;
use crate::triplets::{self, FrameOptions, TripletSample};
use crate::volio::{self, FramePolicy, VolumeStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weights: LossWeights,
    /// Governs the generator; `generator.mode` is ignored.
    pub mode: InterpMode,
    pub critic_steps_per_gen: usize,
    pub seed: u64,
    pub device_count: usize,
    /// Random joint flips, rotations and intensity jitter per sample.
    pub augment: bool,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr: 1e-4,
            betas: (0.5, 0.999),
            weights: LossWeights::default(),
            mode: InterpMode::Fixed,
            critic_steps_per_gen: 1,
            seed: 0,
            device_count: 1,
            augment: true,
            generator: GeneratorConfig::paper(InterpMode::Fixed),
            critic: CriticConfig::paper(),
        }
    }
}

impl TrainConfig {
    /// Small models on `size × size` frames, for probes and tests.
    pub fn tiny(mode: InterpMode, size: usize) -> Self {
        TrainConfig {
            mode,
            generator: GeneratorConfig::tiny(mode, size),
            critic: CriticConfig::tiny(size),
            ..TrainConfig::default()
        }
    }

    /// Settings of the desk-scale overfit probe on 32 × 32 frames.
    pub fn probe(seed: u64) -> Self {
        let mut generator = GeneratorConfig::tiny(InterpMode::Fixed, 32);
        generator.widths = [32; 3];
        generator.teacher_width = 32;
        generator.zero_init_heads = true;
        TrainConfig {
            epochs: 5,
            batch_size: 1,
            lr: 3e-4,
            weights: LossWeights::direct(),
            seed,
            augment: false,
            generator,
            ..TrainConfig::tiny(InterpMode::Fixed, 32)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            mode: self.mode,
            ..self.generator.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.device_count == 0 {
            return fail("batch_size and device_count must be positive".into());
        }
        if !self.batch_size.is_multiple_of(self.device_count) {
            return fail(format!(
                "batch_size {} is not divisible by device_count {}",
                self.batch_size, self.device_count
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas {:?} must lie in [0,1)", self.betas));
        }
        if self.critic_steps_per_gen == 0 {
            return fail("critic_steps_per_gen must be at least 1".into());
        }
        self.weights.validate()?;
        let g = self.generator_config();
        g.validate()?;
        self.critic.validate()?;
        if self.critic.input_size != g.model_size {
            return fail(format!(
                "critic input {} differs from generator frames {}",
                self.critic.input_size, g.model_size
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Deterministic seed from a list of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Rejects data the configured mode cannot train on.
pub fn check_dataset(cfg: &TrainConfig, data: &[TripletSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let m = cfg.generator.model_size;
    if let Some(t) = data.iter().find(|t| t.i0.model_size() != m) {
        return Err(Error::ShapeMismatch(format!(
            "triplet from {} has {} px frames, model expects {m}",
            t.source.stack,
            t.i0.model_size()
        )));
    }
    if cfg.mode == InterpMode::Fixed {
        if let Some(t) = data.iter().find(|t| t.z != 0.5) {
            return Err(Error::ModeMismatch(format!(
                "midpoint model given a triplet at z = {} ({}:{}/{}/{})",
                t.z, t.source.stack, t.source.n1, t.source.n2, t.source.n3
            )));
        }
    }
    Ok(())
}

/// One simulated device's share of a batch.
pub struct Chunk {
    pub i0: Var,
    pub ig: Var,
    pub i1: Var,
    pub dpm: Option<Var>,
    /// Position of the chunk's first sample in the batch.
    pub offset: usize,
    /// Fraction of the batch held by this chunk.
    pub weight: f64,
}

/// Splits a batch along its first axis into at most `devices` chunks.
pub fn make_chunks(batch: &[&TripletSample], devices: usize, mode: InterpMode) -> Result<Vec<Chunk>> {
    let n = batch.len();
    if n == 0 || devices == 0 {
        return Err(Error::invalid("empty batch or zero devices"));
    }
    let (base, extra) = (n / devices, n % devices);
    let mut out = Vec::new();
    let mut start = 0;
    for d in 0..devices {
        let len = base + usize::from(d < extra);
        if len == 0 {
            continue;
        }
        let offset = start;
        let part = &batch[start..start + len];
        start += len;
        let frames = |f: fn(&TripletSample) -> &Array2<f64>| -> Result<Var> {
            let v: Vec<&Array2<f64>> = part.iter().map(|t| f(t)).collect();
            Ok(Var::constant(stack_frames(&v)?))
        };
        let i0 = frames(|t| t.i0.data())?;
        let dpm = match mode {
            InterpMode::Plus => {
                let zs: Vec<f64> = part.iter().map(|t| t.z).collect();
                Some(Var::constant(dpm_batch(&zs, i0.shape())?))
            }
            InterpMode::Fixed => None,
        };
        out.push(Chunk {
            ig: frames(|t| t.ig.data())?,
            i1: frames(|t| t.i1.data())?,
            i0,
            dpm,
            offset,
            weight: len as f64 / n as f64,
        });
    }
    Ok(out)
}

type Grads = BTreeMap<String, Tensor>;

/// Weighted sum of per-chunk gradients, in chunk order.
fn reduce(parts: Vec<(f64, Grads)>) -> Grads {
    let mut acc = Grads::new();
    for (w, g) in parts {
        for (name, t) in g {
            match acc.get_mut(&name) {
                Some(a) => a.scaled_add(w, &t),
                None => {
                    acc.insert(name, t * w);
                }
            }
        }
    }
    acc
}

fn weighted_report(parts: &[(f64, LossReport)]) -> LossReport {
    let mut r = LossReport::default();
    let opt = |acc: Option<f64>, w: f64, v: Option<f64>| v.map(|v| acc.unwrap_or(0.0) + w * v).or(acc);
    for &(w, p) in parts {
        r.rec_student += w * p.rec_student;
        r.rec_teacher += w * p.rec_teacher;
        r.distill += w * p.distill;
        r.adv_gen += w * p.adv_gen;
        r.total_g += w * p.total_g;
        r.critic_wass = opt(r.critic_wass, w, p.critic_wass);
        r.critic_gp = opt(r.critic_gp, w, p.critic_gp);
        r.total_d = opt(r.total_d, w, p.total_d);
    }
    r
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub batch: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_rec_student: f64,
    pub mean_total_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

/// Models, optimizers and counters of a training run.
pub struct Trainer {
    cfg: TrainConfig,
    config_hash: String,
    pub generator: Generator,
    pub critic: Critic,
    gen_opt: Adam,
    critic_opt: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator_config())?;
        let critic = Critic::new(cfg.critic.clone())?;
        Ok(Trainer {
            config_hash: cfg.hash(),
            gen_opt: Adam::new(cfg.lr, cfg.betas),
            critic_opt: Adam::new(cfg.lr, cfg.betas),
            cfg,
            generator,
            critic,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn generator_steps(&self) -> u64 {
        self.gen_opt.steps_taken()
    }

    pub fn critic_steps(&self) -> u64 {
        self.critic_opt.steps_taken()
    }

    fn adversarial(&self) -> bool {
        self.cfg.weights.adv > 0.0
    }

    /// Generator gradients and loss terms on a batch split across
    /// `devices` chunks.
    pub fn generator_gradients(&self, batch: &[&TripletSample], devices: usize) -> Result<(Grads, LossReport)> {
        let chunks = make_chunks(batch, devices, self.cfg.mode)?;
        let parts = chunks
            .par_iter()
            .map(|c| {
                let out = self.generator.forward(&c.i0, &c.i1, c.dpm.as_ref(), Some(&c.ig))?;
                let scores = self.adversarial().then(|| self.critic.forward(&out.student));
                let (loss, report) = generator_loss(&out, &c.ig, scores.as_ref(), &self.cfg.weights)?;
                let grads = if loss.item().is_finite() {
                    param_grads(&self.generator, &loss)
                } else {
                    Grads::new()
                };
                Ok((c.weight, grads, report))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = weighted_report(&parts.iter().map(|p| (p.0, p.2)).collect::<Vec<_>>());
        Ok((reduce(parts.into_iter().map(|p| (p.0, p.1)).collect()), report))
    }

    /// Critic gradients against detached student frames. `seed` drives the
    /// gradient-penalty interpolation weights.
    pub fn critic_gradients(&self, batch: &[&TripletSample], devices: usize, seed: u64) -> Result<(Grads, LossReport)> {
        let chunks = make_chunks(batch, devices, self.cfg.mode)?;
        let alphas = sample_alphas(batch.len(), seed);
        let parts = chunks
            .par_iter()
            .map(|c| {
                let fake = {
                    let _g = autograd::no_grad();
                    self.generator.forward(&c.i0, &c.i1, c.dpm.as_ref(), None)?.student.value().clone()
                };
                let real = c.ig.value().clone();
                let d_real = self.critic.forward(&c.ig);
                let d_fake = self.critic.forward(&Var::constant(fake.clone()));
                let a = &alphas[c.offset..c.offset + real.shape()[0]];
                let gp = gradient_penalty_at(|x| self.critic.forward(x), &real, &fake, a)?;
                let loss = critic_loss(&d_real, &d_fake, &gp, &self.cfg.weights)?;
                let report = LossReport {
                    critic_wass: Some(d_real.value().mean().unwrap_or(0.0) - d_fake.value().mean().unwrap_or(0.0)),
                    critic_gp: Some(gp.item()),
                    total_d: Some(loss.item()),
                    ..LossReport::default()
                };
                let grads = if loss.item().is_finite() {
                    param_grads(&self.critic, &loss)
                } else {
                    Grads::new()
                };
                Ok((c.weight, grads, report))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = weighted_report(&parts.iter().map(|p| (p.0, p.2)).collect::<Vec<_>>());
        Ok((reduce(parts.into_iter().map(|p| (p.0, p.1)).collect()), report))
    }

    /// Critic update(s), when adversarial, then one generator update. No
    /// weights change if any loss is non-finite.
    pub fn step(&mut self, batch: &[&TripletSample], epoch: usize) -> Result<LossReport> {
        let devices = self.cfg.device_count;
        let mut critic_report = LossReport::default();
        if self.adversarial() {
            for k in 0..self.cfg.critic_steps_per_gen {
                let seed = derive_seed(&[self.cfg.seed, 0x6770, self.step as u64, k as u64]);
                let (grads, r) = self.critic_gradients(batch, devices, seed)?;
                if !r.total_d.is_some_and(f64::is_finite) {
                    return Err(Error::NonFiniteLoss { epoch, step: self.step });
                }
                self.critic_opt.step(&mut self.critic, &grads);
                critic_report = r;
            }
        }
        let (grads, mut report) = self.generator_gradients(batch, devices)?;
        if !report.total_g.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: self.step });
        }
        self.gen_opt.step(&mut self.generator, &grads);
        report.critic_wass = critic_report.critic_wass;
        report.critic_gp = critic_report.critic_gp;
        report.total_d = critic_report.total_d;
        self.step += 1;
        Ok(report)
    }

    /// Shuffled (and optionally augmented) batches for `epoch`.
    fn epoch_order(&self, data: &[TripletSample], epoch: usize) -> Vec<Vec<TripletSample>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, epoch as u64])));
        order
            .chunks(self.cfg.batch_size)
            .map(|idx| {
                idx.par_iter()
                    .map(|&i| {
                        if self.cfg.augment {
                            triplets::augment(&data[i], derive_seed(&[self.cfg.seed, 0x6175, epoch as u64, i as u64]))
                        } else {
                            data[i].clone()
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// One pass over `data`; `log` receives every step.
    pub fn run_epoch(
        &mut self,
        data: &[TripletSample],
        epoch: usize,
        log: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        check_dataset(&self.cfg, data)?;
        let batches = self.epoch_order(data, epoch);
        let (mut rec, mut total, mut n) = (0.0, 0.0, 0usize);
        for batch in &batches {
            let refs: Vec<&TripletSample> = batch.iter().collect();
            let report = self.step(&refs, epoch)?;
            log(&StepRecord {
                epoch,
                step: self.step - 1,
                batch: refs.len(),
                report,
            })?;
            rec += report.rec_student * refs.len() as f64;
            total += report.total_g * refs.len() as f64;
            n += refs.len();
        }
        Ok(EpochSummary {
            epoch,
            steps: batches.len(),
            mean_rec_student: rec / n as f64,
            mean_total_g: total / n as f64,
            checkpoint: None,
        })
    }

    pub fn save(&self, path: &Path, epoch: Option<usize>) -> Result<()> {
        save_checkpoint(path, &self.generator, Some(&self.critic), &self.config_hash, epoch)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub epochs: Vec<EpochSummary>,
    pub generator_steps: u64,
    pub critic_steps: u64,
}

/// Checkpoint path for an epoch (1-based) inside `dir`.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Runs `cfg.epochs` epochs. With `out_dir`, writes `config.toml`,
/// `train_log.jsonl` and one checkpoint per epoch there. A non-finite loss
/// aborts the run; checkpoints of finished epochs stay in place.
pub fn train(cfg: &TrainConfig, data: &[TripletSample], out_dir: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cpath = dir.join("config.toml");
            std::fs::write(&cpath, cfg.to_toml()).map_err(|e| Error::io(&cpath, e))?;
            let lpath = dir.join("train_log.jsonl");
            let f = std::fs::File::create(&lpath).map_err(|e| Error::io(&lpath, e))?;
            Some((lpath, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut sink = |r: &StepRecord| -> Result<()> {
            log::debug!("epoch {} step {}: total_g {:.6}", r.epoch, r.step, r.report.total_g);
            if let Some((p, f)) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, r)?;
                f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| Error::io(&*p, e))?;
            }
            Ok(())
        };
        let mut summary = trainer.run_epoch(data, epoch, &mut sink)?;
        if let Some(dir) = out_dir {
            let p = checkpoint_path(dir, epoch);
            trainer.save(&p, Some(epoch))?;
            summary.checkpoint = Some(p);
        }
        log::info!(
            "epoch {epoch}/{}: rec {:.5}, total {:.5}",
            cfg.epochs,
            summary.mean_rec_student,
            summary.mean_total_g
        );
        epochs.push(summary);
    }
    Ok(TrainSummary {
        config_hash: trainer.config_hash.clone(),
        epochs,
        generator_steps: trainer.generator_steps(),
        critic_steps: trainer.critic_steps(),
    })
}

/// Outcome of [`overfit_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub triplets: usize,
    pub steps: usize,
    /// Mean 8-bit SSIM of student predictions on the training triplets.
    pub final_ssim: f64,
    /// Same statistic for cubic interpolation along z.
    pub bicubic_ssim: f64,
    /// Mean student reconstruction loss of each epoch.
    pub epoch_rec: Vec<f64>,
}

impl ProbeReport {
    pub fn margin(&self) -> f64 {
        self.final_ssim - self.bicubic_ssim
    }

    pub fn loss_monotone(&self) -> bool {
        self.epoch_rec.windows(2).all(|w| w[1] < w[0])
    }
}

pub const PROBE_MAX_TRIPLETS: usize = 32;
pub const PROBE_MAX_STEPS: usize = 500;

/// Trains on the midpoint triplets of `stacks` for whole epochs totalling
/// at most `steps` optimizer steps, then scores student predictions and
/// the cubic baseline against the held-out middle slices.
pub fn overfit_probe(cfg: &TrainConfig, stacks: &[VolumeStack], steps: usize) -> Result<ProbeReport> {
    if cfg.mode != InterpMode::Fixed {
        return Err(Error::ModeMismatch("the probe trains midpoint models".into()));
    }
    if steps > PROBE_MAX_STEPS {
        return Err(Error::invalid(format!("probe runs at most {PROBE_MAX_STEPS} steps")));
    }
    let opts = FrameOptions {
        policy: FramePolicy::Resize,
        model_size: cfg.generator.model_size,
    };
    let mut data = Vec::new();
    let mut volumes = BTreeMap::new();
    for (k, s) in stacks.iter().enumerate() {
        let id = format!("probe{k}");
        data.extend(triplets::extract_fixed_triplets(s, &id, opts)?.triplets);
        volumes.insert(id, frame_volume(s, opts.model_size)?);
    }
    if data.len() > PROBE_MAX_TRIPLETS {
        return Err(Error::invalid(format!(
            "{} triplets; the probe takes at most {PROBE_MAX_TRIPLETS}",
            data.len()
        )));
    }
    check_dataset(cfg, &data)?;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let epochs = steps / per_epoch;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut epoch_rec = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        epoch_rec.push(trainer.run_epoch(&data, epoch, &mut |_| Ok(()))?.mean_rec_student);
    }

    let i0: Vec<&Array2<f64>> = data.iter().map(|t| t.i0.data()).collect();
    let i1: Vec<&Array2<f64>> = data.iter().map(|t| t.i1.data()).collect();
    let preds = trainer.generator.predict(&i0, &i1, None)?;
    let (mut model, mut cubic) = (0.0, 0.0);
    for (t, p) in data.iter().zip(&preds) {
        let truth = to_8bit(t.ig.data());
        model += ssim(&to_8bit(p), &truth)?;
        let src = &t.source;
        let base = bicubic_midpoint(&volumes[&src.stack], src.n1, src.n3).mapv(|v| v.clamp(0.0, 1.0));
        cubic += ssim(&to_8bit(&base), &truth)?;
    }
    let n = data.len() as f64;
    Ok(ProbeReport {
        triplets: data.len(),
        steps: trainer.generator_steps() as usize,
        final_ssim: model / n,
        bicubic_ssim: cubic / n,
        epoch_rec,
    })
}

/// Normalized slices resized to model frames, stacked along z.
fn frame_volume(s: &VolumeStack, size: usize) -> Result<Array3<f64>> {
    let norm = volio::normalize_stack(s).stack;
    let mut out = Array3::zeros((norm.depth(), size, size));
    for z in 0..norm.depth() {
        let f = volio::to_model_frames(norm.slice(z), FramePolicy::Resize, size)?;
        out.index_axis_mut(Axis(0), z).assign(f.frames[0].data());
    }
    Ok(out)
}
