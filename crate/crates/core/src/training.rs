//! Optimisation of the trainable model against frozen encoders and a frozen
//! perceptual model: one-cycle schedule, Adam, seeded data order, JSONL log
//! and checkpoints.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Tape, Var};
use crate::encoder::FrozenBackbone;
use crate::error::{ensure, Error, Result};
use crate::imaging::{augment, normalize, resize, AugmentConfig, ImageTensor};
use crate::model::{encoder_features, Qfae};
use crate::nn::{collect_grads, Params};
use crate::perceptual::{loss_from_features, LossForm, PerceptualModel};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Perceptual,
    Mae,
    #[serde(rename = "mae+perceptual")]
    MaePerceptual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_lr: 8e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_lr > 0.0 && self.max_lr.is_finite(), "optimizer.max_lr must be positive");
        ensure!((0.0..1.0).contains(&self.beta1), "optimizer.beta1 must lie in [0, 1)");
        ensure!((0.0..1.0).contains(&self.beta2), "optimizer.beta2 must lie in [0, 1)");
        ensure!(self.eps > 0.0, "optimizer.eps must be positive");
        ensure!(self.weight_decay >= 0.0, "optimizer.weight_decay must be non-negative");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.pct_start > 0.0 && self.pct_start < 1.0,
            "schedule.pct_start must lie in (0, 1)"
        );
        ensure!(self.div_factor >= 1.0, "schedule.div_factor must be >= 1");
        ensure!(self.final_div_factor >= 1.0, "schedule.final_div_factor must be >= 1");
        Ok(())
    }

    /// Learning rate at `step` of `total`: cosine warm-up from
    /// `max_lr / div_factor` to `max_lr` over the first `pct_start` of the
    /// run, then cosine decay to `max_lr / final_div_factor`.
    pub fn lr(&self, step: usize, total: usize, max_lr: f64) -> Result<f64> {
        ensure!(step < total, "schedule step {step} outside [0, {total})");
        let start = max_lr / self.div_factor;
        let end = max_lr / self.final_div_factor;
        let peak = self.pct_start * total as f64;
        let s = step as f64;
        let anneal = |from: f64, to: f64, pct: f64| {
            if pct <= 0.0 {
                from
            } else if pct >= 1.0 {
                to
            } else {
                to + (from - to) / 2.0 * (1.0 + (std::f64::consts::PI * pct).cos())
            }
        };
        Ok(if s <= peak {
            anneal(start, max_lr, s / peak)
        } else {
            let tail = (total - 1) as f64 - peak;
            anneal(max_lr, end, if tail > 0.0 { (s - peak) / tail } else { 1.0 })
        })
    }
}

/// One-cycle schedule with the default shape.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    ScheduleConfig::default().lr(step, total_steps, max_lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Stop after this many optimiser steps (the schedule spans the shorter run).
    pub max_steps: Option<usize>,
    /// Random augmentation of training images; when off, images are only
    /// resized and normalised and frozen features are cached.
    pub augment: bool,
    pub loss: LossMode,
    pub loss_form: LossForm,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            seeds: vec![42, 7, 13, 65, 91],
            max_steps: None,
            augment: true,
            loss: LossMode::Perceptual,
            loss_form: LossForm::Hierarchical,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "train.epochs must be >= 1");
        ensure!(self.batch_size >= 1, "train.batch_size must be >= 1");
        ensure!(!self.seeds.is_empty(), "train.seeds must not be empty");
        ensure!(self.max_steps != Some(0), "train.max_steps must be positive");
        Ok(())
    }

    pub fn total_steps(&self, n_images: usize) -> usize {
        let per_epoch = n_images.div_ceil(self.batch_size);
        let full = self.epochs * per_epoch;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Adam with bias correction and optional decoupled-free L2 weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Matrix<f32>>,
    v: Vec<Matrix<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &impl Params<f32>, cfg: OptimizerConfig) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p| m.push(Matrix::zeros(p.rows(), p.cols())));
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut impl Params<f32>, grads: &[Matrix<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (eps, wd) = (self.cfg.eps, self.cfg.weight_decay);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p| {
            let g = &grads[i];
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for (((w, &gr), mm), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gr = gr as f64 + wd * *w as f64;
                let mn = b1 * *mm as f64 + (1.0 - b1) * gr;
                let vn = b2 * *vv as f64 + (1.0 - b2) * gr * gr;
                *mm = mn as f32;
                *vv = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
            i += 1;
        });
    }
}

/// Frozen parts and data settings shared by every training step.
pub struct TrainContext<'a> {
    pub encoders: &'a [FrozenBackbone<f32>],
    pub perceptual: &'a PerceptualModel<f32>,
    pub side: usize,
    pub augment: AugmentConfig,
    pub settings: &'a TrainSettings,
    pub optimizer: &'a OptimizerConfig,
    pub schedule: &'a ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<LogRecord>,
    pub final_loss: f64,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Frozen-model outputs that depend only on the input image.
struct Prepared {
    image: Matrix<f32>,
    enc: Vec<Vec<Matrix<f32>>>,
    perc: Vec<Vec<Matrix<f32>>>,
}

fn prepare(ctx: &TrainContext<'_>, image: Matrix<f32>) -> Result<Prepared> {
    let tape = Tape::new();
    let fb = Binder::frozen(&tape);
    let x = tape.borrowed(&image, false);
    let enc = encoder_features(&fb, ctx.encoders, x, ctx.side)?
        .iter()
        .map(|taps| taps.iter().map(|&v| tape.value(v).clone()).collect())
        .collect();
    let perc = if ctx.settings.loss == LossMode::Mae {
        Vec::new()
    } else {
        ctx.perceptual
            .features_graph(&fb, x)?
            .iter()
            .map(|taps| taps.iter().map(|&v| tape.value(v).clone()).collect())
            .collect()
    };
    drop(fb);
    drop(tape);
    Ok(Prepared { image, enc, perc })
}

/// Training loss for one reconstruction node.
pub fn reconstruction_loss<'a>(
    tape: &Tape<'a, f32>,
    fb: &Binder<'_, 'a, f32>,
    perceptual: &'a PerceptualModel<f32>,
    x: Var,
    x_features: &[Vec<Var>],
    recon: Var,
    mode: LossMode,
    form: LossForm,
) -> Result<Var> {
    let mae = || {
        let d = tape.sub(recon, x);
        let a = tape.abs(d);
        tape.mean(a)
    };
    let perc = || -> Result<Var> {
        let fy = perceptual.features_graph(fb, recon)?;
        loss_from_features(tape, perceptual, x_features, &fy, form)
    };
    Ok(match mode {
        LossMode::Mae => mae(),
        LossMode::Perceptual => perc()?,
        LossMode::MaePerceptual => {
            let p = perc()?;
            tape.add(mae(), p)
        }
    })
}

fn sample_step(
    ctx: &TrainContext<'_>,
    model: &Qfae<f32>,
    prep: &Prepared,
) -> Result<(f64, Vec<Matrix<f32>>)> {
    let tape = Tape::new();
    let fb = Binder::frozen(&tape);
    let tb = Binder::trainable(&tape);
    let x = tape.borrowed(&prep.image, false);
    let enc: Vec<Vec<Var>> = prep
        .enc
        .iter()
        .map(|taps| taps.iter().map(|m| tape.borrowed(m, false)).collect())
        .collect();
    let perc: Vec<Vec<Var>> = prep
        .perc
        .iter()
        .map(|taps| taps.iter().map(|m| tape.borrowed(m, false)).collect())
        .collect();
    let recon = model.reconstruct_from_features(&tb, &enc)?;
    let s = ctx.settings;
    let loss = reconstruction_loss(&tape, &fb, ctx.perceptual, x, &perc, recon, s.loss, s.loss_form)?;
    let value = tape.scalar(loss) as f64;
    let grads = tape.backward(loss);
    let g = collect_grads(model, &tb, &grads);
    Ok((value, g))
}

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut h = crate::tensor::Fnv1a::default();
    h.update(&seed.to_le_bytes());
    h.update(&(epoch as u64).to_le_bytes());
    h.update(&(index as u64).to_le_bytes());
    h.finish()
}

fn load_sample(ctx: &TrainContext<'_>, img: &ImageTensor, seed: u64, epoch: usize, index: usize) -> Result<Matrix<f32>> {
    let img = if img.channels() == 1 { img.to_rgb() } else { img.clone() };
    let out = if ctx.settings.augment {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, index));
        augment(&img, &ctx.augment, ctx.side, &mut rng)?
    } else {
        normalize(&resize(&img, ctx.side, ctx.side)?, ctx.augment.norm_mean, ctx.augment.norm_std)?
    };
    Ok(out.to_matrix())
}

/// Trains `model` in place on unnormalised `images`. One JSON record per step
/// is written to `log` when given.
pub fn train(
    ctx: &TrainContext<'_>,
    model: &mut Qfae<f32>,
    images: &[ImageTensor],
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    ensure!(!images.is_empty(), "training corpus is empty");
    ctx.settings.validate()?;
    ctx.optimizer.validate()?;
    ctx.schedule.validate()?;
    ctx.augment.validate()?;
    let total = ctx.settings.total_steps(images.len());
    let bs = ctx.settings.batch_size.min(images.len());
    let mut adam = Adam::new(model, ctx.optimizer.clone());
    let started = Instant::now();

    let cache: Option<Vec<Prepared>> = if ctx.settings.augment {
        None
    } else {
        Some(
            images
                .par_iter()
                .enumerate()
                .map(|(i, img)| prepare(ctx, load_sample(ctx, img, seed, 0, i)?))
                .collect::<Result<_>>()?,
        )
    };

    let mut records = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    'outer: for epoch in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, usize::MAX));
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            if step == total {
                break 'outer;
            }
            let results: Vec<(f64, Vec<Matrix<f32>>)> = batch
                .par_iter()
                .map(|&i| match &cache {
                    Some(c) => sample_step(ctx, model, &c[i]),
                    None => {
                        let prep = prepare(ctx, load_sample(ctx, &images[i], seed, epoch, i)?)?;
                        sample_step(ctx, model, &prep)
                    }
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f32;
            let mut loss = 0.0;
            let mut grads: Vec<Matrix<f32>> = Vec::new();
            for (l, g) in results {
                loss += l;
                if grads.is_empty() {
                    grads = g;
                } else {
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        acc.axpy(1.0, gi);
                    }
                }
            }
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            let lr = ctx.schedule.lr(step, total, ctx.optimizer.max_lr)?;
            adam.step(model, &grads, lr);
            let rec = LogRecord {
                step,
                lr,
                loss,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
            log::debug!("step {step} lr {lr:.3e} loss {loss:.6}");
            records.push(rec);
            step += 1;
        }
    }
    let final_loss = records.last().map_or(f64::NAN, |r| r.loss);
    Ok(TrainOutcome {
        records,
        final_loss,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let max = 8e-5;
        assert_eq!(onecycle_lr(30, 100, max).unwrap(), max);
        assert!((onecycle_lr(0, 100, max).unwrap() - max / 25.0).abs() < 1e-20);
        assert!(onecycle_lr(99, 100, max).unwrap() <= max / 1e3);
        assert!((onecycle_lr(99, 100, max).unwrap() - max / 1e4).abs() < 1e-20);
        assert!(onecycle_lr(100, 100, max).is_err());
    }

    #[test]
    fn schedule_is_unimodal() {
        let lrs: Vec<f64> = (0..200).map(|s| onecycle_lr(s, 200, 1.0).unwrap()).collect();
        let peak = 60;
        assert!(lrs[..=peak].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[peak..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = Matrix::<f32>::from_vec(1, 2, vec![1.0, -1.0]);
        let mut adam = Adam::new(&w, OptimizerConfig::default());
        adam.step(&mut w, &[Matrix::from_vec(1, 2, vec![0.5, -2.0])], 0.1);
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn total_steps_respects_cap() {
        let s = TrainSettings {
            epochs: 3,
            batch_size: 4,
            max_steps: Some(5),
            ..TrainSettings::default()
        };
        assert_eq!(s.total_steps(10), 5);
        assert_eq!(TrainSettings { max_steps: None, ..s }.total_steps(10), 9);
    }
}
