//! Adam with two learning-rate groups and the mini-batch training loop.

use rand::seq::SliceRandom;

use crate::error::{check_len, Error, Result};
use crate::learn::model::{Context, Trainable};
use crate::learn::nn::{Mode, ParamGroup, ParamSet, BN_MOMENTUM};
use crate::learn::tape::{Gradients, Tape};
use crate::scalar::Scalar;
use crate::scene::{seeded_rng, SceneRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr_regularization: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_regularization: 1e-2,
            lr_other: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One Adam update; `grads[i]` belongs to the i-th parameter.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<()> {
        check_len("gradient count", params.len(), grads.len())?;
        check_len("moment count", params.len(), self.m.len())?;
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = T::c(match p.group {
                ParamGroup::Regularization => c.lr_regularization,
                ParamGroup::Other => c.lr_other,
            });
            let g = &grads[i];
            check_len("gradient length", p.value.len(), g.len())?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p.value.data[k] -= lr * mh / (vh.sqrt() + T::c(c.eps));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// One supervised example: measurements and the target `χ_I` image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub delta_p: Vec<T>,
    pub target: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch (over the samples seen in that epoch).
    pub epoch_loss: Vec<f64>,
    /// Loss of every optimizer step.
    pub step_loss: Vec<f64>,
}

/// Resumable training state. The shuffle stream of epoch `e` is the seeded
/// generator advanced by `e` jumps, so `(config.seed, epoch)` is the whole
/// generator state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub optimizer: OptimizerState<T>,
    pub epoch: usize,
    pub config: TrainConfig,
}

/// Shuffle generator for one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> SceneRng {
    let mut rng = seeded_rng(seed);
    for _ in 0..epoch {
        rng.jump();
    }
    rng
}

impl<T: Scalar> Trainer<T> {
    pub fn new(params: &ParamSet<T>, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(Self {
            optimizer: OptimizerState::new(params, config.adam),
            epoch: 0,
            config,
        })
    }

    /// Runs one epoch over `data` in a shuffled order; returns the mean loss.
    pub fn epoch<M: Trainable<T> + ?Sized>(
        &mut self,
        model: &mut M,
        ctx: &Context<T>,
        data: &[TrainSample<T>],
        report: &mut TrainReport,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, self.epoch));
        let mut total = 0.0;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let loss = self.step(model, ctx, data, chunk).map_err(|e| match e {
                Error::NanLoss { diagnostics, .. } => Error::NanLoss {
                    epoch: self.epoch,
                    step,
                    diagnostics,
                },
                other => other,
            })?;
            report.step_loss.push(loss);
            total += loss * chunk.len() as f64;
        }
        self.epoch += 1;
        let mean = total / data.len() as f64;
        report.epoch_loss.push(mean);
        Ok(mean)
    }

    fn step<M: Trainable<T> + ?Sized>(&mut self, model: &mut M, ctx: &Context<T>, data: &[TrainSample<T>], idx: &[usize]) -> Result<f64> {
        let batch: Vec<&[T]> = idx.iter().map(|&i| data[i].delta_p.as_slice()).collect();
        let target: Vec<T> = idx.iter().flat_map(|&i| data[i].target.iter().copied()).collect();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let built = model.build_batch(ctx, &mut tape, &bound, &batch, Mode::Train)?;
        let loss = tape.mse(built.output, &target)?;
        let value = tape.value(loss).data[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NanLoss {
                epoch: self.epoch,
                step: 0,
                diagnostics: diagnostics(&tape),
            });
        }
        let grads = tape.backward(loss)?;
        let flat = param_grads(model.params(), &grads, bound.vars());
        if flat.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NanLoss {
                epoch: self.epoch,
                step: 0,
                diagnostics: format!("non-finite gradient; {}", diagnostics(&tape)),
            });
        }
        model.absorb_stats(&built.stats, T::c(BN_MOMENTUM))?;
        self.optimizer.update(model.params_mut(), &flat)?;
        model.clamp();
        Ok(value)
    }
}

/// Trains for `config.epochs` epochs from a fresh optimizer state.
pub fn train<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &mut M,
    ctx: &Context<T>,
    data: &[TrainSample<T>],
    config: TrainConfig,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model.params(), config)?;
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        trainer.epoch(model, ctx, data, &mut report)?;
    }
    Ok(report)
}

/// Gradients of every parameter in [`ParamSet`] order (zeros when unused).
pub fn param_grads<T: Scalar>(params: &ParamSet<T>, grads: &Gradients<T>, vars: &[crate::learn::tape::Var]) -> Vec<Vec<T>> {
    params
        .iter()
        .zip(vars)
        .map(|(p, &v)| grads.get_or_zero(v, p.value.len()))
        .collect()
}

fn diagnostics<T: Scalar>(tape: &Tape<T>) -> String {
    let norms = tape.activation_norms();
    let first_bad = norms.iter().position(|n| !n.is_finite());
    let tail: Vec<String> = norms.iter().rev().take(12).rev().map(|n| format!("{n:.3e}")).collect();
    format!(
        "first non-finite activation at node {:?} of {}; trailing activation norms [{}]",
        first_bad,
        norms.len(),
        tail.join(", ")
    )
}
