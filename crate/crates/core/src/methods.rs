//! The reconstruction methods behind one interface: the learned unrolled
//! network, its minimum-norm variant, unrolled ADMM-TV, direct inversion and
//! the bare Tikhonov initialization.

use std::fmt;

use crate::error::{Error, Result};
use crate::inversion::{admm_tv_batch, InversionSystem};
use crate::learn::model::{infer, Context, DirectModel, InitKind, PriorKind, Trainable, TvNetwork, UnrolledModel, UnrolledOptions};
use crate::learn::nn::PriorConfig;
use crate::learn::train::{TrainConfig, TrainReport, TrainSample, Trainer};
use crate::scalar::Scalar;
use crate::scene::{Sample, SceneConfig};
use crate::xpra::{assemble_kernel, build_diff_operators};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Tikhonov initialization + unrolled PGM with learned priors.
    TkDprior,
    /// Unrolled ADMM for anisotropic TV.
    Tv,
    /// Affine measurement-to-contrast map followed by learned priors.
    Di,
    /// Minimum-norm initialization + unrolled PGM with learned priors only.
    Dprior,
    /// The Tikhonov initialization layer alone.
    TikInit,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::TkDprior, Method::Tv, Method::Di, Method::Dprior, Method::TikInit];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TkDprior => "tk-dprior",
            Method::Tv => "tv",
            Method::Di => "di",
            Method::Dprior => "dprior",
            Method::TikInit => "tik-init",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture choices shared by all methods.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    /// Unrolled PGM layers, and prior stages of the direct model.
    pub layers: usize,
    pub prior: PriorConfig,
    pub tv_layers: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: 3,
            prior: PriorConfig::DESK,
            tv_layers: 5,
            seed: 0,
        }
    }
}

/// Builds the normalized inversion context of a scene.
pub fn context<T: Scalar>(config: &SceneConfig<T>) -> Result<Context<T>> {
    let op = assemble_kernel(config)?;
    let (nx, ny) = config.inverse_grid;
    Ok(Context::new(InversionSystem::normalized(op, build_diff_operators(nx, ny)?)?))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network<T> {
    Unrolled(UnrolledModel<T>),
    Tv(TvNetwork<T>),
    Direct(DirectModel<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub method: Method,
    pub spec: ModelSpec,
    pub net: Network<T>,
}

impl<T: Scalar> Model<T> {
    /// Untrained model with default scalars. `tik-init` has nothing of its
    /// own to learn and is served by a `tk-dprior` model.
    pub fn new(method: Method, ctx: &Context<T>, spec: ModelSpec) -> Result<Self> {
        let sys = &ctx.system;
        let unrolled = |init| {
            UnrolledModel::new(
                sys,
                UnrolledOptions {
                    layers: spec.layers,
                    kind: PriorKind::Learned,
                    init,
                    prior: spec.prior,
                    seed: spec.seed,
                },
            )
        };
        let net = match method {
            Method::TkDprior => Network::Unrolled(unrolled(InitKind::Tikhonov)?),
            Method::Dprior => Network::Unrolled(unrolled(InitKind::MinimumNorm {
                floor: sys.default_floor().to_f64_lossy(),
            })?),
            Method::Tv => Network::Tv(TvNetwork::new(spec.tv_layers, sys.default_lambda(), T::one())?),
            Method::Di => Network::Direct(DirectModel::new(sys.links(), ctx.cells(), spec.layers, spec.prior, spec.seed)?),
            Method::TikInit => {
                return Err(Error::InvalidConfig(
                    "tik-init is the initialization layer of a tk-dprior model; train tk-dprior instead".into(),
                ))
            }
        };
        Ok(Self { method, spec, net })
    }

    pub fn trainable(&self) -> &dyn Trainable<T> {
        match &self.net {
            Network::Unrolled(m) => m,
            Network::Tv(m) => m,
            Network::Direct(m) => m,
        }
    }

    pub fn trainable_mut(&mut self) -> &mut dyn Trainable<T> {
        match &mut self.net {
            Network::Unrolled(m) => m,
            Network::Tv(m) => m,
            Network::Direct(m) => m,
        }
    }

    /// Methods this model can run: its own, plus `tik-init` for models with
    /// a learnable Tikhonov initialization.
    pub fn supports(&self, method: Method) -> bool {
        method == self.method || (method == Method::TikInit && self.init_lambda().is_some())
    }

    fn init_lambda(&self) -> Option<[T; 2]> {
        match &self.net {
            Network::Unrolled(m) => m.init_lambda.map(|ids| ids.map(|id| m.params.scalar(id))),
            _ => None,
        }
    }

    /// Reconstructs the `δ√ε_R` image for each measurement vector.
    pub fn reconstruct(&self, method: Method, ctx: &Context<T>, batch: &[&[T]]) -> Result<Vec<Vec<T>>> {
        if !self.supports(method) {
            return Err(Error::InvalidConfig(format!("a {} model cannot run method {method}", self.method)));
        }
        match (method, &self.net) {
            (Method::TikInit, _) => {
                let [l1, l2] = self.init_lambda().expect("checked by supports");
                batch
                    .iter()
                    .map(|dp| Ok(ctx.system.tikhonov_init(l1, l2, dp)?.chi_i))
                    .collect()
            }
            (_, Network::Tv(m)) => admm_tv_batch(&m.model(), &ctx.system, batch),
            _ => infer(self.trainable(), ctx, batch),
        }
    }
}

/// Supervised pairs from dataset samples.
pub fn training_samples<T: Scalar>(samples: &[Sample<T>]) -> Vec<TrainSample<T>> {
    samples
        .iter()
        .map(|s| TrainSample {
            delta_p: s.measurements.delta_p.clone(),
            target: s.ground_truth.values.clone(),
        })
        .collect()
}

/// Candidate TV weights for the initial grid search.
pub const TV_GRID: [f64; 11] = [1e-6, 3e-6, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

/// Picks the TV weight with the lowest mean training MSE.
pub fn tv_grid_search<T: Scalar>(net: &TvNetwork<T>, ctx: &Context<T>, data: &[TrainSample<T>]) -> Result<T> {
    let inputs: Vec<&[T]> = data.iter().map(|s| s.delta_p.as_slice()).collect();
    let mut best: Option<(f64, T)> = None;
    for &c in &TV_GRID {
        let mut model = net.model();
        model.lambda_tv = T::c(c);
        let estimates = admm_tv_batch(&model, &ctx.system, &inputs)?;
        let mut total = 0.0;
        for (est, s) in estimates.iter().zip(data) {
            total += est.iter().zip(&s.target).map(|(a, b)| (*a - *b).to_f64_lossy().powi(2)).sum::<f64>();
        }
        if best.is_none_or(|(b, _)| total < b) {
            best = Some((total, T::c(c)));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// Trains `model` for `config.epochs` epochs, continuing from `trainer`.
/// A fresh TV model first takes its weight from [`tv_grid_search`].
pub fn train_model<T: Scalar>(
    model: &mut Model<T>,
    trainer: &mut Trainer<T>,
    ctx: &Context<T>,
    data: &[TrainSample<T>],
    epochs: usize,
    report: &mut TrainReport,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if let (Network::Tv(net), 0) = (&mut model.net, trainer.epoch) {
        let lambda = tv_grid_search(net, ctx, data)?;
        net.params.set_scalar(net.lambda_tv, lambda);
    }
    for _ in 0..epochs {
        let loss = trainer.epoch(model.trainable_mut(), ctx, data, report)?;
        on_epoch(trainer.epoch, loss);
    }
    Ok(())
}

/// Fresh optimizer state for a model.
pub fn trainer<T: Scalar>(model: &Model<T>, config: TrainConfig) -> Result<Trainer<T>> {
    Trainer::new(model.trainable().params(), config)
}
