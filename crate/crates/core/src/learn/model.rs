//! Learnable reconstruction networks built on the tape: the unrolled
//! proximal-gradient model (Tikhonov or minimum-norm initialization), unrolled
//! ADMM-TV and direct inversion.

use std::sync::Arc;

use crate::error::{check_len, Error, Result};
use crate::inversion::InversionSystem;
use crate::learn::nn::{weight_init, Bound, Mode, ParamGroup, ParamId, ParamSet, PriorConfig, PriorNet};
use crate::learn::tape::{diff_maps, GramMap, LinearMap, RegularizerMap, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::scene::GroundTruthMap;

/// Lower bound applied to λ, η and ρ after every optimizer step.
pub const PARAM_FLOOR: f64 = 1e-12;

/// Shared, read-only operators for graph construction.
pub struct Context<T: Scalar> {
    pub system: Arc<InversionSystem<T>>,
    gram: Arc<dyn LinearMap<T>>,
    regularizer: Arc<dyn LinearMap<T>>,
    diffs: [Arc<dyn LinearMap<T>>; 4],
}

impl<T: Scalar> Context<T> {
    pub fn new(system: InversionSystem<T>) -> Self {
        let system = Arc::new(system);
        let diffs = diff_maps(system.diffs());
        Self {
            gram: Arc::new(GramMap(system.clone())),
            regularizer: Arc::new(RegularizerMap(system.clone())),
            diffs,
            system,
        }
    }

    pub fn nx(&self) -> usize {
        self.system.operator().grid().nx
    }

    pub fn ny(&self) -> usize {
        self.system.operator().grid().ny
    }

    pub fn cells(&self) -> usize {
        self.system.dim() / 2
    }

    /// `[B, 2N]` leaf holding `s²𝒢ᵀΔP` for every sample.
    fn rhs_leaf(&self, tape: &mut Tape<T>, batch: &[&[T]]) -> Result<Var> {
        let mut data = Vec::with_capacity(batch.len() * self.system.dim());
        for dp in batch {
            data.extend(self.system.rhs(dp)?);
        }
        Ok(tape.leaf(Tensor::new(vec![batch.len(), self.system.dim()], data)?))
    }

    fn measurements_leaf(&self, tape: &mut Tape<T>, batch: &[&[T]]) -> Result<Var> {
        let l = self.system.links();
        let mut data = Vec::with_capacity(batch.len() * l);
        for dp in batch {
            check_len("measurements", l, dp.len())?;
            data.extend_from_slice(dp);
        }
        Ok(tape.leaf(Tensor::new(vec![batch.len(), l], data)?))
    }

    fn to_image(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let b = tape.value(x).shape[0];
        tape.reshape(x, vec![b, 2, self.ny(), self.nx()])
    }

    fn to_flat(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let b = tape.value(x).shape[0];
        tape.reshape(x, vec![b, self.system.dim()])
    }

    // ReLU on the χ_I half of a [B, 2N] state
    fn relu_imag(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let img = self.to_image(tape, x)?;
        let re = tape.slice(img, 0, 1)?;
        let im = tape.slice(img, 1, 1)?;
        let im = tape.relu(im);
        let both = tape.concat(&[re, im])?;
        self.to_flat(tape, both)
    }

    /// `∇f(x)` on the tape.
    fn grad_f(&self, tape: &mut Tape<T>, x: Var, b: Var, l1: Var, l2: Var) -> Result<Var> {
        let hx = tape.linear(x, self.gram.clone())?;
        let rx = tape.linear(x, self.regularizer.clone())?;
        let a = tape.mul(l1, x)?;
        let c = tape.mul(l2, rx)?;
        let g = tape.add(hx, a)?;
        let g = tape.add(g, c)?;
        tape.sub(g, b)
    }
}

/// How the prox step is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Identity,
    Learned,
}

/// Initialization layer of the unrolled model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    /// Learnable two-parameter Tikhonov pseudo-inverse, ReLU on `χ_I`.
    Tikhonov,
    /// Fixed ridge with a small floor and no Tikhonov terms in the layers.
    MinimumNorm { floor: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerHandles<T> {
    pub lambda1: Option<ParamId>,
    pub lambda2: Option<ParamId>,
    pub eta: ParamId,
    pub gate: Option<ParamId>,
    pub prior: Option<PriorNet<T>>,
}

/// Unrolled proximal-gradient network.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledModel<T> {
    pub params: ParamSet<T>,
    pub kind: PriorKind,
    pub init: InitKind,
    pub init_lambda: Option<[ParamId; 2]>,
    pub layers: Vec<LayerHandles<T>>,
}

/// Construction options for [`UnrolledModel`].
#[derive(Clone, Copy, Debug)]
pub struct UnrolledOptions {
    pub layers: usize,
    pub kind: PriorKind,
    pub init: InitKind,
    pub prior: PriorConfig,
    pub seed: u64,
}

impl<T: Scalar> UnrolledModel<T> {
    /// Default scalars: every λ = 10⁻²·trace/2N, every η = 1/σ²_max.
    pub fn new(system: &InversionSystem<T>, opts: UnrolledOptions) -> Result<Self> {
        if opts.layers == 0 {
            return Err(Error::InvalidConfig("the unrolled model needs T >= 1".into()));
        }
        let lambda = system.default_lambda();
        let eta = system.default_step();
        let mut params = ParamSet::new();
        let reg = |params: &mut ParamSet<T>, name: String| params.add(name, ParamGroup::Regularization, Tensor::scalar(lambda));
        let tikhonov = matches!(opts.init, InitKind::Tikhonov);
        let init_lambda = tikhonov.then(|| [reg(&mut params, "init.lambda1".into()), reg(&mut params, "init.lambda2".into())]);
        let mut layers = Vec::with_capacity(opts.layers);
        for i in 0..opts.layers {
            let (lambda1, lambda2) = if tikhonov {
                (Some(reg(&mut params, format!("layer{i}.lambda1"))), Some(reg(&mut params, format!("layer{i}.lambda2"))))
            } else {
                (None, None)
            };
            let eta = params.add(format!("layer{i}.eta"), ParamGroup::Other, Tensor::scalar(eta));
            let (gate, prior) = match opts.kind {
                PriorKind::Identity => (None, None),
                PriorKind::Learned => {
                    let gate = params.add(format!("layer{i}.gate"), ParamGroup::Other, Tensor::scalar(T::one()));
                    let mut net = PriorNet::new(&mut params, &format!("layer{i}.prior"), opts.prior)?;
                    weight_init(&mut net, &mut params, opts.seed.wrapping_add(i as u64));
                    (Some(gate), Some(net))
                }
            };
            layers.push(LayerHandles { lambda1, lambda2, eta, gate, prior });
        }
        Ok(Self {
            params,
            kind: opts.kind,
            init: opts.init,
            init_lambda,
            layers,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Builds the network for a batch of measurement vectors and returns the
    /// final ReLU-clipped `χ_I` as `[B, N]`, plus train-mode BN statistics
    /// per layer.
    pub fn build(&self, ctx: &Context<T>, tape: &mut Tape<T>, bound: &Bound, batch: &[&[T]], mode: Mode) -> Result<Built<T>> {
        let b = ctx.rhs_leaf(tape, batch)?;
        let zero = tape.scalar(T::zero());
        let mut x = match (self.init, self.init_lambda) {
            (InitKind::Tikhonov, Some([l1, l2])) => {
                let x = tape.reg_solve(ctx.system.clone(), bound.var(l1), bound.var(l2), b)?;
                ctx.relu_imag(tape, x)?
            }
            (InitKind::MinimumNorm { floor }, _) => {
                let f = tape.scalar(T::c(floor));
                tape.reg_solve(ctx.system.clone(), f, zero, b)?
            }
            _ => return Err(Error::Contract("Tikhonov initialization without parameters".into())),
        };
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut chi_i = None;
        for layer in &self.layers {
            let l1 = layer.lambda1.map_or(zero, |p| bound.var(p));
            let l2 = layer.lambda2.map_or(zero, |p| bound.var(p));
            let g = ctx.grad_f(tape, x, b, l1, l2)?;
            let step = tape.mul(bound.var(layer.eta), g)?;
            let z = tape.sub(x, step)?;
            let img = ctx.to_image(tape, z)?;
            let zr = tape.slice(img, 0, 1)?;
            let zi = tape.slice(img, 1, 1)?;
            let out = match (&layer.prior, layer.gate) {
                (Some(net), Some(gate)) => {
                    let (n, s) = net.forward(tape, bound, img, mode)?;
                    stats.push(s);
                    let gated = tape.mul(bound.var(gate), zi)?;
                    tape.add(gated, n)?
                }
                _ => {
                    stats.push(Vec::new());
                    zi
                }
            };
            let both = tape.concat(&[zr, out])?;
            x = ctx.to_flat(tape, both)?;
            chi_i = Some(out);
        }
        let last = chi_i.expect("at least one layer");
        let flat = tape.reshape(last, vec![batch.len(), ctx.cells()])?;
        Ok(Built {
            output: tape.relu(flat),
            stats,
        })
    }

    pub fn clamp(&mut self) {
        let floor = T::c(PARAM_FLOOR);
        let mut ids: Vec<ParamId> = self.init_lambda.iter().flatten().copied().collect();
        for l in &self.layers {
            ids.extend(l.lambda1);
            ids.extend(l.lambda2);
            ids.push(l.eta);
        }
        for id in ids {
            let v = self.params.scalar(id);
            if !(v >= floor) {
                self.params.set_scalar(id, floor);
            }
        }
    }
}

/// Output of a graph build.
pub struct Built<T> {
    /// `[B, N]` estimate.
    pub output: Var,
    /// Train-mode batch statistics per prior (empty for identity layers).
    pub stats: Vec<Vec<crate::learn::tape::BatchStats<T>>>,
}

/// Unrolled ADMM for anisotropic TV with learnable `λ_TV` and `ρ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TvNetwork<T> {
    pub params: ParamSet<T>,
    pub layers: usize,
    pub lambda_tv: ParamId,
    pub rho: ParamId,
}

impl<T: Scalar> TvNetwork<T> {
    pub fn new(layers: usize, lambda_tv: T, rho: T) -> Result<Self> {
        if layers == 0 || !(rho > T::zero()) || lambda_tv < T::zero() {
            return Err(Error::InvalidConfig("ADMM needs T >= 1, ρ > 0 and λ_TV >= 0".into()));
        }
        let mut params = ParamSet::new();
        let lambda_tv = params.add("tv.lambda", ParamGroup::Regularization, Tensor::scalar(lambda_tv));
        let rho = params.add("tv.rho", ParamGroup::Regularization, Tensor::scalar(rho));
        Ok(Self { params, layers, lambda_tv, rho })
    }

    pub fn model(&self) -> crate::inversion::TvModel<T> {
        crate::inversion::TvModel {
            layers: self.layers,
            lambda_tv: self.params.scalar(self.lambda_tv),
            rho: self.params.scalar(self.rho),
        }
    }

    pub fn build(&self, ctx: &Context<T>, tape: &mut Tape<T>, bound: &Bound, batch: &[&[T]]) -> Result<Var> {
        let [dx, dxt, dy, dyt] = ctx.diffs.clone();
        let b = ctx.rhs_leaf(tape, batch)?;
        let rho = bound.var(self.rho);
        let thr = tape.div(bound.var(self.lambda_tv), rho)?;
        let zero_state = Tensor::zeros(vec![batch.len(), ctx.system.dim()]);
        let mut zx = tape.leaf(zero_state.clone());
        let mut zy = tape.leaf(zero_state.clone());
        let mut ux = tape.leaf(zero_state.clone());
        let mut uy = tape.leaf(zero_state);
        let zero = tape.scalar(T::zero());
        let mut x = None;
        for _ in 0..self.layers {
            let vx = tape.sub(zx, ux)?;
            let vy = tape.sub(zy, uy)?;
            let px = tape.linear(vx, dxt.clone())?;
            let py = tape.linear(vy, dyt.clone())?;
            let p = tape.add(px, py)?;
            let p = tape.mul(rho, p)?;
            let rhs = tape.add(b, p)?;
            let xi = tape.reg_solve(ctx.system.clone(), zero, rho, rhs)?;
            let gx = tape.linear(xi, dx.clone())?;
            let gy = tape.linear(xi, dy.clone())?;
            let sx = tape.add(gx, ux)?;
            let sy = tape.add(gy, uy)?;
            zx = tape.soft_threshold(sx, thr)?;
            zy = tape.soft_threshold(sy, thr)?;
            ux = tape.sub(sx, zx)?;
            uy = tape.sub(sy, zy)?;
            x = Some(xi);
        }
        let x = x.expect("at least one layer");
        let img = ctx.to_image(tape, x)?;
        let im = tape.slice(img, 1, 1)?;
        let flat = tape.reshape(im, vec![batch.len(), ctx.cells()])?;
        Ok(tape.relu(flat))
    }

    pub fn clamp(&mut self) {
        let floor = T::c(PARAM_FLOOR);
        for id in [self.lambda_tv, self.rho] {
            if !(self.params.scalar(id) >= floor) {
                self.params.set_scalar(id, floor);
            }
        }
    }
}

pub const DI_BIAS_INIT: f64 = 1e-2;

/// Direct inversion: affine map from measurements to the stacked contrast,
/// then a cascade of gated priors.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectModel<T> {
    pub params: ParamSet<T>,
    pub weight: ParamId,
    pub bias: ParamId,
    pub stages: Vec<(ParamId, PriorNet<T>)>,
}

impl<T: Scalar> DirectModel<T> {
    /// Zero affine weights, He-initialized priors with zero heads. The `χ_I`
    /// half of the bias starts at [`DI_BIAS_INIT`]: an all-zero output would
    /// sit exactly on the final ReLU's kink and never receive a gradient.
    pub fn new(links: usize, cells: usize, stages: usize, prior: PriorConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let weight = params.add("di.weight", ParamGroup::Other, Tensor::zeros(vec![2 * cells, links]));
        let mut b = Tensor::zeros(vec![2 * cells]);
        b.data[cells..].iter_mut().for_each(|v| *v = T::c(DI_BIAS_INIT));
        let bias = params.add("di.bias", ParamGroup::Other, b);
        let mut out = Vec::with_capacity(stages);
        for i in 0..stages {
            let gate = params.add(format!("stage{i}.gate"), ParamGroup::Other, Tensor::scalar(T::one()));
            let mut net = PriorNet::new(&mut params, &format!("stage{i}.prior"), prior)?;
            weight_init(&mut net, &mut params, seed.wrapping_add(i as u64));
            out.push((gate, net));
        }
        Ok(Self { params, weight, bias, stages: out })
    }

    pub fn build(&self, ctx: &Context<T>, tape: &mut Tape<T>, bound: &Bound, batch: &[&[T]], mode: Mode) -> Result<Built<T>> {
        let m = ctx.measurements_leaf(tape, batch)?;
        let mut x = tape.affine(m, bound.var(self.weight), bound.var(self.bias))?;
        let mut stats = Vec::new();
        let mut chi_i = None;
        for (gate, net) in &self.stages {
            let img = ctx.to_image(tape, x)?;
            let zr = tape.slice(img, 0, 1)?;
            let zi = tape.slice(img, 1, 1)?;
            let (n, s) = net.forward(tape, bound, img, mode)?;
            stats.push(s);
            let gated = tape.mul(bound.var(*gate), zi)?;
            let out = tape.add(gated, n)?;
            let both = tape.concat(&[zr, out])?;
            x = ctx.to_flat(tape, both)?;
            chi_i = Some(out);
        }
        let last = match chi_i {
            Some(v) => v,
            None => {
                let img = ctx.to_image(tape, x)?;
                tape.slice(img, 1, 1)?
            }
        };
        let flat = tape.reshape(last, vec![batch.len(), ctx.cells()])?;
        Ok(Built {
            output: tape.relu(flat),
            stats,
        })
    }
}

/// Any network trainable by [`crate::learn::train`].
pub trait Trainable<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Builds the graph and returns `[B, N]` estimates.
    fn build_batch(&self, ctx: &Context<T>, tape: &mut Tape<T>, bound: &Bound, batch: &[&[T]], mode: Mode) -> Result<Built<T>>;
    /// Folds train-mode batch statistics into running estimates.
    fn absorb_stats(&mut self, stats: &[Vec<crate::learn::tape::BatchStats<T>>], momentum: T) -> Result<()>;
    /// Projects constrained scalars back onto their feasible range.
    fn clamp(&mut self);
}

fn absorb<T: Scalar>(nets: Vec<&mut PriorNet<T>>, stats: &[Vec<crate::learn::tape::BatchStats<T>>], momentum: T) -> Result<()> {
    let mut it = stats.iter().filter(|s| !s.is_empty());
    for net in nets {
        if let Some(s) = it.next() {
            net.update_running(s, momentum)?;
        }
    }
    Ok(())
}

impl<T: Scalar> Trainable<T> for UnrolledModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn build_batch(&self, ctx: &Context<T>, tape: &mut Tape<T>, bound: &Bound, batch: &[&[T]], mode: Mode) -> Result<Built<T>> {
        self.build(ctx, tape, bound, batch, mode)
    }
    fn absorb_stats(&mut self, stats: &[Vec<crate::learn::tape::BatchStats<T>>], momentum: T) -> Result<()> {
        absorb(self.layers.iter_mut().filter_map(|l| l.prior.as_mut()).collect(), stats, momentum)
    }
    fn clamp(&mut self) {
        UnrolledModel::clamp(self)
    }
}

impl<T: Scalar> Trainable<T> for TvNetwork<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn build_batch(&self, ctx: &Context<T>, tape: &mut Tape<T>, bound: &Bound, batch: &[&[T]], _mode: Mode) -> Result<Built<T>> {
        Ok(Built {
            output: self.build(ctx, tape, bound, batch)?,
            stats: Vec::new(),
        })
    }
    fn absorb_stats(&mut self, _stats: &[Vec<crate::learn::tape::BatchStats<T>>], _momentum: T) -> Result<()> {
        Ok(())
    }
    fn clamp(&mut self) {
        TvNetwork::clamp(self)
    }
}

impl<T: Scalar> Trainable<T> for DirectModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn build_batch(&self, ctx: &Context<T>, tape: &mut Tape<T>, bound: &Bound, batch: &[&[T]], mode: Mode) -> Result<Built<T>> {
        self.build(ctx, tape, bound, batch, mode)
    }
    fn absorb_stats(&mut self, stats: &[Vec<crate::learn::tape::BatchStats<T>>], momentum: T) -> Result<()> {
        absorb(self.stages.iter_mut().map(|(_, n)| n).collect(), stats, momentum)
    }
    fn clamp(&mut self) {}
}

/// Eval-mode inference for many measurement vectors, in input order.
pub fn infer<T: Scalar, M: Trainable<T> + ?Sized>(model: &M, ctx: &Context<T>, batch: &[&[T]]) -> Result<Vec<Vec<T>>> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let built = model.build_batch(ctx, &mut tape, &bound, batch, Mode::Eval)?;
    let n = ctx.cells();
    Ok(tape.value(built.output).data.chunks(n).map(<[T]>::to_vec).collect())
}

/// Single-sample reconstruction as an image on the inverse grid.
pub fn run_unrolled<T: Scalar>(model: &UnrolledModel<T>, ctx: &Context<T>, delta_p: &[T]) -> Result<GroundTruthMap<T>> {
    let mut out = infer(model, ctx, &[delta_p])?;
    Ok(GroundTruthMap {
        grid: *ctx.system.operator().grid(),
        values: out.pop().expect("one sample"),
    })
}

/// ADMM-TV reconstruction as an image.
pub fn run_tv<T: Scalar>(model: &TvNetwork<T>, ctx: &Context<T>, delta_p: &[T]) -> Result<GroundTruthMap<T>> {
    let values = crate::inversion::admm_tv(&model.model(), &ctx.system, delta_p)?;
    Ok(GroundTruthMap {
        grid: *ctx.system.operator().grid(),
        values,
    })
}

/// Direct-inversion reconstruction as an image.
pub fn direct_inversion<T: Scalar>(model: &DirectModel<T>, ctx: &Context<T>, delta_p: &[T]) -> Result<GroundTruthMap<T>> {
    let mut out = infer(model, ctx, &[delta_p])?;
    Ok(GroundTruthMap {
        grid: *ctx.system.operator().grid(),
        values: out.pop().expect("one sample"),
    })
}
