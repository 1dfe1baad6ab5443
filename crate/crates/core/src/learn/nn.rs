//! Parameter storage and the convolutional prior network.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::learn::tape::{BatchStats, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::scene::seeded_rng;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Regularization scalars (λ, λ_TV, ρ).
    Regularization,
    /// Everything else: step sizes, gates, network weights.
    Other,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Regularization => "regularization",
            ParamGroup::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regularization" => Ok(ParamGroup::Regularization),
            "other" => Ok(ParamGroup::Other),
            _ => Err(Error::Format(format!("unknown parameter group {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn scalar(&self, id: ParamId) -> T {
        self.params[id.0].value.data[0]
    }

    pub fn set_scalar(&mut self, id: ParamId, v: T) {
        self.params[id.0].value.data[0] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Puts every parameter on the tape as a leaf, in order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Convolution followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Convolution with bias (decoder upsampling path and output head).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// U-Net shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorConfig {
    pub levels: usize,
    pub channels: usize,
}

impl PriorConfig {
    /// 2 levels, 16 base channels.
    pub const DESK: PriorConfig = PriorConfig { levels: 2, channels: 16 };
}

/// Mini U-Net mapping `[B, 2, H, W]` (Z_R, Z_I) to `[B, 1, H, W]`.
///
/// Encoder level `i` has `channels·2ⁱ` feature maps (two conv-BN-ReLU blocks,
/// then 2×2 max-pool); the bottleneck doubles once more; each decoder level
/// upsamples, convolves, concatenates the matching encoder output and applies
/// two conv-BN-ReLU blocks. A 1×1 convolution produces the single output
/// channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorNet<T> {
    pub config: PriorConfig,
    pub encoder: Vec<[ConvBn<T>; 2]>,
    pub bottleneck: [ConvBn<T>; 2],
    pub up: Vec<Conv>,
    pub decoder: Vec<[ConvBn<T>; 2]>,
    pub head: Conv,
}

impl<T: Scalar> PriorNet<T> {
    /// Allocates parameters (all zero) under `prefix`; call [`weight_init`].
    pub fn new(params: &mut ParamSet<T>, prefix: &str, config: PriorConfig) -> Result<Self> {
        if config.levels == 0 || config.channels == 0 {
            return Err(Error::InvalidConfig("prior needs at least one level and one channel".into()));
        }
        let ch = |l: usize| config.channels << l;
        let mut encoder = Vec::new();
        let mut cin = 2;
        for l in 0..config.levels {
            encoder.push([
                conv_bn(params, &format!("{prefix}.enc{l}.0"), cin, ch(l)),
                conv_bn(params, &format!("{prefix}.enc{l}.1"), ch(l), ch(l)),
            ]);
            cin = ch(l);
        }
        let lb = config.levels;
        let bottleneck = [
            conv_bn(params, &format!("{prefix}.mid.0"), cin, ch(lb)),
            conv_bn(params, &format!("{prefix}.mid.1"), ch(lb), ch(lb)),
        ];
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..config.levels).rev() {
            up.push(conv(params, &format!("{prefix}.up{l}"), ch(l + 1), ch(l), 3));
            decoder.push([
                conv_bn(params, &format!("{prefix}.dec{l}.0"), 2 * ch(l), ch(l)),
                conv_bn(params, &format!("{prefix}.dec{l}.1"), ch(l), ch(l)),
            ]);
        }
        let head = conv(params, &format!("{prefix}.head"), ch(0), 1, 1);
        Ok(Self {
            config,
            encoder,
            bottleneck,
            up,
            decoder,
            head,
        })
    }

    fn conv_bns(&self) -> impl Iterator<Item = &ConvBn<T>> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.bottleneck.iter())
            .chain(self.decoder.iter().flatten())
    }

    fn conv_bns_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        self.encoder
            .iter_mut()
            .flatten()
            .chain(self.bottleneck.iter_mut())
            .chain(self.decoder.iter_mut().flatten())
    }

    /// Running statistics of every batch-norm, in a fixed order.
    pub fn running_stats(&self) -> Vec<(&[T], &[T])> {
        self.conv_bns()
            .map(|c| (c.running_mean.as_slice(), c.running_var.as_slice()))
            .collect()
    }

    pub fn set_running_stats(&mut self, stats: &[(Vec<T>, Vec<T>)]) -> Result<()> {
        let slots: Vec<&mut ConvBn<T>> = self.conv_bns_mut().collect();
        if slots.len() != stats.len() {
            return Err(Error::Format("running statistics count mismatch".into()));
        }
        for (slot, (m, v)) in slots.into_iter().zip(stats) {
            if m.len() != slot.running_mean.len() || v.len() != slot.running_var.len() {
                return Err(Error::Format("running statistics length mismatch".into()));
            }
            slot.running_mean.clone_from(m);
            slot.running_var.clone_from(v);
        }
        Ok(())
    }

    /// Exponential update `r ← (1−m) r + m·batch` from train-mode statistics
    /// (in the order they were produced by [`PriorNet::forward`]).
    pub fn update_running(&mut self, stats: &[BatchStats<T>], momentum: T) -> Result<()> {
        let slots: Vec<&mut ConvBn<T>> = self.conv_bns_mut().collect();
        if slots.len() != stats.len() {
            return Err(Error::Contract("batch statistics count mismatch".into()));
        }
        for (slot, s) in slots.into_iter().zip(stats) {
            for (r, &b) in slot.running_mean.iter_mut().zip(&s.mean) {
                *r = (T::one() - momentum) * *r + momentum * b;
            }
            for (r, &b) in slot.running_var.iter_mut().zip(&s.var) {
                *r = (T::one() - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }

    /// Builds the network on the tape. Spatial sizes not divisible by
    /// `2^levels` are edge-padded and cropped back.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, input: Var, mode: Mode) -> Result<(Var, Vec<BatchStats<T>>)> {
        let shape = tape.value(input).shape.clone();
        let (h, w) = match shape[..] {
            [_, 2, h, w] => (h, w),
            _ => return Err(Error::Contract(format!("prior input must be [B, 2, H, W], got {shape:?}"))),
        };
        let m = 1usize << self.config.levels;
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut x = if (hp, wp) != (h, w) { tape.pad_replicate(input, hp, wp)? } else { input };
        let mut stats = Vec::new();
        let mut skips = Vec::new();
        for block in &self.encoder {
            for cb in block {
                x = apply_conv_bn(tape, bound, cb, x, mode, &mut stats)?;
            }
            skips.push(x);
            x = tape.max_pool2(x)?;
        }
        for cb in &self.bottleneck {
            x = apply_conv_bn(tape, bound, cb, x, mode, &mut stats)?;
        }
        for (upc, block) in self.up.iter().zip(&self.decoder) {
            x = tape.upsample2(x)?;
            x = tape.conv2d(x, bound.var(upc.weight), Some(bound.var(upc.bias)))?;
            let skip = skips.pop().expect("one skip per level");
            x = tape.concat(&[skip, x])?;
            for cb in block {
                x = apply_conv_bn(tape, bound, cb, x, mode, &mut stats)?;
            }
        }
        x = tape.conv2d(x, bound.var(self.head.weight), Some(bound.var(self.head.bias)))?;
        if (hp, wp) != (h, w) {
            x = tape.crop(x, h, w)?;
        }
        Ok((x, stats))
    }
}

fn apply_conv_bn<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cb: &ConvBn<T>,
    x: Var,
    mode: Mode,
    stats: &mut Vec<BatchStats<T>>,
) -> Result<Var> {
    let y = tape.conv2d(x, bound.var(cb.weight), None)?;
    let (g, b) = (bound.var(cb.gamma), bound.var(cb.beta));
    let eps = T::c(BN_EPS);
    let y = match mode {
        Mode::Train => {
            let (v, s) = tape.batch_norm_train(y, g, b, eps)?;
            stats.push(s);
            v
        }
        Mode::Eval => tape.batch_norm_eval(y, g, b, &cb.running_mean, &cb.running_var, eps)?,
    };
    Ok(tape.relu(y))
}

fn conv_bn<T: Scalar>(params: &mut ParamSet<T>, name: &str, cin: usize, cout: usize) -> ConvBn<T> {
    ConvBn {
        weight: params.add(format!("{name}.weight"), ParamGroup::Other, Tensor::zeros(vec![cout, cin, 3, 3])),
        gamma: params.add(format!("{name}.gamma"), ParamGroup::Other, Tensor::zeros(vec![cout])),
        beta: params.add(format!("{name}.beta"), ParamGroup::Other, Tensor::zeros(vec![cout])),
        running_mean: vec![T::zero(); cout],
        running_var: vec![T::one(); cout],
    }
}

fn conv<T: Scalar>(params: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
    Conv {
        weight: params.add(format!("{name}.weight"), ParamGroup::Other, Tensor::zeros(vec![cout, cin, k, k])),
        bias: params.add(format!("{name}.bias"), ParamGroup::Other, Tensor::zeros(vec![cout])),
    }
}

/// He-normal kernels (`σ² = 2/fan_in`), unit BN scale, zero shifts and
/// biases, zero output head; running statistics reset to (0, 1).
pub fn weight_init<T: Scalar>(net: &mut PriorNet<T>, params: &mut ParamSet<T>, seed: u64) {
    let mut rng = seeded_rng(seed);
    let mut he = |id: ParamId, params: &mut ParamSet<T>| {
        let p = params.get_mut(id);
        let fan_in: usize = p.value.shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        for v in p.value.data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::c(std * z);
        }
    };
    for cb in net.conv_bns_mut() {
        he(cb.weight, params);
        params.get_mut(cb.gamma).value.data.iter_mut().for_each(|v| *v = T::one());
        params.get_mut(cb.beta).value.data.iter_mut().for_each(|v| *v = T::zero());
        cb.running_mean.iter_mut().for_each(|v| *v = T::zero());
        cb.running_var.iter_mut().for_each(|v| *v = T::one());
    }
    for upc in &net.up {
        he(upc.weight, params);
        params.get_mut(upc.bias).value.data.iter_mut().for_each(|v| *v = T::zero());
    }
    for id in [net.head.weight, net.head.bias] {
        params.get_mut(id).value.data.iter_mut().for_each(|v| *v = T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(seed: u64) -> (PriorNet<f64>, ParamSet<f64>) {
        let mut params = ParamSet::new();
        let mut n = PriorNet::new(&mut params, "p", PriorConfig::DESK).unwrap();
        weight_init(&mut n, &mut params, seed);
        (n, params)
    }

    fn run(n: &PriorNet<f64>, params: &ParamSet<f64>, h: usize, w: usize, mode: Mode) -> Tensor<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let data = (0..2 * 2 * h * w).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let x = tape.leaf(Tensor::new(vec![2, 2, h, w], data).unwrap());
        let (y, _) = n.forward(&mut tape, &bound, x, mode).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn output_keeps_spatial_shape() {
        let (n, p) = net(1);
        for (h, w) in [(24, 24), (48, 48), (10, 14)] {
            assert_eq!(run(&n, &p, h, w, Mode::Train).shape, vec![2, 1, h, w]);
        }
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let (n, p) = net(2);
        for mode in [Mode::Train, Mode::Eval] {
            assert!(run(&n, &p, 8, 8, mode).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(net(5).1, net(5).1);
        assert_ne!(net(5).1, net(6).1);
    }

    #[test]
    fn skip_junctions_double_channels() {
        let (n, p) = net(3);
        for (l, block) in n.decoder.iter().enumerate() {
            let level = n.config.levels - 1 - l;
            let shape = &p.get(block[0].weight).value.shape;
            assert_eq!(shape[1], 2 * (n.config.channels << level));
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let (n, p) = net(4);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 8, 8]));
        assert!(n.forward(&mut tape, &bound, x, Mode::Eval).is_err());
    }
}
