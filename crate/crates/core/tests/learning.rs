use phaseless::inversion::InversionSystem;
use phaseless::learn::nn::{Mode, ParamGroup};
use phaseless::learn::{
    direct_inversion, infer, run_unrolled, train, weight_init, AdamConfig, Context, DirectModel, InitKind,
    OptimizerState, ParamSet, PriorConfig, PriorKind, PriorNet, Tape, Tensor, TrainConfig, TrainSample, Trainable,
    UnrolledModel, UnrolledOptions,
};
use phaseless::scene::{seeded_rng, SceneConfig};
use phaseless::xpra::{assemble_kernel, build_diff_operators};
use rand::Rng;

fn context(n: usize, m: usize) -> Context<f64> {
    let cfg = SceneConfig::new(1.5, 1.5, 0.125, m, (48, 48), (n, n)).unwrap();
    let op = assemble_kernel(&cfg).unwrap();
    Context::new(InversionSystem::normalized(op, build_diff_operators(n, n).unwrap()).unwrap())
}

fn data(ctx: &Context<f64>, count: usize, seed: u64) -> Vec<TrainSample<f64>> {
    let mut rng = seeded_rng(seed);
    (0..count)
        .map(|_| TrainSample {
            delta_p: (0..ctx.system.links()).map(|_| rng.gen_range(-2.0..0.5)).collect(),
            target: (0..ctx.cells()).map(|_| rng.gen_range(0.0..0.4)).collect(),
        })
        .collect()
}

fn options(layers: usize, kind: PriorKind) -> UnrolledOptions {
    UnrolledOptions {
        layers,
        kind,
        init: InitKind::Tikhonov,
        prior: PriorConfig { levels: 2, channels: 4 },
        seed: 9,
    }
}

#[test]
fn untrained_learned_network_equals_classical_pgm() {
    let ctx = context(12, 12);
    let learned = UnrolledModel::new(&ctx.system, options(3, PriorKind::Learned)).unwrap();
    let identity = UnrolledModel::new(&ctx.system, options(3, PriorKind::Identity)).unwrap();
    for sample in data(&ctx, 3, 1) {
        let a = run_unrolled(&learned, &ctx, &sample.delta_p).unwrap();
        let b = run_unrolled(&identity, &ctx, &sample.delta_p).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn zero_step_returns_initialization() {
    let ctx = context(10, 10);
    let mut model = UnrolledModel::new(&ctx.system, options(1, PriorKind::Identity)).unwrap();
    let eta = model.layers[0].eta;
    model.params.set_scalar(eta, 0.0);
    let dp = &data(&ctx, 1, 2)[0].delta_p;
    let [l1, l2] = model.init_lambda.unwrap().map(|id| model.params.scalar(id));
    let init = ctx.system.tikhonov_init(l1, l2, dp).unwrap();
    let out = run_unrolled(&model, &ctx, dp).unwrap();
    let worst = out.values.iter().zip(&init.chi_i).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn outputs_are_nonnegative_and_deterministic() {
    let ctx = context(10, 10);
    let mut model = UnrolledModel::new(&ctx.system, options(2, PriorKind::Learned)).unwrap();
    let mut rng = seeded_rng(4);
    for p in model.params.iter_mut() {
        p.value.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    model.clamp();
    let samples = data(&ctx, 4, 3);
    let batch: Vec<&[f64]> = samples.iter().map(|s| s.delta_p.as_slice()).collect();
    let a = infer(&model, &ctx, &batch).unwrap();
    let b = infer(&model, &ctx, &batch).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().flatten().all(|&v| v >= 0.0));
    // eval mode makes each sample independent of its batch mates
    let single = infer(&model, &ctx, &batch[1..2]).unwrap();
    assert_eq!(single[0], a[1]);
}

#[test]
fn adam_with_zero_rates_is_identity() {
    let ctx = context(8, 8);
    let mut model = UnrolledModel::new(&ctx.system, options(2, PriorKind::Learned)).unwrap();
    let before = model.params.clone();
    let config = AdamConfig { lr_regularization: 0.0, lr_other: 0.0, ..AdamConfig::default() };
    let mut opt = OptimizerState::new(&model.params, config);
    let grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.3; p.value.len()]).collect();
    for _ in 0..3 {
        opt.update(&mut model.params, &grads).unwrap();
    }
    assert_eq!(model.params, before);
    assert_eq!(opt.step, 3);
}

#[test]
fn one_sample_epoch_with_zero_rates() {
    let ctx = context(8, 8);
    let mut model = UnrolledModel::new(&ctx.system, options(2, PriorKind::Learned)).unwrap();
    let before = model.params.clone();
    let config = TrainConfig {
        epochs: 1,
        batch_size: 8,
        seed: 0,
        adam: AdamConfig { lr_regularization: 0.0, lr_other: 0.0, ..AdamConfig::default() },
    };
    let report = train(&mut model, &ctx, &data(&ctx, 1, 5), config).unwrap();
    assert_eq!(report.epoch_loss.len(), 1);
    assert_eq!(model.params, before);
}

#[test]
fn training_is_reproducible_and_moves_parameters() {
    let ctx = context(8, 8);
    let samples = data(&ctx, 6, 6);
    let config = TrainConfig { epochs: 2, batch_size: 4, seed: 3, adam: AdamConfig::default() };
    let run = || {
        let mut model = UnrolledModel::new(&ctx.system, options(2, PriorKind::Learned)).unwrap();
        let report = train(&mut model, &ctx, &samples, config).unwrap();
        (model, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.params, b.params);
    assert_eq!(ra, rb);
    assert_eq!(ra.step_loss.len(), 4);
    let fresh = UnrolledModel::new(&ctx.system, options(2, PriorKind::Learned)).unwrap();
    assert_ne!(a.params, fresh.params);
    assert!(a.params.all_finite());
    // regularization scalars stay positive after clamping
    for p in a.params.iter().filter(|p| p.group == ParamGroup::Regularization) {
        assert!(p.value.data[0] >= 1e-12, "{} = {}", p.name, p.value.data[0]);
    }
}

#[test]
fn every_gradient_is_finite() {
    let ctx = context(12, 12);
    let mut model = UnrolledModel::new(&ctx.system, options(2, PriorKind::Learned)).unwrap();
    let samples = data(&ctx, 4, 7);
    // one step first so that the heads are no longer zero
    let config = TrainConfig { epochs: 1, batch_size: 4, seed: 1, adam: AdamConfig::default() };
    train(&mut model, &ctx, &samples, config).unwrap();
    let batch: Vec<&[f64]> = samples.iter().map(|s| s.delta_p.as_slice()).collect();
    let target: Vec<f64> = samples.iter().flat_map(|s| s.target.clone()).collect();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let built = model.build_batch(&ctx, &mut tape, &bound, &batch, Mode::Train).unwrap();
    let loss = tape.mse(built.output, &target).unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = phaseless::learn::train::param_grads(model.params(), &g, bound.vars());
    assert!(grads.iter().flatten().all(|v| v.is_finite()));
    let nonzero = grads.iter().filter(|g| g.iter().any(|v| *v != 0.0)).count();
    assert!(nonzero > model.params.len() / 2, "{nonzero} of {}", model.params.len());
}

#[test]
fn he_initialization_variance() {
    let mut params = ParamSet::<f64>::new();
    let mut net = PriorNet::new(&mut params, "p", PriorConfig { levels: 1, channels: 64 }).unwrap();
    weight_init(&mut net, &mut params, 42);
    let w = &params.get(net.encoder[0][1].weight).value;
    let fan_in = w.shape[1] * w.shape[2] * w.shape[3];
    assert!(w.len() >= 10_000);
    let mean = w.data.iter().sum::<f64>() / w.len() as f64;
    let var = w.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
    let want = 2.0 / fan_in as f64;
    assert!((var / want - 1.0).abs() < 0.2, "variance {var}, expected {want}");
}

#[test]
fn direct_inversion_with_zero_map_is_zero() {
    let ctx = context(10, 10);
    let mut model = DirectModel::new(ctx.system.links(), ctx.cells(), 2, PriorConfig { levels: 1, channels: 4 }, 0).unwrap();
    model.params.get_mut(model.bias).value.data.iter_mut().for_each(|v| *v = 0.0);
    let out = direct_inversion(&model, &ctx, &data(&ctx, 1, 8)[0].delta_p).unwrap();
    assert_eq!((out.grid.nx, out.grid.ny), (10, 10));
    assert!(out.values.iter().all(|&v| v == 0.0));
}

#[test]
fn direct_inversion_receives_gradients_from_the_start() {
    let ctx = context(8, 8);
    let mut model = DirectModel::new(ctx.system.links(), ctx.cells(), 1, PriorConfig { levels: 1, channels: 4 }, 0).unwrap();
    let before = model.params.get(model.weight).value.clone();
    let config = TrainConfig { epochs: 1, batch_size: 4, seed: 0, adam: AdamConfig::default() };
    train(&mut model, &ctx, &data(&ctx, 4, 9), config).unwrap();
    assert_ne!(model.params.get(model.weight).value, before);
}

#[test]
fn linear_loss_gradient_is_exact() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.0]).unwrap());
    let c = tape.leaf(Tensor::new(vec![4], vec![1.5, -2.0, 0.25, 7.0]).unwrap());
    let p = tape.mul(c, x).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get_or_zero(x, 4), vec![1.5, -2.0, 0.25, 7.0]);
    // relu passes nothing back at or below zero
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-0.5, 0.0, 0.5]).unwrap());
    let r = tape.relu(x);
    let loss = tape.sum(r);
    assert_eq!(tape.backward(loss).unwrap().get_or_zero(x, 3), vec![0.0, 0.0, 1.0]);
}
