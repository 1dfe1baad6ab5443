use phaseless::eval::{evaluate_split, psnr, Psnr, PsnrConfig};
use phaseless::io::export::{export_image, read_csv_image, Image, ImageFormat};
use phaseless::io::store::{checkpoint_container, checkpoint_from_container, dataset_container, dataset_from_container};
use phaseless::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint, Container, RunConfig, StoredDataset};
use phaseless::learn::TrainReport;
use phaseless::methods::{context, trainer, train_model, training_samples, Method, Model, ModelSpec};
use phaseless::learn::PriorConfig;
use phaseless::scene::{build_dataset, seeded_rng, DatasetOptions, SceneConfig};
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.scene = SceneConfig::new(1.0, 1.0, 0.125, 8, (20, 20), (8, 8)).unwrap();
    c.model = ModelSpec { layers: 2, prior: PriorConfig { levels: 1, channels: 4 }, tv_layers: 3, seed: 1 };
    c.split = [0.5, 0.25, 0.25];
    c.batch_size = 2;
    c
}

fn small_dataset(count: usize, seed: u64) -> StoredDataset {
    let config = small_config();
    let mut options = DatasetOptions {
        distribution: config.distribution(),
        split: config.split,
        noise_sigma_db: 0.5,
        solver: config.solver(),
    };
    options.distribution.size_multiples = vec![0.5, 1.0];
    let dataset = build_dataset(&config.scene, count, seed, &options).unwrap();
    StoredDataset { config, seed, dataset }
}

// through bytes, as a file read would
fn reparse(c: &Container) -> Container {
    let mut back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    back.manifest = c.manifest.clone();
    back
}

#[test]
fn dataset_round_trip_is_exact() {
    let stored = small_dataset(8, 3);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &stored).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, stored);
    let again = dataset_container(&back).unwrap().to_bytes().unwrap();
    assert_eq!(again, dataset_container(&stored).unwrap().to_bytes().unwrap());
    assert_eq!(dataset_from_container(&reparse(&dataset_container(&stored).unwrap())).unwrap(), stored);
}

fn trained(method: Method) -> (Checkpoint, phaseless::learn::Context<f64>) {
    let stored = small_dataset(8, 4);
    let mut config = stored.config.clone();
    config.method = method;
    let ctx = context(&config.scene).unwrap();
    let mut model = Model::new(method, &ctx, config.model).unwrap();
    let mut tr = trainer(&model, config.train_config(5)).unwrap();
    let mut report = TrainReport::default();
    let data = training_samples(&stored.dataset.train);
    train_model(&mut model, &mut tr, &ctx, &data, 2, &mut report, |_, _| {}).unwrap();
    (Checkpoint { config, model, trainer: tr, report }, ctx)
}

#[test]
fn checkpoints_restore_every_piece_of_state() {
    for method in [Method::TkDprior, Method::Dprior, Method::Tv, Method::Di] {
        let (ckpt, ctx) = trained(method);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pdis");
        save_checkpoint(&path, &ckpt).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, ckpt.model, "{method}");
        assert_eq!(back.trainer.optimizer, ckpt.trainer.optimizer);
        assert_eq!(back.trainer.epoch, 2);
        assert_eq!(back.report, ckpt.report);
        let bytes = checkpoint_container(&back).unwrap().to_bytes().unwrap();
        assert_eq!(bytes, checkpoint_container(&ckpt).unwrap().to_bytes().unwrap());
        let dp = vec![-0.5; ctx.system.links()];
        assert_eq!(
            back.model.reconstruct(method, &ctx, &[&dp]).unwrap(),
            ckpt.model.reconstruct(method, &ctx, &[&dp]).unwrap()
        );
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let stored = small_dataset(8, 6);
    let config = stored.config.clone();
    let ctx = context(&config.scene).unwrap();
    let data = training_samples(&stored.dataset.train);
    let fresh = || Model::new(Method::TkDprior, &ctx, config.model).unwrap();

    let mut straight = fresh();
    let mut tr = trainer(&straight, config.train_config(2)).unwrap();
    let mut report = TrainReport::default();
    train_model(&mut straight, &mut tr, &ctx, &data, 3, &mut report, |_, _| {}).unwrap();

    let mut first = fresh();
    let mut tr1 = trainer(&first, config.train_config(2)).unwrap();
    let mut r1 = TrainReport::default();
    train_model(&mut first, &mut tr1, &ctx, &data, 1, &mut r1, |_, _| {}).unwrap();
    let c = checkpoint_container(&Checkpoint { config: config.clone(), model: first, trainer: tr1, report: r1 }).unwrap();
    let (mut resumed, ctx2) = checkpoint_from_container(&reparse(&c)).unwrap();
    train_model(&mut resumed.model, &mut resumed.trainer, &ctx2, &data, 2, &mut resumed.report, |_, _| {}).unwrap();
    assert_eq!(resumed.model, straight);
    assert_eq!(resumed.report, report);
}

#[test]
fn tik_init_runs_from_an_unrolled_checkpoint_only() {
    let (ckpt, ctx) = trained(Method::TkDprior);
    let dp = vec![-0.5; ctx.system.links()];
    assert!(ckpt.model.reconstruct(Method::TikInit, &ctx, &[&dp]).is_ok());
    assert!(ckpt.model.reconstruct(Method::Tv, &ctx, &[&dp]).is_err());
    let (tv, _) = trained(Method::Tv);
    assert!(tv.model.reconstruct(Method::TikInit, &ctx, &[&dp]).is_err());
}

#[test]
fn split_evaluation_is_ordered_and_repeatable() {
    let stored = small_dataset(8, 7);
    let (ckpt, ctx) = trained(Method::TkDprior);
    let run = |samples: &[phaseless::scene::Sample<f64>]| {
        evaluate_split(samples, PsnrConfig::default(), |dp| {
            Ok(ckpt.model.reconstruct(Method::TkDprior, &ctx, &[dp])?.pop().unwrap())
        })
        .unwrap()
    };
    let a = run(&stored.dataset.train);
    let b = run(&stored.dataset.train);
    assert_eq!(a, b);
    assert!(a.per_sample.windows(2).all(|w| w[0].0 < w[1].0));
    let one = run(&stored.dataset.test[..1]);
    assert_eq!(one.mean, one.per_sample[0].1);
    // a perfect reconstruction scores infinity
    let truth = stored.dataset.test[0].ground_truth.values.clone();
    let perfect = evaluate_split(&stored.dataset.test[..1], PsnrConfig::DatasetMax, |_| Ok(truth.clone())).unwrap();
    assert_eq!(perfect.mean, Psnr::Infinite);
}

#[test]
fn exported_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded_rng(1);
    let values: Vec<f64> = (0..35).map(|_| rng.gen_range(0.0..1.0f64).powi(7)).collect();
    let img = Image { nx: 7, ny: 5, values: &values };
    let csv = dir.path().join("a.csv");
    export_image(&img, &csv, ImageFormat::Csv, 0.8775).unwrap();
    let (nx, ny, back) = read_csv_image(&csv).unwrap();
    assert_eq!((nx, ny), (7, 5));
    assert!(back.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    let pgm = dir.path().join("a.pgm");
    export_image(&img, &pgm, ImageFormat::Pgm, 0.8775).unwrap();
    assert_eq!(std::fs::read(&pgm).unwrap().len(), "P5\n7 5\n65535\n".len() + 70);
    let manifest = std::fs::read_to_string(dir.path().join("a.pgm.manifest")).unwrap();
    assert!(manifest.contains("peak=0.8775\n") && manifest.contains("mapping=linear\n"));
    let bad = vec![f64::NAN; 35];
    assert!(export_image(&Image { nx: 7, ny: 5, values: &bad }, &pgm, ImageFormat::Pgm, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_any_finite_value(bits in proptest::collection::vec(any::<u64>(), 6)) {
        let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).map(|v| if v.is_finite() { v } else { 0.0 }).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        export_image(&Image { nx: 3, ny: 2, values: &values }, &path, ImageFormat::Csv, 1.0).unwrap();
        let (_, _, back) = read_csv_image(&path).unwrap();
        prop_assert!(back.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn container_round_trip(data in proptest::collection::vec(any::<u64>(), 0..40), split in 0usize..40) {
        let split = split.min(data.len());
        let mut c = Container::new();
        c.push_f64("f", vec![split], data[..split].iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
        c.push_u64("u", vec![data.len() - split], data[split..].to_vec()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn psnr_is_symmetric(a in proptest::collection::vec(0.0f64..1.0, 9), b in proptest::collection::vec(0.0f64..1.0, 9)) {
        let cfg = PsnrConfig::Fixed(0.8775);
        prop_assert_eq!(psnr(&a, &b, cfg).unwrap(), psnr(&b, &a, cfg).unwrap());
    }
}
