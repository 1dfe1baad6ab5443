//! Datasets and training checkpoints as PDIS containers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::forward::MeasurementSet;
use crate::io::config::RunConfig;
use crate::io::pdis::{Container, Manifest};
use crate::learn::model::Context;
use crate::learn::nn::PriorNet;
use crate::learn::train::{OptimizerState, TrainReport, Trainer};
use crate::methods::{context, Model, Network};
use crate::scalar::cplx;
use crate::scene::{enumerate_links, Dataset, GroundTruthMap, Sample, ScattererSpec, Shape};

pub const DATASET_FILE: &str = "dataset.pdis";
const SPLITS: [&str; 3] = ["train", "val", "test"];
const OBJECT_COLUMNS: usize = 7;

fn put_config(c: &mut Container, config: &RunConfig) {
    for (k, v) in config.to_pairs() {
        c.set(format!("config.{k}"), v);
    }
}

fn get_config(m: &Manifest) -> Result<RunConfig> {
    let pairs = m
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    RunConfig::from_pairs(&pairs)
}

fn check_kind(c: &Container, kind: &str) -> Result<()> {
    match c.meta("kind")? {
        k if k == kind => Ok(()),
        k => Err(Error::Format(format!("expected a {kind} file, found {k}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredDataset {
    pub config: RunConfig,
    pub seed: u64,
    pub dataset: Dataset<f64>,
}

impl StoredDataset {
    pub fn split(&self, name: &str) -> Result<&[Sample<f64>]> {
        match name {
            "train" => Ok(&self.dataset.train),
            "val" => Ok(&self.dataset.val),
            "test" => Ok(&self.dataset.test),
            _ => Err(Error::InvalidConfig(format!("unknown split {name:?} (train, val or test)"))),
        }
    }
}

pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join(DATASET_FILE)
}

pub fn dataset_container(stored: &StoredDataset) -> Result<Container> {
    let mut c = Container::new();
    c.set("kind", "dataset");
    c.set("seed", stored.seed);
    put_config(&mut c, &stored.config);
    let links = stored.config.scene.link_count();
    let cells = stored.config.scene.n_cells();
    for (name, samples) in SPLITS.iter().zip([&stored.dataset.train, &stored.dataset.val, &stored.dataset.test]) {
        let n = samples.len();
        c.set(format!("{name}.count"), n);
        let mut dp = Vec::with_capacity(n * links);
        let mut truth = Vec::with_capacity(n * cells);
        let mut objects = Vec::new();
        for (row, s) in samples.iter().enumerate() {
            if s.measurements.delta_p.len() != links || s.ground_truth.values.len() != cells {
                return Err(Error::Format(format!("sample {} does not match the configured scene", s.index)));
            }
            dp.extend_from_slice(&s.measurements.delta_p);
            truth.extend_from_slice(&s.ground_truth.values);
            for o in &s.scatterers {
                let shape = match o.shape {
                    Shape::Circle => 0.0,
                    Shape::Square => 1.0,
                };
                objects.extend([row as f64, shape, o.center.0, o.center.1, o.size, o.eps_r.re, o.eps_r.im]);
            }
        }
        c.push_f64(format!("{name}/delta_p"), vec![n, links], dp)?;
        c.push_f64(format!("{name}/truth"), vec![n, cells], truth)?;
        c.push_u64(format!("{name}/index"), vec![n], samples.iter().map(|s| s.index as u64).collect())?;
        c.push_u64(format!("{name}/seed"), vec![n], samples.iter().map(|s| s.seed).collect())?;
        let noise = samples.iter().map(|s| s.measurements.noise_sigma_db.unwrap_or(0.0)).collect();
        c.push_f64(format!("{name}/noise"), vec![n], noise)?;
        let k = objects.len() / OBJECT_COLUMNS;
        c.push_f64(format!("{name}/objects"), vec![k, OBJECT_COLUMNS], objects)?;
    }
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<StoredDataset> {
    check_kind(c, "dataset")?;
    let config = get_config(&c.manifest)?;
    let seed = c.meta_parse("seed")?;
    let links = enumerate_links(config.scene.node_count)?;
    let grid = config.scene.inverse();
    let (l, cells) = (links.len(), grid.len());
    let mut splits: Vec<Vec<Sample<f64>>> = Vec::new();
    for name in SPLITS {
        let n: usize = c.meta_parse(&format!("{name}.count"))?;
        let shape_ok = |shape: &[usize], want: &[usize], what: &str| {
            if shape == want {
                Ok(())
            } else {
                Err(Error::Format(format!("{name}/{what}: shape {shape:?}, expected {want:?}")))
            }
        };
        let (s, dp) = c.f64(&format!("{name}/delta_p"))?;
        shape_ok(s, &[n, l], "delta_p")?;
        let (s, truth) = c.f64(&format!("{name}/truth"))?;
        shape_ok(s, &[n, cells], "truth")?;
        let (s, index) = c.u64(&format!("{name}/index"))?;
        shape_ok(s, &[n], "index")?;
        let (_, seeds) = c.u64(&format!("{name}/seed"))?;
        let (_, noise) = c.f64(&format!("{name}/noise"))?;
        let (s, objects) = c.f64(&format!("{name}/objects"))?;
        if s.len() != 2 || s[1] != OBJECT_COLUMNS {
            return Err(Error::Format(format!("{name}/objects: bad shape {s:?}")));
        }
        let mut samples: Vec<Sample<f64>> = (0..n)
            .map(|i| Sample {
                index: index[i] as usize,
                seed: seeds[i],
                measurements: MeasurementSet {
                    delta_p: dp[i * l..(i + 1) * l].to_vec(),
                    links: links.clone(),
                    noise_sigma_db: (noise[i] > 0.0).then_some(noise[i]),
                },
                ground_truth: GroundTruthMap {
                    grid,
                    values: truth[i * cells..(i + 1) * cells].to_vec(),
                },
                scatterers: Vec::new(),
            })
            .collect();
        for o in objects.chunks_exact(OBJECT_COLUMNS) {
            let row = o[0] as usize;
            let shape = if o[1] == 0.0 { Shape::Circle } else { Shape::Square };
            let sample = samples
                .get_mut(row)
                .ok_or_else(|| Error::Format(format!("{name}/objects: row {row} out of range")))?;
            sample
                .scatterers
                .push(ScattererSpec::new(shape, (o[2], o[3]), o[4], cplx(o[5], o[6])));
        }
        splits.push(samples);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(StoredDataset {
        config,
        seed,
        dataset: Dataset { train, val, test },
    })
}

pub fn save_dataset(dir: &Path, stored: &StoredDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    dataset_container(stored)?.write(&dataset_path(dir))
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    dataset_from_container(&Container::read(&dataset_path(dir))?)
}

/// A trained (or partially trained) model with everything needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model<f64>,
    pub trainer: Trainer<f64>,
    pub report: TrainReport,
}

fn priors(model: &Model<f64>) -> Vec<&PriorNet<f64>> {
    match &model.net {
        Network::Unrolled(m) => m.layers.iter().filter_map(|l| l.prior.as_ref()).collect(),
        Network::Direct(m) => m.stages.iter().map(|(_, n)| n).collect(),
        Network::Tv(_) => Vec::new(),
    }
}

fn priors_mut(model: &mut Model<f64>) -> Vec<&mut PriorNet<f64>> {
    match &mut model.net {
        Network::Unrolled(m) => m.layers.iter_mut().filter_map(|l| l.prior.as_mut()).collect(),
        Network::Direct(m) => m.stages.iter_mut().map(|(_, n)| n).collect(),
        Network::Tv(_) => Vec::new(),
    }
}

pub fn checkpoint_container(ckpt: &Checkpoint) -> Result<Container> {
    let mut c = Container::new();
    c.set("kind", "checkpoint");
    put_config(&mut c, &ckpt.config);
    c.set("method", ckpt.model.method);
    c.set("epoch", ckpt.trainer.epoch);
    c.set("train_seed", ckpt.trainer.config.seed);
    let opt = &ckpt.trainer.optimizer;
    let params = ckpt.model.trainable().params();
    for (i, p) in params.iter().enumerate() {
        c.set(format!("group.{}", p.name), p.group.as_str());
        c.push_f64(format!("param/{}", p.name), p.value.shape.clone(), p.value.data.clone())?;
        c.push_f64(format!("adam/m/{}", p.name), vec![opt.m[i].len()], opt.m[i].clone())?;
        c.push_f64(format!("adam/v/{}", p.name), vec![opt.v[i].len()], opt.v[i].clone())?;
    }
    c.push_u64("adam/step", vec![1], vec![opt.step])?;
    // the shuffle generator of the next epoch is determined by these two
    c.push_u64("rng/state", vec![2], vec![ckpt.trainer.config.seed, ckpt.trainer.epoch as u64])?;
    let mut k = 0;
    for net in priors(&ckpt.model) {
        for (mean, var) in net.running_stats() {
            c.push_f64(format!("bn/{k}/mean"), vec![mean.len()], mean.to_vec())?;
            c.push_f64(format!("bn/{k}/var"), vec![var.len()], var.to_vec())?;
            k += 1;
        }
    }
    c.push_f64("loss/epoch", vec![ckpt.report.epoch_loss.len()], ckpt.report.epoch_loss.clone())?;
    c.push_f64("loss/step", vec![ckpt.report.step_loss.len()], ckpt.report.step_loss.clone())?;
    Ok(c)
}

/// Rebuilds a checkpoint and the inversion context of its scene.
pub fn checkpoint_from_container(c: &Container) -> Result<(Checkpoint, Context<f64>)> {
    check_kind(c, "checkpoint")?;
    let config = get_config(&c.manifest)?;
    let method = crate::methods::Method::parse(c.meta("method")?)?;
    let ctx = context(&config.scene)?;
    let mut model = Model::new(method, &ctx, config.model)?;
    let train_seed: u64 = c.meta_parse("train_seed")?;
    let mut trainer = Trainer::new(model.trainable().params(), config.train_config(train_seed))?;
    trainer.epoch = c.meta_parse("epoch")?;
    let params = model.trainable_mut().params_mut();
    let mut opt = OptimizerState::new(params, config.adam);
    for (i, p) in params.iter_mut().enumerate() {
        let group = c.meta(&format!("group.{}", p.name))?;
        if group != p.group.as_str() {
            return Err(Error::Format(format!("parameter {} is in group {group}, expected {}", p.name, p.group.as_str())));
        }
        let (shape, data) = c.f64(&format!("param/{}", p.name))?;
        if shape != p.value.shape.as_slice() {
            return Err(Error::Format(format!("parameter {}: shape {shape:?}, expected {:?}", p.name, p.value.shape)));
        }
        p.value.data.copy_from_slice(data);
        for (buf, key) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
            let (_, d) = c.f64(&format!("adam/{key}/{}", p.name))?;
            if d.len() != buf.len() {
                return Err(Error::Format(format!("adam/{key}/{}: wrong length", p.name)));
            }
            buf.copy_from_slice(d);
        }
    }
    let expected = c.records.iter().filter(|r| r.name.starts_with("param/")).count();
    if expected != params.len() {
        return Err(Error::Format(format!("checkpoint holds {expected} parameters, model has {}", params.len())));
    }
    opt.step = c.u64("adam/step")?.1[0];
    trainer.optimizer = opt;
    let mut k = 0;
    for net in priors_mut(&mut model) {
        let n = net.running_stats().len();
        let mut stats = Vec::with_capacity(n);
        for _ in 0..n {
            stats.push((c.f64(&format!("bn/{k}/mean"))?.1.to_vec(), c.f64(&format!("bn/{k}/var"))?.1.to_vec()));
            k += 1;
        }
        net.set_running_stats(&stats)?;
    }
    let report = TrainReport {
        epoch_loss: c.f64("loss/epoch")?.1.to_vec(),
        step_loss: c.f64("loss/step")?.1.to_vec(),
    };
    Ok((
        Checkpoint {
            config,
            model,
            trainer,
            report,
        },
        ctx,
    ))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    checkpoint_container(ckpt)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Context<f64>)> {
    checkpoint_from_container(&Container::read(path)?)
}

/// `epoch,loss` lines of the per-epoch mean training loss.
pub fn loss_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in report.epoch_loss.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1).expect("write to string");
    }
    out
}
