//! Flat `key = value` run configuration. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::PsnrConfig;
use crate::forward::SolverOptions;
use crate::learn::nn::PriorConfig;
use crate::learn::train::{AdamConfig, TrainConfig};
use crate::methods::{Method, ModelSpec};
use crate::scalar::cplx;
use crate::scene::{ScattererSpec, SceneConfig, SceneDistribution, Shape, DEFAULT_SPLIT};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig<f64>,
    pub object_count: usize,
    pub loss_tangent: f64,
    pub split: [f64; 3],
    pub noise_sigma_db: f64,
    pub solver_tolerance: f64,
    pub solver_max_iterations: usize,
    pub method: Method,
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub psnr_peak: PsnrConfig,
    /// Pin the thread pool to one worker.
    pub reproducible: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let solver = SolverOptions::default();
        Self {
            scene: SceneConfig::new(1.5, 1.5, 0.125, 20, (96, 96), (24, 24)).expect("valid default"),
            object_count: 2,
            loss_tangent: 0.1,
            split: DEFAULT_SPLIT,
            noise_sigma_db: 0.0,
            solver_tolerance: solver.tolerance,
            solver_max_iterations: solver.max_iterations,
            method: Method::TkDprior,
            model: ModelSpec::default(),
            epochs: 10,
            batch_size: 8,
            adam: AdamConfig::default(),
            psnr_peak: PsnrConfig::default(),
            reproducible: true,
        }
    }
}

pub const KEYS: [&str; 26] = [
    "doi_width",
    "doi_height",
    "wavelength",
    "node_count",
    "forward_grid",
    "inverse_grid",
    "object_count",
    "loss_tangent",
    "split_train",
    "split_val",
    "split_test",
    "noise_sigma_db",
    "solver_tolerance",
    "solver_max_iterations",
    "method",
    "layers",
    "prior_levels",
    "prior_channels",
    "tv_layers",
    "epochs",
    "batch_size",
    "lr_regularization",
    "lr_other",
    "psnr_peak",
    "reproducible",
    "seed",
];

fn parse<V: std::str::FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {raw:?}")))
}

fn parse_grid(key: &str, raw: &str) -> Result<(usize, usize)> {
    let (a, b) = raw
        .split_once('x')
        .ok_or_else(|| Error::InvalidConfig(format!("{key}: expected <nx>x<ny>, got {raw:?}")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected true/false, got {raw:?}"))),
    }
}

/// Splits `key = value` lines; `#` starts a comment line.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::InvalidConfig(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_flat(text)?)
    }

    /// Applies `pairs` on top of the defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        let mut split = c.split;
        let mut fwd = c.scene.forward_grid;
        let mut inv = c.scene.inverse_grid;
        let s = &mut c.scene;
        for (k, v) in pairs {
            let v = v.as_str();
            match k.as_str() {
                "doi_width" => s.doi_width = parse(k, v)?,
                "doi_height" => s.doi_height = parse(k, v)?,
                "wavelength" => s.wavelength = parse(k, v)?,
                "node_count" => s.node_count = parse(k, v)?,
                "forward_grid" => fwd = parse_grid(k, v)?,
                "inverse_grid" => inv = parse_grid(k, v)?,
                "object_count" => c.object_count = parse(k, v)?,
                "loss_tangent" => c.loss_tangent = parse(k, v)?,
                "split_train" => split[0] = parse(k, v)?,
                "split_val" => split[1] = parse(k, v)?,
                "split_test" => split[2] = parse(k, v)?,
                "noise_sigma_db" => c.noise_sigma_db = parse(k, v)?,
                "solver_tolerance" => c.solver_tolerance = parse(k, v)?,
                "solver_max_iterations" => c.solver_max_iterations = parse(k, v)?,
                "method" => c.method = Method::parse(v)?,
                "layers" => c.model.layers = parse(k, v)?,
                "prior_levels" => c.model.prior.levels = parse(k, v)?,
                "prior_channels" => c.model.prior.channels = parse(k, v)?,
                "tv_layers" => c.model.tv_layers = parse(k, v)?,
                "epochs" => c.epochs = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "lr_regularization" => c.adam.lr_regularization = parse(k, v)?,
                "lr_other" => c.adam.lr_other = parse(k, v)?,
                "psnr_peak" => c.psnr_peak = PsnrConfig::parse(v)?,
                "reproducible" => c.reproducible = parse_bool(k, v)?,
                "seed" => c.model.seed = parse(k, v)?,
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown configuration key {k:?} (known keys: {})",
                        KEYS.join(", ")
                    )))
                }
            }
        }
        c.split = split;
        c.scene.forward_grid = fwd;
        c.scene.inverse_grid = inv;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.object_count == 0 {
            return bad("object_count must be >= 1");
        }
        if !(self.loss_tangent >= 0.0) {
            return bad("loss_tangent must be >= 0");
        }
        if !(self.noise_sigma_db >= 0.0) {
            return bad("noise_sigma_db must be >= 0");
        }
        if !(self.solver_tolerance > 0.0) || self.solver_max_iterations == 0 {
            return bad("solver tolerance and iteration budget must be positive");
        }
        if self.model.layers == 0 || self.model.tv_layers == 0 {
            return bad("layers and tv_layers must be >= 1");
        }
        if self.model.prior.levels == 0 || self.model.prior.channels == 0 {
            return bad("prior_levels and prior_channels must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.adam.lr_regularization >= 0.0) || !(self.adam.lr_other >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        Ok(())
    }

    /// Every key with its value, in a form [`RunConfig::from_pairs`] reads
    /// back exactly.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let s = &self.scene;
        let grid = |g: (usize, usize)| format!("{}x{}", g.0, g.1);
        let items: [(&str, String); 26] = [
            ("doi_width", s.doi_width.to_string()),
            ("doi_height", s.doi_height.to_string()),
            ("wavelength", s.wavelength.to_string()),
            ("node_count", s.node_count.to_string()),
            ("forward_grid", grid(s.forward_grid)),
            ("inverse_grid", grid(s.inverse_grid)),
            ("object_count", self.object_count.to_string()),
            ("loss_tangent", self.loss_tangent.to_string()),
            ("split_train", self.split[0].to_string()),
            ("split_val", self.split[1].to_string()),
            ("split_test", self.split[2].to_string()),
            ("noise_sigma_db", self.noise_sigma_db.to_string()),
            ("solver_tolerance", self.solver_tolerance.to_string()),
            ("solver_max_iterations", self.solver_max_iterations.to_string()),
            ("method", self.method.to_string()),
            ("layers", self.model.layers.to_string()),
            ("prior_levels", self.model.prior.levels.to_string()),
            ("prior_channels", self.model.prior.channels.to_string()),
            ("tv_layers", self.model.tv_layers.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_regularization", self.adam.lr_regularization.to_string()),
            ("lr_other", self.adam.lr_other.to_string()),
            ("psnr_peak", self.psnr_peak.to_string()),
            ("reproducible", self.reproducible.to_string()),
            ("seed", self.model.seed.to_string()),
        ];
        items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn distribution(&self) -> SceneDistribution<f64> {
        SceneDistribution {
            object_count: self.object_count,
            loss_tangent: self.loss_tangent,
            ..SceneDistribution::default()
        }
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.solver_tolerance,
            max_iterations: self.solver_max_iterations,
            ..SolverOptions::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            adam: self.adam,
        }
    }

    pub fn prior(&self) -> PriorConfig {
        self.model.prior
    }
}

/// Scene description: one object per line,
/// `circle|square <cx> <cy> <size> <eps_re> <eps_im>`, centre relative to the
/// DoI centre, size = diameter or side. `#` starts a comment line.
pub fn parse_scene(text: &str) -> Result<Vec<ScattererSpec<f64>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let at = |m: &str| Error::InvalidConfig(format!("scene line {}: {m}", i + 1));
        if f.len() != 6 {
            return Err(at("expected: shape cx cy size eps_re eps_im"));
        }
        let shape = match f[0] {
            "circle" => Shape::Circle,
            "square" => Shape::Square,
            s => return Err(at(&format!("unknown shape {s:?}"))),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| at(&format!("bad number {s:?}")));
        let size = num(f[3])?;
        if !(size > 0.0) {
            return Err(at("size must be positive"));
        }
        out.push(ScattererSpec::new(shape, (num(f[1])?, num(f[2])?), size, cplx(num(f[4])?, num(f[5])?)));
    }
    Ok(out)
}
