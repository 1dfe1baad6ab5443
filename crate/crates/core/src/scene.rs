//! Imaging geometry, transceiver layout, link enumeration, scatterer
//! rasterization and randomized scene/dataset generation.

use crate::error::{Error, Result};
use crate::forward::{ForwardSolver, MeasurementSet, SolverOptions};
use crate::geometry::{Grid, Point};
use crate::scalar::{cplx, Cplx, Scalar};
use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;

/// Pinned generator: xoshiro256** seeded through splitmix64.
pub type SceneRng = Xoshiro256StarStar;

pub fn seeded_rng(seed: u64) -> SceneRng {
    // rand_xoshiro expands 64-bit seeds with splitmix64
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Geometry and discretization of one imaging setup.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig<T> {
    pub doi_width: T,
    pub doi_height: T,
    pub wavelength: T,
    pub node_count: usize,
    pub forward_grid: (usize, usize),
    pub inverse_grid: (usize, usize),
}

impl<T: Scalar> SceneConfig<T> {
    pub fn new(
        doi_width: T,
        doi_height: T,
        wavelength: T,
        node_count: usize,
        forward_grid: (usize, usize),
        inverse_grid: (usize, usize),
    ) -> Result<Self> {
        let cfg = Self {
            doi_width,
            doi_height,
            wavelength,
            node_count,
            forward_grid,
            inverse_grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The simulation geometry used throughout: 1.5 m × 1.5 m DoI at
    /// 2.4 GHz (λ₀ = 12.5 cm), 40 nodes, 96×96 forward and 50×50 inverse grids.
    pub fn reference() -> Self {
        Self {
            doi_width: T::c(1.5),
            doi_height: T::c(1.5),
            wavelength: T::c(0.125),
            node_count: 40,
            forward_grid: (96, 96),
            inverse_grid: (50, 50),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.node_count < 3 {
            return bad(format!("node_count must be >= 3, got {}", self.node_count));
        }
        if !(self.wavelength > T::zero()) {
            return bad("wavelength must be positive".into());
        }
        if !(self.doi_width > T::zero()) || !(self.doi_height > T::zero()) {
            return bad("DoI dimensions must be positive".into());
        }
        let (fx, fy) = self.forward_grid;
        let (ix, iy) = self.inverse_grid;
        if fx < 2 || fy < 2 || ix < 2 || iy < 2 {
            return bad("all grid dimensions must be >= 2".into());
        }
        if fx == ix {
            return bad(format!(
                "forward grid width ({fx}) must differ from inverse grid width ({ix})"
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn k0(&self) -> T {
        T::c(2.0) * T::PI() / self.wavelength
    }

    pub fn forward(&self) -> Grid<T> {
        Grid::new(
            self.forward_grid.0,
            self.forward_grid.1,
            self.doi_width,
            self.doi_height,
        )
    }

    pub fn inverse(&self) -> Grid<T> {
        Grid::new(
            self.inverse_grid.0,
            self.inverse_grid.1,
            self.doi_width,
            self.doi_height,
        )
    }

    /// Number of inverse-grid cells `N`.
    pub fn n_cells(&self) -> usize {
        self.inverse_grid.0 * self.inverse_grid.1
    }

    pub fn link_count(&self) -> usize {
        self.node_count * (self.node_count - 1) / 2
    }
}

/// Places `M` nodes equidistantly on the DoI boundary, starting at the
/// lower-left corner and walking counter-clockwise.
pub fn place_nodes<T: Scalar>(config: &SceneConfig<T>) -> Vec<Point<T>> {
    let (w, h) = (config.doi_width, config.doi_height);
    let perimeter = T::c(2.0) * (w + h);
    let step = perimeter / T::from_usize_lossy(config.node_count);
    (0..config.node_count)
        .map(|i| {
            let s = step * T::from_usize_lossy(i);
            if s <= w {
                Point::new(s, T::zero())
            } else if s <= w + h {
                Point::new(w, s - w)
            } else if s <= T::c(2.0) * w + h {
                Point::new(w - (s - w - h), h)
            } else {
                Point::new(T::zero(), h - (s - T::c(2.0) * w - h))
            }
        })
        .collect()
}

/// Ordered `(tx, rx)` pairs with `tx < rx`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkTable {
    links: Vec<(usize, usize)>,
    node_count: usize,
}

impl LinkTable {
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn get(&self, l: usize) -> (usize, usize) {
        self.links[l]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    /// Index of the unordered pair `{a, b}`.
    pub fn index_of(&self, a: usize, b: usize) -> Option<usize> {
        let (tx, rx) = if a < b { (a, b) } else { (b, a) };
        if a == b || rx >= self.node_count {
            return None;
        }
        let m = self.node_count;
        // links before row tx: Σ_{t<tx} (m − 1 − t)
        Some(tx * (2 * m - tx - 1) / 2 + (rx - tx - 1))
    }
}

pub fn enumerate_links(m: usize) -> Result<LinkTable> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least two nodes to form a link, got {m}"
        )));
    }
    let links = (0..m)
        .flat_map(|tx| (tx + 1..m).map(move |rx| (tx, rx)))
        .collect();
    Ok(LinkTable {
        links,
        node_count: m,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
}

/// One homogeneous object; centre is relative to the DoI centre, `size` is
/// the diameter (circle) or side (square).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScattererSpec<T> {
    pub shape: Shape,
    pub center: (T, T),
    pub size: T,
    pub eps_r: Cplx<T>,
}

impl<T: Scalar> ScattererSpec<T> {
    pub fn new(shape: Shape, center: (T, T), size: T, eps_r: Cplx<T>) -> Self {
        Self {
            shape,
            center,
            size,
            eps_r,
        }
    }

    /// `δ√ε_R = ε_I / √ε_R`
    pub fn target_value(&self) -> T {
        self.eps_r.im / self.eps_r.re.sqrt()
    }

    fn center_in(&self, grid: &Grid<T>) -> Point<T> {
        Point::new(
            self.center.0 + grid.width / T::c(2.0),
            self.center.1 + grid.height / T::c(2.0),
        )
    }

    fn contains(&self, grid: &Grid<T>, p: Point<T>) -> bool {
        let c = self.center_in(grid);
        let half = self.size / T::c(2.0);
        match self.shape {
            Shape::Circle => p.distance(c) <= half,
            Shape::Square => (p.x - c.x).abs() <= half && (p.y - c.y).abs() <= half,
        }
    }

    fn check(&self, index: usize, width: T, height: T) -> Result<()> {
        let c = (
            self.center.0 + width / T::c(2.0),
            self.center.1 + height / T::c(2.0),
        );
        let half = self.size / T::c(2.0);
        let inside = self.size > T::zero()
            && c.0 - half >= T::zero()
            && c.1 - half >= T::zero()
            && c.0 + half <= width
            && c.1 + half <= height;
        let physical = self.eps_r.re >= T::one() && self.eps_r.im >= T::zero();
        if !physical {
            return Err(Error::InvalidConfig(format!(
                "scatterer {index}: permittivity {}+{}j needs eps_R >= 1 and eps_I >= 0",
                self.eps_r.re, self.eps_r.im
            )));
        }
        if !inside {
            return Err(Error::OutsideDomain { index });
        }
        Ok(())
    }
}

/// Complex relative permittivity per forward-grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PermittivityMap<T> {
    pub grid: Grid<T>,
    pub values: Vec<Cplx<T>>,
}

impl<T: Scalar> PermittivityMap<T> {
    pub fn background(grid: Grid<T>) -> Self {
        Self {
            grid,
            values: vec![cplx(T::one(), T::zero()); grid.len()],
        }
    }
}

/// Real `δ√ε_R` per inverse-grid cell, row-major from the lower-left cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMap<T> {
    pub grid: Grid<T>,
    pub values: Vec<T>,
}

fn rasterize_with<T: Scalar, V: Copy>(
    specs: &[ScattererSpec<T>],
    grid: &Grid<T>,
    background: V,
    value: impl Fn(&ScattererSpec<T>) -> V,
) -> Result<Vec<V>> {
    for (i, s) in specs.iter().enumerate() {
        s.check(i, grid.width, grid.height)?;
    }
    let mut out = vec![background; grid.len()];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let p = grid.center(ix, iy);
            // later specs overwrite earlier ones
            if let Some(s) = specs.iter().rev().find(|s| s.contains(grid, p)) {
                out[grid.index(ix, iy)] = value(s);
            }
        }
    }
    Ok(out)
}

pub fn rasterize_permittivity<T: Scalar>(
    specs: &[ScattererSpec<T>],
    grid: &Grid<T>,
) -> Result<PermittivityMap<T>> {
    let values = rasterize_with(specs, grid, cplx(T::one(), T::zero()), |s| s.eps_r)?;
    Ok(PermittivityMap {
        grid: *grid,
        values,
    })
}

pub fn rasterize_ground_truth<T: Scalar>(
    specs: &[ScattererSpec<T>],
    grid: &Grid<T>,
) -> Result<GroundTruthMap<T>> {
    let values = rasterize_with(specs, grid, T::zero(), |s| s.target_value())?;
    Ok(GroundTruthMap {
        grid: *grid,
        values,
    })
}

/// Distribution of randomly generated training scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDistribution<T> {
    pub object_count: usize,
    pub cx_range: (T, T),
    pub cy_range: (T, T),
    /// Object sizes as multiples of λ₀.
    pub size_multiples: Vec<T>,
    pub eps_r_values: Vec<T>,
    pub loss_tangent: T,
}

impl<T: Scalar> Default for SceneDistribution<T> {
    fn default() -> Self {
        let eps: Vec<T> = (1..=5)
            .map(|k| T::c(2.0 * k as f64))
            .chain((0..14).map(|k| T::c(50.0 + 2.0 * k as f64)))
            .collect();
        Self {
            object_count: 2,
            cx_range: (T::c(-0.6), T::c(0.6)),
            cy_range: (T::c(0.15), T::c(0.6)),
            size_multiples: [0.5, 1.0, 1.5, 2.0, 2.5].iter().map(|&v| T::c(v)).collect(),
            eps_r_values: eps,
            loss_tangent: T::c(0.1),
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Draws one random scene. Shape, size and permittivity are drawn first;
/// the centre is then redrawn until the object lies inside the DoI.
pub fn sample_scene<T: Scalar>(
    rng: &mut SceneRng,
    dist: &SceneDistribution<T>,
    config: &SceneConfig<T>,
) -> Result<Vec<ScattererSpec<T>>> {
    if dist.size_multiples.is_empty() || dist.eps_r_values.is_empty() {
        return Err(Error::InvalidConfig("empty sampling set".into()));
    }
    let (w, h) = (config.doi_width, config.doi_height);
    let mut out = Vec::with_capacity(dist.object_count);
    for index in 0..dist.object_count {
        let shape = if rng.gen_bool(0.5) {
            Shape::Circle
        } else {
            Shape::Square
        };
        let size = dist.size_multiples[rng.gen_range(0..dist.size_multiples.len())]
            * config.wavelength;
        let eps_re = dist.eps_r_values[rng.gen_range(0..dist.eps_r_values.len())];
        let eps_r = cplx(eps_re, dist.loss_tangent * eps_re);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cx = uniform(rng, dist.cx_range);
            let cy = uniform(rng, dist.cy_range);
            let spec = ScattererSpec::new(shape, (cx, cy), size, eps_r);
            if spec.check(index, w, h).is_ok() {
                placed = Some(spec);
                break;
            }
        }
        out.push(placed.ok_or_else(|| {
            Error::InvalidConfig(format!(
                "could not place object {index} of size {size} inside the DoI"
            ))
        })?);
    }
    Ok(out)
}

fn uniform<T: Scalar>(rng: &mut SceneRng, (lo, hi): (T, T)) -> T {
    let u: f64 = rng.gen();
    lo + (hi - lo) * T::c(u)
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub index: usize,
    pub seed: u64,
    pub measurements: MeasurementSet<T>,
    pub ground_truth: GroundTruthMap<T>,
    pub scatterers: Vec<ScattererSpec<T>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

/// Default 1350/150/500 split of 2000 samples.
pub const DEFAULT_SPLIT: [f64; 3] = [0.675, 0.075, 0.25];

/// Largest-remainder apportionment of `count` over `fractions`. Ties go to
/// the split with the smaller quota so that small splits stay populated.
pub fn split_counts(count: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f < 0.0 || !f.is_finite()) || total <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be non-negative with a positive sum: {fractions:?}"
        )));
    }
    let quotas: Vec<f64> = fractions.iter().map(|f| f / total * count as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = quotas[i].floor() as usize;
    }
    let mut left = count - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra)
            .unwrap()
            .then(quotas[a].partial_cmp(&quotas[b]).unwrap())
            .then(a.cmp(&b))
    });
    for &i in &order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Options controlling dataset synthesis.
#[derive(Clone, Debug)]
pub struct DatasetOptions<T> {
    pub distribution: SceneDistribution<T>,
    pub split: [f64; 3],
    pub noise_sigma_db: T,
    pub solver: SolverOptions,
}

impl<T: Scalar> Default for DatasetOptions<T> {
    fn default() -> Self {
        Self {
            distribution: SceneDistribution::default(),
            split: DEFAULT_SPLIT,
            noise_sigma_db: T::zero(),
            solver: SolverOptions::default(),
        }
    }
}

/// Generates `count` samples; sample `i` draws from its own generator
/// stream (the base stream advanced by `i` jumps), so the result depends
/// only on `(config, count, seed)`.
pub fn build_dataset<T: Scalar>(
    config: &SceneConfig<T>,
    count: usize,
    seed: u64,
    options: &DatasetOptions<T>,
) -> Result<Dataset<T>> {
    if count == 0 {
        return Err(Error::InvalidConfig("dataset count must be >= 1".into()));
    }
    config.validate()?;
    let counts = split_counts(count, options.split)?;
    let solver = ForwardSolver::new(config.clone(), options.solver.clone())?;
    let mut streams = Vec::with_capacity(count);
    let mut base = seeded_rng(seed);
    for _ in 0..count {
        streams.push(base.clone());
        base.jump();
    }
    let samples: Vec<Sample<T>> = streams
        .into_par_iter()
        .enumerate()
        .map(|(index, mut rng)| {
            make_sample(&solver, config, options, &mut rng, index, seed)
                .map_err(|e| Error::Sample {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let mut it = samples.into_iter();
    let train = it.by_ref().take(counts[0]).collect();
    let val = it.by_ref().take(counts[1]).collect();
    let test = it.collect();
    Ok(Dataset { train, val, test })
}

fn make_sample<T: Scalar>(
    solver: &ForwardSolver<T>,
    config: &SceneConfig<T>,
    options: &DatasetOptions<T>,
    rng: &mut SceneRng,
    index: usize,
    seed: u64,
) -> Result<Sample<T>> {
    let scatterers = sample_scene(rng, &options.distribution, config)?;
    let perm = rasterize_permittivity(&scatterers, &config.forward())?;
    let ground_truth = rasterize_ground_truth(&scatterers, &config.inverse())?;
    let (measurements, _) = solver.simulate(&perm, options.noise_sigma_db, rng)?;
    Ok(Sample {
        index,
        seed,
        measurements,
        ground_truth,
        scatterers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_config(m: usize) -> SceneConfig<f64> {
        SceneConfig::new(1.0, 1.0, 0.125, m, (12, 12), (6, 6)).unwrap()
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(SceneConfig::new(1.0, 1.0, 0.1, 2, (8, 8), (4, 4)).is_err());
        assert!(SceneConfig::new(1.0, 1.0, 0.0, 4, (8, 8), (4, 4)).is_err());
        assert!(SceneConfig::new(1.0, -1.0, 0.1, 4, (8, 8), (4, 4)).is_err());
        assert!(SceneConfig::new(1.0, 1.0, 0.1, 4, (1, 8), (4, 4)).is_err());
        // inverse crime guard
        assert!(SceneConfig::new(1.0, 1.0, 0.1, 4, (8, 8), (8, 6)).is_err());
    }

    #[test]
    fn four_nodes_sit_on_corners() {
        let nodes = place_nodes(&unit_config(4));
        let expected = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        for (n, e) in nodes.iter().zip(expected) {
            assert!((n.x - e.0).abs() < 1e-15 && (n.y - e.1).abs() < 1e-15);
        }
    }

    #[test]
    fn eight_nodes_half_metre_spacing() {
        let nodes = place_nodes(&unit_config(8));
        assert_eq!(nodes[1], Point::new(0.5, 0.0));
        assert_eq!(nodes[3], Point::new(1.0, 0.5));
        assert_eq!(nodes[7], Point::new(0.0, 0.5));
    }

    #[test]
    fn forty_nodes_reference_spacing() {
        let cfg = SceneConfig::<f64>::reference();
        let nodes = place_nodes(&cfg);
        assert_eq!(nodes.len(), 40);
        for w in nodes.windows(2) {
            // consecutive nodes never straddle a corner for this layout
            assert!((w[0].distance(w[1]) - 0.15).abs() < 1e-12);
        }
    }

    #[test]
    fn link_enumeration() {
        assert_eq!(enumerate_links(40).unwrap().len(), 780);
        assert_eq!(enumerate_links(2).unwrap().iter().collect::<Vec<_>>(), vec![(0, 1)]);
        let four = enumerate_links(4).unwrap();
        assert_eq!(four.len(), 6);
        assert_eq!(&four.iter().take(3).collect::<Vec<_>>(), &[(0, 1), (0, 2), (0, 3)]);
        assert!(enumerate_links(1).is_err());
    }

    #[test]
    fn link_index_is_a_bijection() {
        let t = enumerate_links(9).unwrap();
        for (l, (a, b)) in t.iter().enumerate() {
            assert!(a < b);
            assert_eq!(t.index_of(a, b), Some(l));
            assert_eq!(t.index_of(b, a), Some(l));
        }
        assert_eq!(t.index_of(3, 3), None);
    }

    #[test]
    fn empty_scene_rasterizes_to_background() {
        let g = Grid::new(10, 10, 1.0, 1.0);
        let p = rasterize_permittivity::<f64>(&[], &g).unwrap();
        assert!(p.values.iter().all(|v| *v == Cplx::new(1.0, 0.0)));
        let t = rasterize_ground_truth::<f64>(&[], &g).unwrap();
        assert!(t.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ground_truth_values_inside_objects() {
        let g = Grid::new(30, 30, 1.5, 1.5);
        let circle = ScattererSpec::new(Shape::Circle, (0.0, 0.0), 0.5, Cplx::new(4.0, 0.4));
        let t = rasterize_ground_truth(&[circle], &g).unwrap();
        let center = g.index(15, 15);
        assert!((t.values[center] - 0.2f64).abs() < 1e-15);
        let square = ScattererSpec::new(Shape::Square, (0.2, -0.2), 0.3, Cplx::new(77.0, 7.7));
        let t = rasterize_ground_truth(&[square], &g).unwrap();
        let max = t.values.iter().cloned().fold(0.0, f64::max);
        assert_eq!((max * 1000.0).trunc() / 1000.0, 0.877);
    }

    #[test]
    fn later_scatterer_wins_overlap() {
        let g = Grid::new(20, 20, 1.0, 1.0);
        let a = ScattererSpec::new(Shape::Square, (0.0, 0.0), 0.4, Cplx::new(2.0, 0.2));
        let b = ScattererSpec::new(Shape::Circle, (0.0, 0.0), 0.2, Cplx::new(9.0, 0.9));
        let p = rasterize_permittivity(&[a, b], &g).unwrap();
        assert_eq!(p.values[g.index(10, 10)], Cplx::new(9.0, 0.9));
        let p = rasterize_permittivity(&[b, a], &g).unwrap();
        assert_eq!(p.values[g.index(10, 10)], Cplx::new(2.0, 0.2));
    }

    #[test]
    fn outside_scatterer_rejected_with_index() {
        let g = Grid::new(20, 20, 1.0, 1.0);
        let ok = ScattererSpec::new(Shape::Circle, (0.0, 0.0), 0.2, Cplx::new(2.0, 0.2));
        let bad = ScattererSpec::new(Shape::Square, (0.45, 0.0), 0.2, Cplx::new(2.0, 0.2));
        match rasterize_ground_truth(&[ok, bad], &g) {
            Err(Error::OutsideDomain { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_counts_follow_largest_remainder() {
        assert_eq!(split_counts(2000, DEFAULT_SPLIT).unwrap(), [1350, 150, 500]);
        assert_eq!(split_counts(20, DEFAULT_SPLIT).unwrap(), [13, 2, 5]);
        assert_eq!(split_counts(1, DEFAULT_SPLIT).unwrap().iter().sum::<usize>(), 1);
        assert_eq!(split_counts(250, [200.0, 0.0, 50.0]).unwrap(), [200, 0, 50]);
    }

    #[test]
    fn sampling_set_matches_enumeration() {
        let d = SceneDistribution::<f64>::default();
        assert_eq!(d.eps_r_values.len(), 19);
        assert_eq!(d.eps_r_values[0], 2.0);
        assert_eq!(*d.eps_r_values.last().unwrap(), 76.0);
    }
}
