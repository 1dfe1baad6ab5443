//! Exact synthetic-measurement generation.
//!
//! The domain integral equation `(I − k₀² G_D diag(χ_ε)) E = Eⁱ` is
//! discretized with Richmond's equivalent-circle rule (cell replaced by a disk
//! of equal area). `G_D` is block-Toeplitz and applied with zero-padded 2D
//! FFTs; the system is solved either densely on the scatterer support
//! (`χ_ε ≠ 0` cells only, LU factored once and reused for every transmitter)
//! or with BiCGStab on the full grid.

mod bicgstab;
mod cylinder;
mod operator;

pub use bicgstab::bicgstab;
pub use cylinder::cylinder_series;
pub use operator::GreensOperator;

use crate::em::{disk_integral, incident_field, physical_contrast};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::linalg::ComplexLu;
use crate::scalar::{cplx, Cplx, Scalar};
use crate::scene::{enumerate_links, place_nodes, LinkTable, PermittivityMap, SceneConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverMethod {
    /// Dense LU when the scatterer support has at most `dense_limit` cells,
    /// BiCGStab otherwise.
    Auto,
    Dense,
    Iterative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub method: SolverMethod,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub dense_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::Auto,
            tolerance: 1e-8,
            max_iterations: 2000,
            dense_limit: 48 * 48,
        }
    }
}

/// RSS changes (dB) over all links of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet<T> {
    pub delta_p: Vec<T>,
    pub links: LinkTable,
    pub noise_sigma_db: Option<T>,
}

#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    pub iterations: Vec<usize>,
    pub residuals: Vec<f64>,
    pub wall_time: Duration,
}

/// `ΔP = 20 log₁₀(|E| / |Eⁱ|)`.
pub fn rss_delta<T: Scalar>(total: Cplx<T>, incident: Cplx<T>) -> Result<T> {
    let inc = incident.norm();
    if inc == T::zero() {
        return Err(Error::DegenerateLink);
    }
    Ok(T::c(20.0) * (total.norm() / inc).log10())
}

/// Reusable forward model for one [`SceneConfig`].
pub struct ForwardSolver<T: Scalar> {
    config: SceneConfig<T>,
    options: SolverOptions,
    greens: GreensOperator<T>,
    nodes: Vec<Point<T>>,
    links: LinkTable,
    source_amplitude: Cplx<T>,
}

/// Total field on the forward grid for one transmitter.
#[derive(Clone, Debug)]
pub struct TotalField<T> {
    pub values: Vec<Cplx<T>>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// A permittivity map bound to a solver, with the dense factorization (if any)
/// shared across transmitters.
pub struct PreparedScene<'a, T: Scalar> {
    solver: &'a ForwardSolver<T>,
    contrast: Vec<Cplx<T>>,
    support: Vec<usize>,
    lu: Option<ComplexLu<T>>,
}

impl<T: Scalar> ForwardSolver<T> {
    pub fn new(config: SceneConfig<T>, options: SolverOptions) -> Result<Self> {
        config.validate()?;
        let greens = GreensOperator::new(config.forward(), config.k0())?;
        let nodes = place_nodes(&config);
        let links = enumerate_links(config.node_count)?;
        Ok(Self {
            config,
            options,
            greens,
            nodes,
            links,
            source_amplitude: cplx(T::one(), T::zero()),
        })
    }

    /// Rescales every line source (ΔP is invariant under this).
    pub fn with_source_amplitude(mut self, amplitude: Cplx<T>) -> Self {
        self.source_amplitude = amplitude;
        self
    }

    pub fn config(&self) -> &SceneConfig<T> {
        &self.config
    }

    pub fn nodes(&self) -> &[Point<T>] {
        &self.nodes
    }

    pub fn links(&self) -> &LinkTable {
        &self.links
    }

    pub fn greens(&self) -> &GreensOperator<T> {
        &self.greens
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    pub fn prepare(&self, perm: &PermittivityMap<T>) -> Result<PreparedScene<'_, T>> {
        let grid = self.greens.grid();
        if perm.grid.nx != grid.nx || perm.grid.ny != grid.ny {
            return Err(Error::Dimension {
                what: "permittivity map cells",
                expected: grid.len(),
                got: perm.values.len(),
            });
        }
        let contrast: Vec<Cplx<T>> = perm.values.iter().map(|&e| physical_contrast(e)).collect();
        let support: Vec<usize> = contrast
            .iter()
            .enumerate()
            .filter(|(_, c)| c.norm() != T::zero())
            .map(|(i, _)| i)
            .collect();
        let dense = match self.options.method {
            SolverMethod::Dense => true,
            SolverMethod::Iterative => false,
            SolverMethod::Auto => support.len() <= self.options.dense_limit,
        };
        let lu = if dense && !support.is_empty() {
            Some(self.factor_support(&contrast, &support)?)
        } else {
            None
        };
        Ok(PreparedScene {
            solver: self,
            contrast,
            support,
            lu,
        })
    }

    fn factor_support(&self, contrast: &[Cplx<T>], support: &[usize]) -> Result<ComplexLu<T>> {
        let s = support.len();
        let k2 = self.config.k0() * self.config.k0();
        let mut a = vec![cplx(T::zero(), T::zero()); s * s];
        a.par_chunks_mut(s).enumerate().for_each(|(i, row)| {
            let m = support[i];
            for (j, &n) in support.iter().enumerate() {
                let g = self.greens.entry(m, n);
                row[j] = -(g * contrast[n] * k2);
            }
            row[i] += cplx(T::one(), T::zero());
        });
        ComplexLu::factor(s, a)
    }

    /// Incident field of transmitter `tx` on the forward-grid cell centres.
    pub fn incident_on_grid(&self, tx: usize) -> Result<Vec<Cplx<T>>> {
        incident_field(
            self.config.k0(),
            self.nodes[tx],
            self.greens.centers(),
            self.source_amplitude,
        )
    }

    pub fn incident_at(&self, tx: usize, points: &[Point<T>]) -> Result<Vec<Cplx<T>>> {
        incident_field(self.config.k0(), self.nodes[tx], points, self.source_amplitude)
    }

    /// Synthesizes ΔP for every link, one solve per transmitter.
    pub fn simulate<R: Rng>(
        &self,
        perm: &PermittivityMap<T>,
        noise_sigma_db: T,
        rng: &mut R,
    ) -> Result<(MeasurementSet<T>, SolveReport)> {
        let start = Instant::now();
        let prepared = self.prepare(perm)?;
        let m = self.config.node_count;
        let per_tx: Vec<(Vec<T>, usize, f64)> = (0..m - 1)
            .into_par_iter()
            .map(|tx| {
                let field = prepared.solve_total_field(tx)?;
                let receivers: Vec<Point<T>> = self.nodes[tx + 1..].to_vec();
                let total = prepared.field_at(tx, &field, &receivers)?;
                let inc = self.incident_at(tx, &receivers)?;
                let dp = total
                    .iter()
                    .zip(&inc)
                    .map(|(&e, &ei)| rss_delta(e, ei))
                    .collect::<Result<Vec<T>>>()?;
                Ok((dp, field.iterations, field.relative_residual))
            })
            .collect::<Result<_>>()?;
        let mut delta_p = Vec::with_capacity(self.links.len());
        let mut report = SolveReport::default();
        for (dp, it, res) in per_tx {
            delta_p.extend(dp);
            report.iterations.push(it);
            report.residuals.push(res);
        }
        let noise = if noise_sigma_db > T::zero() {
            for v in delta_p.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += noise_sigma_db * T::c(z);
            }
            Some(noise_sigma_db)
        } else {
            None
        };
        report.wall_time = start.elapsed();
        Ok((
            MeasurementSet {
                delta_p,
                links: self.links.clone(),
                noise_sigma_db: noise,
            },
            report,
        ))
    }
}

impl<T: Scalar> PreparedScene<'_, T> {
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn is_dense(&self) -> bool {
        self.lu.is_some()
    }

    /// Physical contrast `χ_ε` per forward cell.
    pub fn contrast(&self) -> &[Cplx<T>] {
        &self.contrast
    }

    /// Applies `E ↦ E − k₀² G_D (χ_ε E)` on the full grid.
    pub fn apply_system(&self, e: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let k2 = self.solver.config.k0() * self.solver.config.k0();
        let w: Vec<Cplx<T>> = e.iter().zip(&self.contrast).map(|(&a, &c)| a * c).collect();
        let gw = self.solver.greens.apply(&w);
        e.iter().zip(gw).map(|(&a, g)| a - g * k2).collect()
    }

    pub fn solve_total_field(&self, tx: usize) -> Result<TotalField<T>> {
        let inc = self.solver.incident_on_grid(tx)?;
        if self.support.is_empty() {
            return Ok(TotalField {
                values: inc,
                iterations: 0,
                relative_residual: 0.0,
            });
        }
        let opts = &self.solver.options;
        let (values, iterations) = match &self.lu {
            Some(lu) => {
                let rhs: Vec<Cplx<T>> = self.support.iter().map(|&n| inc[n]).collect();
                let sol = lu.solve(&rhs)?;
                // off-support cells follow from the field on the support
                let k2 = self.solver.config.k0() * self.solver.config.k0();
                let mut w = vec![cplx(T::zero(), T::zero()); inc.len()];
                for (&n, &e) in self.support.iter().zip(&sol) {
                    w[n] = self.contrast[n] * e;
                }
                let gw = self.solver.greens.apply(&w);
                let mut full: Vec<Cplx<T>> =
                    inc.iter().zip(gw).map(|(&ei, g)| ei + g * k2).collect();
                for (&n, &e) in self.support.iter().zip(&sol) {
                    full[n] = e;
                }
                (full, 1)
            }
            None => {
                let out = bicgstab(
                    |x| self.apply_system(x),
                    &inc,
                    opts.tolerance,
                    opts.max_iterations,
                )?;
                (out.solution, out.iterations)
            }
        };
        let residual = self.relative_residual(&values, &inc);
        if residual > opts.tolerance.max(1e-12) * 10.0 {
            return Err(Error::NoConvergence {
                iterations,
                last_residual: residual,
                history: vec![residual],
            });
        }
        Ok(TotalField {
            values,
            iterations,
            relative_residual: residual,
        })
    }

    fn relative_residual(&self, e: &[Cplx<T>], inc: &[Cplx<T>]) -> f64 {
        let ae = self.apply_system(e);
        let num: T = ae.iter().zip(inc).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: T = inc.iter().map(|b| b.norm_sqr()).sum();
        (num / den).sqrt().to_f64_lossy()
    }

    /// Total field at arbitrary points from the solved field inside the DoI.
    pub fn field_at(
        &self,
        tx: usize,
        field: &TotalField<T>,
        points: &[Point<T>],
    ) -> Result<Vec<Cplx<T>>> {
        let cfg = &self.solver.config;
        let k0 = cfg.k0();
        let k2 = k0 * k0;
        let radius = self.solver.greens.radius();
        let centers = self.solver.greens.centers();
        let inc = self.solver.incident_at(tx, points)?;
        points
            .iter()
            .zip(inc)
            .map(|(&p, ei)| {
                let mut acc = cplx(T::zero(), T::zero());
                for &n in &self.support {
                    let d = p.distance(centers[n]);
                    let g = disk_integral(k0, radius, d)?;
                    acc += g * self.contrast[n] * field.values[n];
                }
                Ok(ei + acc * k2)
            })
            .collect()
    }
}
