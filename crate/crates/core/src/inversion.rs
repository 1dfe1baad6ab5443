//! Reconstruction engine on the linear model: Tikhonov initialization,
//! smooth-term gradient, proximal-gradient layers and unrolled ADMM-TV.
//!
//! Everything here works on an [`InversionSystem`], which can rescale `𝒢` and
//! `ΔP` by a common factor `s`. The minimizer of the data term is unchanged;
//! regularization weights and step sizes are then expressed relative to a
//! unit-norm operator.

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::linalg::{conjugate_gradient, power_iteration, Cholesky, DenseMatrix};
use crate::scalar::{axpy, dot, Scalar};
use crate::xpra::{DiffOperators, ReconstructionState, XpraOperator};

/// Above this stacked dimension the Tikhonov system is solved with CG.
pub const DENSE_SOLVE_LIMIT: usize = 6000;

const POWER_ITERATIONS: usize = 50;

/// `𝒢`, `D_x`, `D_y` and the cached Gram matrix, with a common scale `s`.
#[derive(Clone, Debug)]
pub struct InversionSystem<T> {
    op: XpraOperator<T>,
    diffs: DiffOperators<T>,
    scale: T,
    gram: DenseMatrix<T>,
    sigma_max_sq: T,
}

impl<T: Scalar> InversionSystem<T> {
    /// Scaled so that `σ_max(s𝒢) = 1`.
    pub fn normalized(op: XpraOperator<T>, diffs: DiffOperators<T>) -> Result<Self> {
        let raw = Self::unnormalized(op, diffs)?;
        if !(raw.sigma_max_sq > T::zero()) {
            return Err(Error::Domain("operator is identically zero".into()));
        }
        let s = T::one() / raw.sigma_max_sq.sqrt();
        let mut gram = raw.gram;
        gram.scale(s * s);
        Ok(Self {
            op: raw.op,
            diffs: raw.diffs,
            scale: s,
            gram,
            sigma_max_sq: T::one(),
        })
    }

    /// `s = 1`: the operator exactly as assembled.
    pub fn unnormalized(op: XpraOperator<T>, diffs: DiffOperators<T>) -> Result<Self> {
        check_len("difference operator dimension", 2 * op.cells(), diffs.dim())?;
        let gram = op.stacked().gram();
        let n = gram.rows();
        let sigma_max_sq = power_iteration(
            |v| gram.matvec(v).expect("square"),
            n,
            POWER_ITERATIONS * 4,
        );
        Ok(Self {
            op,
            diffs,
            scale: T::one(),
            gram,
            sigma_max_sq,
        })
    }

    pub fn operator(&self) -> &XpraOperator<T> {
        &self.op
    }

    pub fn diffs(&self) -> &DiffOperators<T> {
        &self.diffs
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    /// `s²𝒢ᵀ𝒢`.
    pub fn gram(&self) -> &DenseMatrix<T> {
        &self.gram
    }

    /// Stacked dimension `2N`.
    pub fn dim(&self) -> usize {
        self.gram.rows()
    }

    pub fn links(&self) -> usize {
        self.op.rows()
    }

    /// `σ²_max(s𝒢)`.
    pub fn sigma_max_sq(&self) -> T {
        self.sigma_max_sq
    }

    /// `λ = 10⁻² · trace(s²𝒢ᵀ𝒢) / 2N`.
    pub fn default_lambda(&self) -> T {
        T::c(1e-2) * self.gram.trace() / T::from_usize_lossy(self.dim())
    }

    /// `η = 1/σ²_max(s𝒢)`.
    pub fn default_step(&self) -> T {
        T::one() / self.sigma_max_sq
    }

    /// `10⁻⁸ · trace(s²𝒢ᵀ𝒢) / 2N`.
    pub fn default_floor(&self) -> T {
        T::c(1e-8) * self.gram.trace() / T::from_usize_lossy(self.dim())
    }

    /// `s²𝒢ᵀΔP`.
    pub fn rhs(&self, delta_p: &[T]) -> Result<Vec<T>> {
        check_len("measurements", self.links(), delta_p.len())?;
        let mut b = self.op.adjoint_apply(delta_p)?;
        let s2 = self.scale * self.scale;
        b.iter_mut().for_each(|v| *v *= s2);
        Ok(b)
    }

    /// `(s²𝒢ᵀ𝒢 + λ₁I + λ₂(D_xᵀD_x + D_yᵀD_y)) x`.
    pub fn normal_apply(&self, lambda1: T, lambda2: T, x: &[T]) -> Vec<T> {
        let mut y = self.gram.matvec(x).expect("dimension checked by caller");
        let r = self.diffs.regularizer_apply(x);
        for ((yi, &xi), ri) in y.iter_mut().zip(x).zip(r) {
            *yi += lambda1 * xi + lambda2 * ri;
        }
        y
    }

    pub fn normal_matrix(&self, lambda1: T, lambda2: T) -> DenseMatrix<T> {
        let mut a = self.diffs.regularizer_dense();
        a.scale(lambda2);
        let n = self.dim();
        for i in 0..n {
            let row = a.row_mut(i);
            for (v, &g) in row.iter_mut().zip(self.gram.row(i)) {
                *v += g;
            }
            row[i] += lambda1;
        }
        a
    }

    /// Solves the regularized normal equations without the final ReLU.
    pub fn tikhonov_solve(&self, lambda1: T, lambda2: T, delta_p: &[T]) -> Result<Vec<T>> {
        if lambda1 < T::zero() || lambda2 < T::zero() {
            return Err(Error::InvalidConfig("regularization weights must be >= 0".into()));
        }
        if lambda1 == T::zero() && lambda2 == T::zero() {
            return Err(Error::Singularity(
                "λ₁ = λ₂ = 0 leaves 𝒢ᵀ𝒢 singular; use minimum_norm_init".into(),
            ));
        }
        let b = self.rhs(delta_p)?;
        self.regularized_solve(lambda1, lambda2, &b)
    }

    pub(crate) fn regularized_solve(&self, lambda1: T, lambda2: T, b: &[T]) -> Result<Vec<T>> {
        if self.dim() > DENSE_SOLVE_LIMIT {
            let out = conjugate_gradient(|v| self.normal_apply(lambda1, lambda2, v), b, 1e-12, 20 * self.dim())?;
            return Ok(out.solution);
        }
        let chol = Cholesky::factor(&self.normal_matrix(lambda1, lambda2))?;
        let mut x = chol.solve(b)?;
        // one step of iterative refinement
        let r: Vec<T> = self
            .normal_apply(lambda1, lambda2, &x)
            .iter()
            .zip(b)
            .map(|(ax, bi)| *bi - *ax)
            .collect();
        let dx = chol.solve(&r)?;
        axpy(T::one(), &dx, &mut x);
        Ok(x)
    }

    /// `‖Ax − b‖ / ‖b‖` for the regularized normal equations.
    pub fn normal_residual(&self, lambda1: T, lambda2: T, x: &[T], delta_p: &[T]) -> Result<T> {
        let b = self.rhs(delta_p)?;
        let ax = self.normal_apply(lambda1, lambda2, x);
        let num: T = ax.iter().zip(&b).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        let den = dot(&b, &b);
        Ok(if den == T::zero() { num.sqrt() } else { (num / den).sqrt() })
    }

    /// Tikhonov initialization layer: regularized solve, then ReLU on `χ_I`.
    pub fn tikhonov_init(&self, lambda1: T, lambda2: T, delta_p: &[T]) -> Result<ReconstructionState<T>> {
        let x = self.tikhonov_solve(lambda1, lambda2, delta_p)?;
        Ok(ReconstructionState::from_stacked(&x)?.relu_imag())
    }

    /// Ridge solve with `λ₁ = ε_floor` only (no ReLU). Stands in for the
    /// singular unregularized initialization.
    pub fn minimum_norm_init(&self, delta_p: &[T], floor: Option<T>) -> Result<ReconstructionState<T>> {
        let eps = floor.unwrap_or_else(|| self.default_floor());
        if !(eps > T::zero()) {
            return Err(Error::InvalidConfig("ε_floor must be positive".into()));
        }
        let x = self.tikhonov_solve(eps, T::zero(), delta_p)?;
        ReconstructionState::from_stacked(&x)
    }

    /// `½‖s𝒢x − sΔP‖² + ½λ₁‖x‖² + ½λ₂(‖D_x x‖² + ‖D_y x‖²)`.
    pub fn objective(&self, lambda1: T, lambda2: T, x: &[T], delta_p: &[T]) -> Result<T> {
        check_len("state", self.dim(), x.len())?;
        let pred = self.op.stacked().matvec(x)?;
        let s = self.scale;
        let data: T = pred.iter().zip(delta_p).map(|(p, d)| (s * (*p - *d)).powi(2)).sum();
        let r = self.diffs.regularizer_apply(x);
        let half = T::c(0.5);
        Ok(half * data + half * lambda1 * dot(x, x) + half * lambda2 * dot(x, &r))
    }

    /// `∇f = s²𝒢ᵀ(𝒢x − ΔP) + (λ₁I + λ₂(D_xᵀD_x + D_yᵀD_y))x`.
    pub fn grad_f(&self, lambda1: T, lambda2: T, x: &[T], delta_p: &[T]) -> Result<Vec<T>> {
        check_len("state", self.dim(), x.len())?;
        let b = self.rhs(delta_p)?;
        let mut g = self.normal_apply(lambda1, lambda2, x);
        axpy(-T::one(), &b, &mut g);
        Ok(g)
    }

    /// `σ_max(s²𝒢ᵀ𝒢 + λ₁I + λ₂DᵀD)` by power iteration.
    pub fn lipschitz(&self, lambda1: T, lambda2: T) -> T {
        power_iteration(|v| self.normal_apply(lambda1, lambda2, v), self.dim(), POWER_ITERATIONS * 4)
    }
}

/// Proximal map producing `χ_I` from the two gradient-step images.
pub trait Prox<T> {
    fn prox(&self, z_r: &[T], z_i: &[T], nx: usize, ny: usize) -> Result<Vec<T>>;
}

/// `prox(Z_R, Z_I) = Z_I`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityProx;

impl<T: Scalar> Prox<T> for IdentityProx {
    fn prox(&self, _z_r: &[T], z_i: &[T], _nx: usize, _ny: usize) -> Result<Vec<T>> {
        Ok(z_i.to_vec())
    }
}

/// Per-layer PGM scalars.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub lambda1: T,
    pub lambda2: T,
    pub eta: T,
}

/// One proximal-gradient layer: `Z = x − η∇f(x)`, `χ_R = Z_R`,
/// `χ_I = prox(Z_R, Z_I)`.
pub fn pgm_layer<T: Scalar, P: Prox<T> + ?Sized>(
    sys: &InversionSystem<T>,
    state: &ReconstructionState<T>,
    delta_p: &[T],
    params: LayerParams<T>,
    prox: &P,
) -> Result<ReconstructionState<T>> {
    if !(params.eta >= T::zero()) {
        return Err(Error::InvalidConfig("step size η must be >= 0".into()));
    }
    let x = state.stacked();
    let g = sys.grad_f(params.lambda1, params.lambda2, &x, delta_p)?;
    let mut z = x;
    axpy(-params.eta, &g, &mut z);
    let n = state.cells();
    let (z_r, z_i) = z.split_at(n);
    let grid = sys.operator().grid();
    let chi_i = prox.prox(z_r, z_i, grid.nx, grid.ny)?;
    check_len("prox output", n, chi_i.len())?;
    Ok(ReconstructionState {
        chi_r: z_r.to_vec(),
        chi_i,
    })
}

/// Unrolled ADMM for anisotropic TV.
#[derive(Clone, Debug, PartialEq)]
pub struct TvModel<T> {
    pub layers: usize,
    pub lambda_tv: T,
    pub rho: T,
}

/// Per-iteration ADMM diagnostics.
#[derive(Clone, Debug, Default)]
pub struct AdmmTrace {
    /// `‖Dx − z‖` after each iteration.
    pub primal_residuals: Vec<f64>,
}

pub fn soft_threshold<T: Scalar>(v: T, threshold: T) -> T {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        T::zero()
    }
}

/// Returns the ReLU-clipped `χ_I` estimate.
pub fn admm_tv<T: Scalar>(model: &TvModel<T>, sys: &InversionSystem<T>, delta_p: &[T]) -> Result<Vec<T>> {
    Ok(admm_tv_traced(model, sys, delta_p)?.0)
}

/// [`admm_tv`] over many measurement vectors, sharing one factorization.
pub fn admm_tv_batch<T: Scalar>(model: &TvModel<T>, sys: &InversionSystem<T>, batch: &[&[T]]) -> Result<Vec<Vec<T>>> {
    let chol = admm_factor(model, sys)?;
    batch
        .par_iter()
        .map(|dp| Ok(admm_iterations(model, sys, &chol, dp)?.0))
        .collect()
}

fn admm_factor<T: Scalar>(model: &TvModel<T>, sys: &InversionSystem<T>) -> Result<Cholesky<T>> {
    if !(model.rho > T::zero()) {
        return Err(Error::InvalidConfig("ADMM penalty ρ must be > 0".into()));
    }
    if model.lambda_tv < T::zero() || model.layers == 0 {
        return Err(Error::InvalidConfig("need λ_TV >= 0 and at least one layer".into()));
    }
    Cholesky::factor(&sys.normal_matrix(T::zero(), model.rho))
}

pub fn admm_tv_traced<T: Scalar>(
    model: &TvModel<T>,
    sys: &InversionSystem<T>,
    delta_p: &[T],
) -> Result<(Vec<T>, AdmmTrace)> {
    let chol = admm_factor(model, sys)?;
    admm_iterations(model, sys, &chol, delta_p)
}

fn admm_iterations<T: Scalar>(
    model: &TvModel<T>,
    sys: &InversionSystem<T>,
    chol: &Cholesky<T>,
    delta_p: &[T],
) -> Result<(Vec<T>, AdmmTrace)> {
    let d = sys.dim();
    let b = sys.rhs(delta_p)?;
    let diffs = sys.diffs();
    let thr = model.lambda_tv / model.rho;
    // split variable and scaled dual for [D_x x; D_y x]
    let mut zx = vec![T::zero(); d];
    let mut zy = vec![T::zero(); d];
    let mut ux = vec![T::zero(); d];
    let mut uy = vec![T::zero(); d];
    let mut x = vec![T::zero(); d];
    let mut trace = AdmmTrace::default();
    for _ in 0..model.layers {
        let vx: Vec<T> = zx.iter().zip(&ux).map(|(z, u)| *z - *u).collect();
        let vy: Vec<T> = zy.iter().zip(&uy).map(|(z, u)| *z - *u).collect();
        let mut rhs = b.clone();
        axpy(model.rho, &diffs.dx.matvec_t(&vx)?, &mut rhs);
        axpy(model.rho, &diffs.dy.matvec_t(&vy)?, &mut rhs);
        x = chol.solve(&rhs)?;
        let dx = diffs.dx.matvec(&x)?;
        let dy = diffs.dy.matvec(&x)?;
        for i in 0..d {
            zx[i] = soft_threshold(dx[i] + ux[i], thr);
            zy[i] = soft_threshold(dy[i] + uy[i], thr);
            ux[i] += dx[i] - zx[i];
            uy[i] += dy[i] - zy[i];
        }
        let r: T = (0..d)
            .map(|i| (dx[i] - zx[i]).powi(2) + (dy[i] - zy[i]).powi(2))
            .sum();
        trace.primal_residuals.push(r.sqrt().to_f64_lossy());
    }
    let n = d / 2;
    let out = x[n..].iter().map(|&v| v.max(T::zero())).collect();
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneConfig;
    use crate::xpra::{assemble_kernel, build_diff_operators};

    fn system() -> InversionSystem<f64> {
        let cfg = SceneConfig::new(0.75, 0.75, 0.125, 10, (18, 18), (6, 6)).unwrap();
        let op = assemble_kernel(&cfg).unwrap();
        InversionSystem::normalized(op, build_diff_operators(6, 6).unwrap()).unwrap()
    }

    fn measurements(sys: &InversionSystem<f64>) -> Vec<f64> {
        (0..sys.links()).map(|l| (l as f64 * 0.37).sin()).collect()
    }

    #[test]
    fn normalized_operator_has_unit_norm() {
        let sys = system();
        let top = power_iteration(|v| sys.gram().matvec(v).unwrap(), sys.dim(), 300);
        assert!((top - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_measurements_give_zero_state() {
        let sys = system();
        let s = sys.tikhonov_init(0.1, 0.1, &vec![0.0; sys.links()]).unwrap();
        assert!(s.stacked().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn both_lambdas_zero_is_singular() {
        let sys = system();
        let dp = measurements(&sys);
        assert!(matches!(sys.tikhonov_init(0.0, 0.0, &dp), Err(Error::Singularity(_))));
    }

    #[test]
    fn ridge_shrinks_monotonically() {
        let sys = system();
        let dp = measurements(&sys);
        let norms: Vec<f64> = [1e-3, 1e-1, 10.0]
            .iter()
            .map(|&l| dot(&sys.tikhonov_solve(l, 0.0, &dp).unwrap(), &sys.tikhonov_solve(l, 0.0, &dp).unwrap()))
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2]);
    }

    #[test]
    fn gradient_vanishes_at_tikhonov_solution() {
        let sys = system();
        let dp = measurements(&sys);
        let x = sys.tikhonov_solve(0.05, 0.02, &dp).unwrap();
        let g = sys.grad_f(0.05, 0.02, &x, &dp).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-7));
        let x0 = vec![0.0; sys.dim()];
        let g0 = sys.grad_f(0.05, 0.02, &x0, &dp).unwrap();
        let b = sys.rhs(&dp).unwrap();
        for (a, c) in g0.iter().zip(&b) {
            assert_eq!(*a, -c);
        }
    }

    #[test]
    fn zero_step_identity_prox_is_noop() {
        let sys = system();
        let dp = measurements(&sys);
        let s = sys.tikhonov_init(0.05, 0.05, &dp).unwrap();
        let p = LayerParams { lambda1: 0.05, lambda2: 0.05, eta: 0.0 };
        assert_eq!(pgm_layer(&sys, &s, &dp, p, &IdentityProx).unwrap(), s);
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(2.0, 0.5), 1.5);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
    }

    #[test]
    fn admm_rejects_zero_rho() {
        let sys = system();
        let dp = measurements(&sys);
        let m = TvModel { layers: 3, lambda_tv: 0.1, rho: 0.0 };
        assert!(admm_tv(&m, &sys, &dp).is_err());
    }
}
