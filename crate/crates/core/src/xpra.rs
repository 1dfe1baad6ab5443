//! Linear phaseless model: complex kernel `G`, real-stacked operator
//! `𝒢 = [Re G, −Im G]`, and first-difference operators on the inverse grid.

use crate::em::greens_2d;
use crate::error::{check_len, Error, Result};
use crate::geometry::{Grid, Point};
use crate::linalg::DenseMatrix;
use crate::scalar::{cplx, dot, Cplx, Scalar};
use crate::scene::{enumerate_links, place_nodes, LinkTable, SceneConfig};
use rayon::prelude::*;

/// `C₀ = 20 log₁₀ e`, the dB-per-neper factor.
pub const C0: f64 = 8.685_889_638_065_035;

/// Kernel `G` (L×N) and its real-stacked form (L×2N).
///
/// Entries are stored as `conj(C₀ k₀² g(r_rx, r_n) Eⁱ(r_n) Δa / Eⁱ(r_rx))`:
/// with the `e^{+jωt}` convention the conjugate makes `ΔP = Re(G χ)` hold for
/// contrasts quoted with loss-positive imaginary part.
#[derive(Clone, Debug)]
pub struct XpraOperator<T> {
    kernel: Vec<Cplx<T>>,
    stacked: DenseMatrix<T>,
    grid: Grid<T>,
    links: LinkTable,
}

pub fn assemble_kernel<T: Scalar>(config: &SceneConfig<T>) -> Result<XpraOperator<T>> {
    assemble_kernel_with_amplitude(config, cplx(T::one(), T::zero()))
}

/// As [`assemble_kernel`] with every line source scaled by `amplitude`
/// (which cancels).
pub fn assemble_kernel_with_amplitude<T: Scalar>(
    config: &SceneConfig<T>,
    amplitude: Cplx<T>,
) -> Result<XpraOperator<T>> {
    config.validate()?;
    let grid = config.inverse();
    let nodes = place_nodes(config);
    let links = enumerate_links(config.node_count)?;
    let centers = grid.centers();
    let n = grid.len();
    let k0 = config.k0();
    let scale = T::c(C0) * k0 * k0 * grid.cell_area();
    let rows: Vec<(usize, usize)> = links.iter().collect();
    let kernel_rows = rows
        .par_iter()
        .map(|&(tx, rx)| kernel_row(k0, scale, amplitude, nodes[tx], nodes[rx], &centers))
        .collect::<Result<Vec<_>>>()?;
    let l = links.len();
    let mut kernel = Vec::with_capacity(l * n);
    let mut stacked = DenseMatrix::zeros(l, 2 * n);
    for (r, row) in kernel_rows.into_iter().enumerate() {
        let out = stacked.row_mut(r);
        for (i, g) in row.iter().enumerate() {
            out[i] = g.re;
            out[n + i] = -g.im;
        }
        kernel.extend(row);
    }
    Ok(XpraOperator {
        kernel,
        stacked,
        grid,
        links,
    })
}

fn kernel_row<T: Scalar>(
    k0: T,
    scale: T,
    amplitude: Cplx<T>,
    tx: Point<T>,
    rx: Point<T>,
    centers: &[Point<T>],
) -> Result<Vec<Cplx<T>>> {
    let inc_rx = greens_2d(k0, rx, tx)? * amplitude;
    centers
        .iter()
        .map(|&c| {
            let g = greens_2d(k0, rx, c).map_err(|_| coincident(rx))?;
            let inc = greens_2d(k0, c, tx).map_err(|_| coincident(tx))? * amplitude;
            Ok((g * inc / inc_rx * scale).conj())
        })
        .collect()
}

fn coincident<T: Scalar>(p: Point<T>) -> Error {
    Error::Singularity(format!(
        "node ({}, {}) coincides with an inverse-grid cell centre",
        p.x, p.y
    ))
}

impl<T: Scalar> XpraOperator<T> {
    pub fn links(&self) -> &LinkTable {
        &self.links
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    /// Number of links `L`.
    pub fn rows(&self) -> usize {
        self.links.len()
    }

    /// Number of cells `N`.
    pub fn cells(&self) -> usize {
        self.grid.len()
    }

    /// `G_{l,n}`.
    pub fn kernel(&self, l: usize, n: usize) -> Cplx<T> {
        self.kernel[l * self.cells() + n]
    }

    /// `𝒢` (L×2N).
    pub fn stacked(&self) -> &DenseMatrix<T> {
        &self.stacked
    }

    /// `ΔP̂ = 𝒢 [χ_R; χ_I]`.
    pub fn predict(&self, state: &ReconstructionState<T>) -> Result<Vec<T>> {
        check_len("state cells", self.cells(), state.chi_r.len())?;
        self.stacked.matvec(&state.stacked())
    }

    /// `Re(G (χ_R + jχ_I))`, computed from the complex kernel.
    pub fn predict_complex(&self, chi: &[Cplx<T>]) -> Result<Vec<T>> {
        check_len("contrast cells", self.cells(), chi.len())?;
        let n = self.cells();
        Ok((0..self.rows())
            .map(|l| {
                self.kernel[l * n..(l + 1) * n]
                    .iter()
                    .zip(chi)
                    .fold(T::zero(), |acc, (g, c)| acc + (g * c).re)
            })
            .collect())
    }

    /// `𝒢ᵀ r`.
    pub fn adjoint_apply(&self, residual: &[T]) -> Result<Vec<T>> {
        self.stacked.matvec_t(residual)
    }
}

/// Compressed-row sparse matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    fn from_rows(cols: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in &rows {
            for &(c, v) in row {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("sparse matvec input", self.cols, x.len())?;
        Ok((0..self.rows)
            .map(|r| self.row(r).fold(T::zero(), |acc, (c, v)| acc + v * x[c]))
            .collect())
    }

    pub fn matvec_t(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("sparse transposed matvec input", self.rows, x.len())?;
        let mut y = vec![T::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
        Ok(y)
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d.set(r, c, d.get(r, c) + v);
            }
        }
        d
    }
}

/// Forward differences `D_x`, `D_y` (2N×2N, block-diagonal over `[χ_R; χ_I]`)
/// with zero rows on the trailing edge.
#[derive(Clone, Debug)]
pub struct DiffOperators<T> {
    pub nx: usize,
    pub ny: usize,
    pub dx: SparseMatrix<T>,
    pub dy: SparseMatrix<T>,
}

pub fn build_diff_operators<T: Scalar>(nx: usize, ny: usize) -> Result<DiffOperators<T>> {
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidConfig(format!(
            "difference operators need nx, ny >= 2, got {nx}×{ny}"
        )));
    }
    let n = nx * ny;
    let mut dx = Vec::with_capacity(2 * n);
    let mut dy = Vec::with_capacity(2 * n);
    for block in 0..2 {
        let off = block * n;
        for iy in 0..ny {
            for ix in 0..nx {
                let i = off + iy * nx + ix;
                dx.push(if ix + 1 < nx {
                    vec![(i, -T::one()), (i + 1, T::one())]
                } else {
                    Vec::new()
                });
                dy.push(if iy + 1 < ny {
                    vec![(i, -T::one()), (i + nx, T::one())]
                } else {
                    Vec::new()
                });
            }
        }
    }
    Ok(DiffOperators {
        nx,
        ny,
        dx: SparseMatrix::from_rows(2 * n, dx),
        dy: SparseMatrix::from_rows(2 * n, dy),
    })
}

impl<T: Scalar> DiffOperators<T> {
    /// Length of the stacked state, `2N`.
    pub fn dim(&self) -> usize {
        2 * self.nx * self.ny
    }

    /// `(D_xᵀD_x + D_yᵀD_y) x`, evaluated stencil-wise.
    pub fn regularizer_apply(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); x.len()];
        self.regularizer_apply_into(x, &mut y);
        y
    }

    pub(crate) fn regularizer_apply_into(&self, x: &[T], y: &mut [T]) {
        let (nx, ny) = (self.nx, self.ny);
        let n = nx * ny;
        for block in 0..2 {
            let off = block * n;
            for iy in 0..ny {
                for ix in 0..nx {
                    let i = off + iy * nx + ix;
                    let mut acc = T::zero();
                    if ix + 1 < nx {
                        acc += x[i] - x[i + 1];
                    }
                    if ix > 0 {
                        acc += x[i] - x[i - 1];
                    }
                    if iy + 1 < ny {
                        acc += x[i] - x[i + nx];
                    }
                    if iy > 0 {
                        acc += x[i] - x[i - nx];
                    }
                    y[i] = acc;
                }
            }
        }
    }

    /// Dense `D_xᵀD_x + D_yᵀD_y`.
    pub fn regularizer_dense(&self) -> DenseMatrix<T> {
        let d = self.dim();
        let mut m = DenseMatrix::zeros(d, d);
        let mut e = vec![T::zero(); d];
        for c in 0..d {
            e[c] = T::one();
            let col = self.regularizer_apply(&e);
            for (r, v) in col.into_iter().enumerate() {
                if v != T::zero() {
                    m.set(r, c, v);
                }
            }
            e[c] = T::zero();
        }
        m
    }

    /// `‖D_x x‖₁ + ‖D_y x‖₁`.
    pub fn tv_norm(&self, x: &[T]) -> Result<T> {
        let a = self.dx.matvec(x)?;
        let b = self.dy.matvec(x)?;
        Ok(a.iter().chain(&b).map(|v| v.abs()).sum())
    }
}

/// Stacked contrast estimate `[χ_R; χ_I]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionState<T> {
    pub chi_r: Vec<T>,
    pub chi_i: Vec<T>,
}

impl<T: Scalar> ReconstructionState<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            chi_r: vec![T::zero(); n],
            chi_i: vec![T::zero(); n],
        }
    }

    pub fn from_stacked(x: &[T]) -> Result<Self> {
        if !x.len().is_multiple_of(2) {
            return Err(Error::Dimension {
                what: "stacked state length (must be even)",
                expected: x.len() + 1,
                got: x.len(),
            });
        }
        let n = x.len() / 2;
        Ok(Self {
            chi_r: x[..n].to_vec(),
            chi_i: x[n..].to_vec(),
        })
    }

    pub fn stacked(&self) -> Vec<T> {
        let mut v = self.chi_r.clone();
        v.extend_from_slice(&self.chi_i);
        v
    }

    pub fn cells(&self) -> usize {
        self.chi_r.len()
    }

    /// Clips `χ_I` at zero; `χ_R` stays signed.
    pub fn relu_imag(mut self) -> Self {
        for v in &mut self.chi_i {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        self
    }

    pub fn norm(&self) -> T {
        (dot(&self.chi_r, &self.chi_r) + dot(&self.chi_i, &self.chi_i)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SceneConfig<f64> {
        SceneConfig::new(0.6, 0.6, 0.125, 8, (12, 12), (6, 6)).unwrap()
    }

    #[test]
    fn c0_value() {
        assert!((C0 - 20.0 * std::f64::consts::E.log10()).abs() < 1e-12);
    }

    #[test]
    fn stacked_blocks_are_re_and_minus_im() {
        let op = assemble_kernel(&toy()).unwrap();
        let n = op.cells();
        for l in 0..op.rows() {
            for i in 0..n {
                assert_eq!(op.stacked().get(l, i), op.kernel(l, i).re);
                assert_eq!(op.stacked().get(l, n + i), -op.kernel(l, i).im);
            }
        }
    }

    #[test]
    fn zero_state_predicts_zero() {
        let op = assemble_kernel(&toy()).unwrap();
        let p = op.predict(&ReconstructionState::zeros(36)).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amplitude_cancels() {
        let a = assemble_kernel(&toy()).unwrap();
        let b = assemble_kernel_with_amplitude(&toy(), Cplx::new(-3.0, 7.0)).unwrap();
        for l in 0..a.rows() {
            for n in 0..a.cells() {
                let (x, y) = (a.kernel(l, n), b.kernel(l, n));
                assert!((x - y).norm() <= 1e-12 * x.norm());
            }
        }
    }

    #[test]
    fn diff_rows_and_boundary() {
        let d = build_diff_operators::<f64>(4, 3).unwrap();
        for r in 0..d.dim() {
            let row: Vec<_> = d.dx.row(r).collect();
            assert!(row.len() <= 2);
            let ix = (r % 12) % 4;
            if ix == 3 {
                assert!(row.is_empty());
            }
        }
        let ramp: Vec<f64> = (0..24).map(|i| ((i % 12) % 4) as f64).collect();
        let gx = d.dx.matvec(&ramp).unwrap();
        let gy = d.dy.matvec(&ramp).unwrap();
        for (i, v) in gx.iter().enumerate() {
            let want = if (i % 12) % 4 == 3 { 0.0 } else { 1.0 };
            assert_eq!(*v, want);
        }
        assert!(gy.iter().all(|&v| v == 0.0));
        assert!(build_diff_operators::<f64>(1, 4).is_err());
    }

    #[test]
    fn regularizer_matches_sparse_products() {
        let d = build_diff_operators::<f64>(5, 4).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = d.regularizer_apply(&x);
        let dx = d.dx.matvec(&x).unwrap();
        let dy = d.dy.matvec(&x).unwrap();
        let mut b = d.dx.matvec_t(&dx).unwrap();
        for (bi, v) in b.iter_mut().zip(d.dy.matvec_t(&dy).unwrap()) {
            *bi += v;
        }
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn state_relu_only_touches_imaginary_half() {
        let s = ReconstructionState {
            chi_r: vec![-1.0, 2.0],
            chi_i: vec![-0.5, 0.5],
        }
        .relu_imag();
        assert_eq!(s.chi_r, vec![-1.0, 2.0]);
        assert_eq!(s.chi_i, vec![0.0, 0.5]);
        assert_eq!(ReconstructionState::from_stacked(&s.stacked()).unwrap(), s);
    }
}
