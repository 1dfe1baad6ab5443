use crate::em::disk_integral;
use crate::error::Result;
use crate::geometry::{Grid, Point};
use crate::scalar::{cplx, Cplx, Scalar};
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Discretized Green's operator `G_D` on a uniform grid with equivalent-circle
/// cell integrals. Entries depend only on the cell offset, so they are kept in
/// an offset table and the full operator is applied as a circulant
/// convolution of size `2nx × 2ny`.
pub struct GreensOperator<T: Scalar> {
    grid: Grid<T>,
    radius: T,
    centers: Vec<Point<T>>,
    // (2nx−1) × (2ny−1) offsets, x fastest
    table: Vec<Cplx<T>>,
    kernel_hat: Vec<Cplx<T>>,
    fft_x: Arc<dyn Fft<T>>,
    ifft_x: Arc<dyn Fft<T>>,
    fft_y: Arc<dyn Fft<T>>,
    ifft_y: Arc<dyn Fft<T>>,
}

impl<T: Scalar> GreensOperator<T> {
    pub fn new(grid: Grid<T>, k0: T) -> Result<Self> {
        let (nx, ny) = (grid.nx, grid.ny);
        let radius = (grid.cell_area() / T::PI()).sqrt();
        let (tw, th) = (2 * nx - 1, 2 * ny - 1);
        let mut table = Vec::with_capacity(tw * th);
        for j in 0..th {
            for i in 0..tw {
                let ox = T::from_usize_lossy(i) - T::from_usize_lossy(nx - 1);
                let oy = T::from_usize_lossy(j) - T::from_usize_lossy(ny - 1);
                let d = (ox * grid.dx()).hypot(oy * grid.dy());
                table.push(disk_integral(k0, radius, d)?);
            }
        }
        let (px, py) = (2 * nx, 2 * ny);
        let mut planner = FftPlanner::new();
        let fft_x = planner.plan_fft_forward(px);
        let ifft_x = planner.plan_fft_inverse(px);
        let fft_y = planner.plan_fft_forward(py);
        let ifft_y = planner.plan_fft_inverse(py);
        let mut op = Self {
            grid,
            radius,
            centers: grid.centers(),
            table,
            kernel_hat: Vec::new(),
            fft_x,
            ifft_x,
            fft_y,
            ifft_y,
        };
        let mut kernel = vec![cplx(T::zero(), T::zero()); px * py];
        for oy in -(ny as isize - 1)..=(ny as isize - 1) {
            for ox in -(nx as isize - 1)..=(nx as isize - 1) {
                let ix = ox.rem_euclid(px as isize) as usize;
                let iy = oy.rem_euclid(py as isize) as usize;
                kernel[iy * px + ix] = op.offset(ox, oy);
            }
        }
        op.fft2(&mut kernel, false);
        op.kernel_hat = kernel;
        Ok(op)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    /// Equivalent-circle radius `a = √(Δa/π)`.
    pub fn radius(&self) -> T {
        self.radius
    }

    pub fn centers(&self) -> &[Point<T>] {
        &self.centers
    }

    #[inline]
    fn offset(&self, ox: isize, oy: isize) -> Cplx<T> {
        let tw = 2 * self.grid.nx - 1;
        let i = (ox + self.grid.nx as isize - 1) as usize;
        let j = (oy + self.grid.ny as isize - 1) as usize;
        self.table[j * tw + i]
    }

    /// `(G_D)_{mn} = ∫_{cell n} g(r_m, r′) dr′`.
    #[inline]
    pub fn entry(&self, m: usize, n: usize) -> Cplx<T> {
        let nx = self.grid.nx;
        let (mx, my) = ((m % nx) as isize, (m / nx) as isize);
        let (qx, qy) = ((n % nx) as isize, (n / nx) as isize);
        self.offset(mx - qx, my - qy)
    }

    /// Dense reference application (`O(N²)`).
    pub fn apply_dense(&self, x: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let n = self.grid.len();
        (0..n)
            .map(|m| {
                (0..n).fold(cplx(T::zero(), T::zero()), |acc, q| {
                    acc + self.entry(m, q) * x[q]
                })
            })
            .collect()
    }

    /// FFT application.
    pub fn apply(&self, x: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let (px, py) = (2 * nx, 2 * ny);
        let mut buf = vec![cplx(T::zero(), T::zero()); px * py];
        for iy in 0..ny {
            buf[iy * px..iy * px + nx].copy_from_slice(&x[iy * nx..(iy + 1) * nx]);
        }
        self.fft2(&mut buf, false);
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b = *b * *k;
        }
        self.fft2(&mut buf, true);
        let scale = T::one() / T::from_usize_lossy(px * py);
        let mut out = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            out.extend(buf[iy * px..iy * px + nx].iter().map(|v| *v * scale));
        }
        out
    }

    fn fft2(&self, buf: &mut [Cplx<T>], inverse: bool) {
        let (px, py) = (2 * self.grid.nx, 2 * self.grid.ny);
        let (fx, fy) = if inverse {
            (&self.ifft_x, &self.ifft_y)
        } else {
            (&self.fft_x, &self.fft_y)
        };
        fx.process(buf);
        let mut t = transpose(buf, px, py);
        fy.process(&mut t);
        let back = transpose(&t, py, px);
        buf.copy_from_slice(&back);
    }
}

fn transpose<T: Copy>(src: &[T], cols: usize, rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_matches_dense_application() {
        let grid = Grid::new(16, 16, 0.4, 0.4);
        let op = GreensOperator::new(grid, 2.0 * std::f64::consts::PI / 0.125).unwrap();
        let x: Vec<Cplx<f64>> = (0..256)
            .map(|i| Cplx::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let a = op.apply(&x);
        let b = op.apply_dense(&x);
        let scale = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).norm() <= 1e-12 * scale.max(1.0), "{p} vs {q}");
        }
    }

    #[test]
    fn rectangular_grid_fft_matches_dense() {
        let grid = Grid::new(9, 5, 0.3, 0.2);
        let op = GreensOperator::new(grid, 40.0).unwrap();
        let x: Vec<Cplx<f64>> = (0..45).map(|i| Cplx::new(1.0 / (1.0 + i as f64), 0.5)).collect();
        for (p, q) in op.apply(&x).iter().zip(op.apply_dense(&x)) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn entries_are_symmetric() {
        let op = GreensOperator::new(Grid::new(6, 4, 0.3, 0.2), 30.0f64).unwrap();
        for m in 0..24 {
            for n in 0..24 {
                assert_eq!(op.entry(m, n), op.entry(n, m));
            }
        }
    }
}
