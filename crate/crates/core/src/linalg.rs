//! Small dense linear-algebra kit: row-major matrices, Cholesky, complex LU,
//! conjugate gradients and power iteration.

use crate::error::{check_len, Error, Result};
use crate::scalar::{dot, Cplx, Scalar};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + num_traits::Zero> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("matvec input", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `y = Aᵀ x`
    pub fn matvec_t(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("transposed matvec input", self.rows, x.len())?;
        let mut y = vec![T::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == T::zero() {
                continue;
            }
            for (yc, &a) in y.iter_mut().zip(self.row(r)) {
                *yc += a * xr;
            }
        }
        Ok(y)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// `AᵀA`, symmetrized from its lower triangle.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        gemm(
            T::one(),
            &self.data,
            Layout::transposed(self.rows, self.cols),
            &self.data,
            Layout::row_major(self.rows, self.cols),
            T::zero(),
            &mut g.data,
            Layout::row_major(n, n),
        )
        .expect("layouts are consistent");
        for i in 0..n {
            for j in 0..i {
                let v = g.get(i, j);
                g.set(j, i, v);
            }
        }
        g
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_len("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            T::one(),
            &self.data,
            Layout::row_major(self.rows, self.cols),
            &other.data,
            Layout::row_major(other.rows, other.cols),
            T::zero(),
            &mut out.data,
            Layout::row_major(self.rows, other.cols),
        )?;
        Ok(out)
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Matrix view: dimensions plus row/column strides into a slice.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl Layout {
    /// Contiguous row-major `rows × cols`.
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a contiguous row-major `rows × cols` buffer, seen as
    /// a `cols × rows` matrix.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        let last = (self.rows as isize - 1) * self.row_stride + (self.cols as isize - 1) * self.col_stride;
        last as usize + 1
    }
}

/// `C ← αAB + βC`, bounds-checked.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) -> Result<()> {
    check_len("gemm inner dimension", la.cols, lb.rows)?;
    check_len("gemm output rows", la.rows, lc.rows)?;
    check_len("gemm output cols", lb.cols, lc.cols)?;
    if a.len() < la.span() || b.len() < lb.span() || c.len() < lc.span() {
        return Err(Error::Contract("gemm operand shorter than its layout".into()));
    }
    if lc.rows == 0 || lc.cols == 0 {
        return Ok(());
    }
    // SAFETY: spans checked above; strides are non-negative by construction
    unsafe {
        T::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            lc.row_stride,
            lc.col_stride,
        );
    }
    Ok(())
}

/// Cholesky factor `A = L Lᵀ` of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    n: usize,
    // lower triangle, row-major
    l: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self> {
        check_len("cholesky square", a.rows(), a.cols())?;
        let n = a.rows();
        let mut l = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let s = {
                    let (li, lj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                    a.get(i, j) - dot(li, lj)
                };
                if i == j {
                    if !(s > T::zero()) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        check_len("cholesky rhs", self.n, b.len())?;
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let s = y[i] - dot(&self.l[i * n..i * n + i], &y[..i]);
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        Ok(y)
    }
}

/// LU factorization with partial pivoting for complex square matrices.
#[derive(Clone, Debug)]
pub struct ComplexLu<T> {
    n: usize,
    lu: Vec<Cplx<T>>,
    perm: Vec<usize>,
}

impl<T: Scalar> ComplexLu<T> {
    /// Factors the row-major `n × n` matrix in `a`.
    pub fn factor(n: usize, mut a: Vec<Cplx<T>>) -> Result<Self> {
        check_len("lu data", n * n, a.len())?;
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].norm();
            for i in k + 1..n {
                let v = a[i * n + k].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return Err(Error::SingularMatrix { pivot: k });
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            let (upper, lower) = a.split_at_mut((k + 1) * n);
            let krow = &upper[k * n + k + 1..k * n + n];
            for i in 0..n - k - 1 {
                let row = &mut lower[i * n..(i + 1) * n];
                let factor = row[k] / pivot;
                row[k] = factor;
                if factor == Cplx::new(T::zero(), T::zero()) {
                    continue;
                }
                for (x, &u) in row[k + 1..].iter_mut().zip(krow) {
                    *x -= factor * u;
                }
            }
        }
        Ok(Self { n, lu: a, perm })
    }

    pub fn solve(&self, b: &[Cplx<T>]) -> Result<Vec<Cplx<T>>> {
        check_len("lu rhs", self.n, b.len())?;
        let n = self.n;
        let mut y: Vec<Cplx<T>> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lu[i * n + k] * y[k];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.lu[i * n + k] * y[k];
            }
            y[i] = s / self.lu[i * n + i];
        }
        Ok(y)
    }
}

/// Outcome of an iterative solve.
#[derive(Clone, Debug)]
pub struct IterativeOutcome<V> {
    pub solution: V,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

/// Conjugate gradients for a symmetric positive-definite operator.
pub fn conjugate_gradient<T, F>(
    apply: F,
    b: &[T],
    tol: f64,
    max_iter: usize,
) -> Result<IterativeOutcome<Vec<T>>>
where
    T: Scalar,
    F: Fn(&[T]) -> Vec<T>,
{
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![T::zero(); n];
    if bnorm == T::zero() {
        return Ok(IterativeOutcome {
            solution: x,
            iterations: 0,
            residual_history: vec![0.0],
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut history = Vec::new();
    for it in 0..max_iter {
        let ap = apply(&p);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let rel = (rr_new.sqrt() / bnorm).to_f64_lossy();
        history.push(rel);
        if rel <= tol {
            return Ok(IterativeOutcome {
                solution: x,
                iterations: it + 1,
                residual_history: history,
            });
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Largest eigenvalue of a symmetric positive semi-definite operator by power
/// iteration from a fixed deterministic start vector.
pub fn power_iteration<T, F>(apply: F, n: usize, iterations: usize) -> T
where
    T: Scalar,
    F: Fn(&[T]) -> Vec<T>,
{
    // deterministic, non-degenerate start
    let mut v: Vec<T> = (0..n)
        .map(|i| T::one() + T::c(0.5) * T::c(((i * 7919) % 101) as f64 / 101.0))
        .collect();
    let mut nrm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= nrm);
    let mut lambda = T::zero();
    for _ in 0..iterations {
        let w = apply(&v);
        lambda = dot(&v, &w);
        nrm = dot(&w, &w).sqrt();
        if nrm == T::zero() {
            return T::zero();
        }
        v = w.into_iter().map(|x| x / nrm).collect();
    }
    lambda.max(nrm)
}
