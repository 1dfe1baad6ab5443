use crate::error::{Error, Result};
use crate::linalg::IterativeOutcome;
use crate::scalar::{cplx, Cplx, Scalar};

fn inner<T: Scalar>(a: &[Cplx<T>], b: &[Cplx<T>]) -> Cplx<T> {
    a.iter()
        .zip(b)
        .fold(cplx(T::zero(), T::zero()), |acc, (x, y)| acc + x.conj() * y)
}

fn norm<T: Scalar>(a: &[Cplx<T>]) -> T {
    a.iter().map(|v| v.norm_sqr()).sum::<T>().sqrt()
}

/// BiCGStab for a general complex operator, zero initial guess.
/// `tol` is relative to `‖b‖`.
pub fn bicgstab<T, F>(
    apply: F,
    b: &[Cplx<T>],
    tol: f64,
    max_iter: usize,
) -> Result<IterativeOutcome<Vec<Cplx<T>>>>
where
    T: Scalar,
    F: Fn(&[Cplx<T>]) -> Vec<Cplx<T>>,
{
    let n = b.len();
    let zero = cplx(T::zero(), T::zero());
    let one = cplx(T::one(), T::zero());
    let mut x = vec![zero; n];
    let bnorm = norm(b);
    if bnorm == T::zero() {
        return Ok(IterativeOutcome {
            solution: x,
            iterations: 0,
            residual_history: vec![0.0],
        });
    }
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let mut p = vec![zero; n];
    let mut v = vec![zero; n];
    let (mut rho_old, mut alpha, mut omega) = (one, one, one);
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let rho = inner(&r_hat, &r);
        if rho.norm() == T::zero() {
            break;
        }
        let beta = (rho / rho_old) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        v = apply(&p);
        alpha = rho / inner(&r_hat, &v);
        let s: Vec<Cplx<T>> = r.iter().zip(&v).map(|(&ri, &vi)| ri - alpha * vi).collect();
        let s_rel = (norm(&s) / bnorm).to_f64_lossy();
        if s_rel <= tol {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            history.push(s_rel);
            return Ok(IterativeOutcome {
                solution: x,
                iterations: it,
                residual_history: history,
            });
        }
        let t = apply(&s);
        let tt = inner(&t, &t);
        omega = if tt.norm() == T::zero() {
            zero
        } else {
            inner(&t, &s) / tt
        };
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        let rel = (norm(&r) / bnorm).to_f64_lossy();
        history.push(rel);
        if rel <= tol {
            return Ok(IterativeOutcome {
                solution: x,
                iterations: it,
                residual_history: history,
            });
        }
        if omega.norm() == T::zero() || !rel.is_finite() {
            break;
        }
        rho_old = rho;
    }
    Err(Error::NoConvergence {
        iterations: history.len(),
        last_residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_converges_in_one_step() {
        let b: Vec<Cplx<f64>> = (0..10).map(|i| Cplx::new(i as f64, 1.0)).collect();
        let out = bicgstab(|x| x.to_vec(), &b, 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 1);
        for (s, t) in out.solution.iter().zip(&b) {
            assert!((s - t).norm() < 1e-14);
        }
    }

    #[test]
    fn nonsymmetric_system() {
        let n = 30;
        let apply = |x: &[Cplx<f64>]| -> Vec<Cplx<f64>> {
            (0..n)
                .map(|i| {
                    let mut v = x[i] * Cplx::new(4.0, 1.0);
                    if i > 0 {
                        v += x[i - 1] * Cplx::new(-1.0, 0.3);
                    }
                    if i + 1 < n {
                        v += x[i + 1] * Cplx::new(0.5, -0.2);
                    }
                    v
                })
                .collect()
        };
        let truth: Vec<Cplx<f64>> = (0..n).map(|i| Cplx::new((i as f64).cos(), 0.1)).collect();
        let b = apply(&truth);
        let out = bicgstab(apply, &b, 1e-12, 200).unwrap();
        for (s, t) in out.solution.iter().zip(&truth) {
            assert!((s - t).norm() < 1e-10);
        }
    }

    #[test]
    fn reports_history_on_failure() {
        let b = vec![Cplx::new(1.0, 0.0); 4];
        let diag = |x: &[Cplx<f64>]| -> Vec<Cplx<f64>> {
            x.iter().enumerate().map(|(i, v)| v * (1.0 + i as f64)).collect()
        };
        let err = bicgstab(diag, &b, 1e-30, 1).unwrap_err();
        match err {
            Error::NoConvergence { history, .. } => assert!(!history.is_empty()),
            e => panic!("{e}"),
        }
    }
}
