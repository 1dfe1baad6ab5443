//! Cylinder functions of integer order.
//!
//! `J0`, `J1`, `Y0`, `Y1` use the ascending power series below
//! [`SERIES_CROSSOVER`] and Hankel's asymptotic expansion above it. At the
//! crossover the largest series term is ~3e4 (cancellation costs ~4 digits)
//! while the smallest asymptotic term is ~e^{-28}; both sides stay below
//! 1e-11 absolute error in `f64`.
//!
//! Higher orders come from recurrences: Miller's backward recurrence for `J`
//! (real or complex argument) and upward recurrence for `Y`.

use crate::error::{Error, Result};
use crate::scalar::{cplx, Cplx, Scalar};

/// Argument at which the power series hands over to the asymptotic expansion.
pub const SERIES_CROSSOVER: f64 = 14.0;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// The four orders exposed as standalone functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BesselKind {
    J0,
    J1,
    Y0,
    Y1,
}

/// Evaluates one of `J0`, `J1`, `Y0`, `Y1`.
pub fn bessel<T: Scalar>(kind: BesselKind, x: T) -> Result<T> {
    match kind {
        BesselKind::J0 => Ok(j0(x)),
        BesselKind::J1 => Ok(j1(x)),
        BesselKind::Y0 => y0(x),
        BesselKind::Y1 => y1(x),
    }
}

pub fn j0<T: Scalar>(x: T) -> T {
    let ax = x.abs();
    if ax < T::c(SERIES_CROSSOVER) {
        series_j(0, ax)
    } else {
        hankel_asymptotic(0, ax).0
    }
}

pub fn j1<T: Scalar>(x: T) -> T {
    let ax = x.abs();
    let v = if ax < T::c(SERIES_CROSSOVER) {
        series_j(1, ax)
    } else {
        hankel_asymptotic(1, ax).0
    };
    if x < T::zero() {
        -v
    } else {
        v
    }
}

pub fn y0<T: Scalar>(x: T) -> Result<T> {
    check_positive(x)?;
    Ok(if x < T::c(SERIES_CROSSOVER) {
        let two_pi = T::FRAC_2_PI();
        two_pi * ((x / T::c(2.0)).ln() + T::c(EULER_GAMMA)) * series_j(0, x)
            + two_pi * y0_tail(x)
    } else {
        hankel_asymptotic(0, x).1
    })
}

pub fn y1<T: Scalar>(x: T) -> Result<T> {
    check_positive(x)?;
    Ok(if x < T::c(SERIES_CROSSOVER) {
        -T::FRAC_2_PI() / x + T::FRAC_2_PI() * (x / T::c(2.0)).ln() * series_j(1, x)
            - T::FRAC_1_PI() * y1_tail(x)
    } else {
        hankel_asymptotic(1, x).1
    })
}

/// `H0⁽²⁾(x) = J0(x) − j·Y0(x)`.
pub fn hankel2_0<T: Scalar>(x: T) -> Result<Cplx<T>> {
    Ok(cplx(j0(x), -y0(x)?))
}

/// `H1⁽²⁾(x) = J1(x) − j·Y1(x)`.
pub fn hankel2_1<T: Scalar>(x: T) -> Result<Cplx<T>> {
    Ok(cplx(j1(x), -y1(x)?))
}

fn check_positive<T: Scalar>(x: T) -> Result<()> {
    if x > T::zero() && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "Y-family Bessel function needs x > 0, got {}",
            x
        )))
    }
}

fn tiny<T: Scalar>() -> T {
    T::epsilon() * T::c(1e-3)
}

/// `J_n(x)` for n ∈ {0, 1} by the ascending series.
fn series_j<T: Scalar>(n: u32, x: T) -> T {
    let q = x * x / T::c(4.0);
    let mut term = if n == 0 { T::one() } else { x / T::c(2.0) };
    let mut sum = term;
    let nn = T::c(n as f64);
    let mut k = T::zero();
    loop {
        k += T::one();
        term = -term * q / (k * (k + nn));
        sum += term;
        if term.abs() < tiny::<T>() && k > q.sqrt() {
            break;
        }
    }
    sum
}

/// Σ_{k≥1} (−1)^{k+1} H_k q^k/(k!)².
fn y0_tail<T: Scalar>(x: T) -> T {
    let q = x * x / T::c(4.0);
    let mut pow = T::one();
    let mut harmonic = T::zero();
    let mut sum = T::zero();
    let mut k = T::zero();
    loop {
        k += T::one();
        pow = -pow * q / (k * k);
        harmonic += T::one() / k;
        let term = -pow * harmonic;
        sum += term;
        if term.abs() < tiny::<T>() && k > q.sqrt() {
            break;
        }
    }
    sum
}

/// Σ_{k≥0} (−1)^k (ψ(k+1) + ψ(k+2)) (x/2)^{2k+1}/(k!(k+1)!).
fn y1_tail<T: Scalar>(x: T) -> T {
    let q = x * x / T::c(4.0);
    let gamma = T::c(EULER_GAMMA);
    let mut pow = x / T::c(2.0);
    // ψ(1) = −γ, ψ(2) = 1 − γ
    let mut psi_a = -gamma;
    let mut psi_b = T::one() - gamma;
    let mut sum = pow * (psi_a + psi_b);
    let mut k = T::zero();
    loop {
        k += T::one();
        pow = -pow * q / (k * (k + T::one()));
        psi_a += T::one() / k;
        psi_b += T::one() / (k + T::one());
        let term = pow * (psi_a + psi_b);
        sum += term;
        if term.abs() < tiny::<T>() && k > q.sqrt() {
            break;
        }
    }
    sum
}

/// Hankel's expansion; returns `(J_n(x), Y_n(x))`.
fn hankel_asymptotic<T: Scalar>(n: u32, x: T) -> (T, T) {
    let mu = T::c(4.0 * (n * n) as f64);
    let mut p = T::one();
    let mut q = T::zero();
    let mut t = T::one();
    let mut prev = T::infinity();
    for k in 1..200u32 {
        let odd = T::c((2 * k - 1) as f64);
        t = t * (mu - odd * odd) / (T::c(k as f64) * T::c(8.0) * x);
        if t.abs() > prev || t == T::zero() {
            break;
        }
        prev = t.abs();
        match k % 4 {
            1 => q += t,
            2 => p -= t,
            3 => q -= t,
            _ => p += t,
        }
        if t.abs() < tiny::<T>() {
            break;
        }
    }
    let phase = x - (T::c(n as f64) / T::c(2.0) + T::c(0.25)) * T::PI();
    let amp = (T::FRAC_2_PI() / x).sqrt();
    let (s, c) = phase.sin_cos();
    (amp * (p * c - q * s), amp * (p * s + q * c))
}

/// `J_0(z), …, J_nmax(z)` for complex `z` by Miller's backward recurrence,
/// normalized with `J0 + 2 Σ J_2k = 1`.
pub fn bessel_j_seq_complex<T: Scalar>(nmax: usize, z: Cplx<T>) -> Vec<Cplx<T>> {
    let zero = cplx(T::zero(), T::zero());
    let mut out = vec![zero; nmax + 1];
    if z.norm() == T::zero() {
        out[0] = cplx(T::one(), T::zero());
        return out;
    }
    let az = z.norm().to_f64_lossy();
    let top = nmax.max(az.ceil() as usize);
    let mut start = top + 20 + (40.0 * top as f64).sqrt() as usize;
    if start % 2 == 1 {
        start += 1;
    }
    let big = T::c(1e150);
    let mut next = zero; // J_{k+1}
    let mut cur = cplx(T::c(1e-30), T::zero()); // J_k
    let mut norm = zero;
    for k in (1..=start).rev() {
        if k <= nmax {
            out[k] = cur;
        }
        if k % 2 == 0 {
            norm += cur * T::c(2.0);
        }
        let prev = cur * (T::c(2.0 * k as f64)) / z - next;
        next = cur;
        cur = prev;
        if cur.norm() > big {
            let s = T::one() / big;
            cur = cur * s;
            next = next * s;
            norm = norm * s;
            for v in out.iter_mut() {
                *v = *v * s;
            }
        }
    }
    out[0] = cur;
    norm += cur;
    for v in out.iter_mut() {
        *v = *v / norm;
    }
    out
}

/// `J_0(x), …, J_nmax(x)` for real `x ≥ 0`.
pub fn bessel_j_seq<T: Scalar>(nmax: usize, x: T) -> Vec<T> {
    let mut seq: Vec<T> = bessel_j_seq_complex(nmax, cplx(x, T::zero()))
        .into_iter()
        .map(|c| c.re)
        .collect();
    // anchor the two lowest orders to the direct evaluations
    seq[0] = j0(x);
    if nmax >= 1 {
        seq[1] = j1(x);
    }
    seq
}

/// `Y_0(x), …, Y_nmax(x)` by upward recurrence (stable for Y).
pub fn bessel_y_seq<T: Scalar>(nmax: usize, x: T) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(nmax + 1);
    out.push(y0(x)?);
    if nmax >= 1 {
        out.push(y1(x)?);
    }
    for k in 1..nmax {
        let v = T::c(2.0 * k as f64) / x * out[k] - out[k - 1];
        out.push(v);
    }
    Ok(out)
}
