//! Electromagnetic building blocks: cylinder functions, the 2D free-space
//! Green's function, line-source incident fields, equivalent-circle cell
//! integrals and the xPRA contrast formula.
//!
//! Time convention is `e^{+jωt}`: outgoing waves are `H0⁽²⁾` and
//! `g(r, r′) = H0⁽²⁾(k₀|r − r′|)/(4j)`. Permittivities are quoted as
//! `ε_R + jε_I` with `ε_I ≥ 0` meaning loss; under this time convention the
//! field equations see the conjugate `ε_R − jε_I` (see [`physical_contrast`]).

pub mod bessel;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scalar::{cplx, Cplx, Scalar};
pub use bessel::{bessel, hankel2_0, hankel2_1, j0, j1, y0, y1, BesselKind};

/// `1/(4j) · z`
#[inline]
fn over_4j<T: Scalar>(z: Cplx<T>) -> Cplx<T> {
    cplx(z.im, -z.re) / T::c(4.0)
}

/// Homogeneous 2D Green's function `g = H0⁽²⁾(k₀|r − r′|)/(4j)`.
pub fn greens_2d<T: Scalar>(k0: T, r: Point<T>, r_prime: Point<T>) -> Result<Cplx<T>> {
    let d = r.distance(r_prime);
    if d == T::zero() {
        return Err(Error::Singularity(format!(
            "Green's function evaluated at coincident points ({}, {})",
            r.x, r.y
        )));
    }
    greens_at_distance(k0, d)
}

pub(crate) fn greens_at_distance<T: Scalar>(k0: T, d: T) -> Result<Cplx<T>> {
    Ok(over_4j(hankel2_0(k0 * d)?))
}

/// Field of a line source of complex `amplitude` at `tx`, sampled at `points`.
pub fn incident_field<T: Scalar>(
    k0: T,
    tx: Point<T>,
    points: &[Point<T>],
    amplitude: Cplx<T>,
) -> Result<Vec<Cplx<T>>> {
    points
        .iter()
        .map(|&p| greens_2d(k0, p, tx).map(|g| g * amplitude))
        .collect()
}

/// Contrast seen by the field equations for a permittivity quoted with the
/// loss-positive sign: `χ_ε = conj(ε_r) − 1`.
#[inline]
pub fn physical_contrast<T: Scalar>(eps_r: Cplx<T>) -> Cplx<T> {
    eps_r.conj() - cplx(T::one(), T::zero())
}

/// Extended phaseless Rytov contrast
/// `χ = 2(√ε_R cos θˢ − 1) + j ε_I cos θⁱ / √(ε_R − sin²θⁱ)`.
pub fn xpra_contrast<T: Scalar>(eps_r: Cplx<T>, theta_i: T, theta_s: T) -> Result<Cplx<T>> {
    let sin2 = theta_i.sin().powi(2);
    if !(eps_r.re > sin2) {
        return Err(Error::Branch {
            eps_r: eps_r.re.to_f64_lossy(),
            sin2: sin2.to_f64_lossy(),
        });
    }
    let real = T::c(2.0) * (eps_r.re.sqrt() * theta_s.cos() - T::one());
    let imag = eps_r.im * theta_i.cos() / (eps_r.re - sin2).sqrt();
    Ok(cplx(real, imag))
}

/// Equivalent-circle cell integrals `∫_disk g(r, r′) dr′` for a disk of
/// radius `a` whose centre is at distance `rho` from the observation point.
///
/// Off-cell (`rho ≥ a`): `(2πa/k) J1(ka) H0⁽²⁾(kρ) / (4j)`.
/// Inside (`rho < a`): `(2π/k²)[ka H1⁽²⁾(ka) J0(kρ) − 2j/π] / (4j)`; at
/// `rho = 0` this is the self-cell term.
pub fn disk_integral<T: Scalar>(k: T, a: T, rho: T) -> Result<Cplx<T>> {
    if !(a > T::zero()) || !(k > T::zero()) || rho < T::zero() {
        return Err(Error::Domain(format!(
            "disk integral needs k > 0, a > 0, rho >= 0 (k={k}, a={a}, rho={rho})"
        )));
    }
    let two_pi = T::c(2.0) * T::PI();
    if rho >= a {
        let coeff = two_pi * a / k * j1(k * a);
        Ok(over_4j(hankel2_0(k * rho)? * coeff))
    } else {
        let ka = k * a;
        let inner = hankel2_1(ka)? * (ka * j0(k * rho)) - cplx(T::zero(), T::FRAC_2_PI());
        Ok(over_4j(inner * (two_pi / (k * k))))
    }
}
