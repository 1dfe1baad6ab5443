use crate::em::bessel::{bessel_j_seq_complex, bessel_y_seq};
use crate::em::{greens_2d, physical_contrast};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scalar::{cplx, Cplx, Scalar};

/// Total field outside a homogeneous dielectric circular cylinder (centre
/// `center`, radius `radius`) illuminated by a unit line source at `tx`.
///
/// Eigenfunction expansion: the scattered field is
/// `(1/4j) Σ_n a_n H_n⁽²⁾(k₀ρ_s) H_n⁽²⁾(k₀ρ) e^{jn(φ−φ_s)}` with the TM
/// coefficients from continuity of `E_z` and `∂E_z/∂ρ` at the rim, truncated
/// at order `⌈k₀a√|ε|⌉ + 15`.
pub fn cylinder_series<T: Scalar>(
    k0: T,
    radius: T,
    eps_r: Cplx<T>,
    center: Point<T>,
    tx: Point<T>,
    eval: Point<T>,
) -> Result<Cplx<T>> {
    let (rho_s, phi_s) = polar(tx, center);
    let (rho, phi) = polar(eval, center);
    if !(rho > radius) || !(rho_s > radius) {
        return Err(Error::Domain(
            "cylinder series needs source and observation outside the cylinder".into(),
        ));
    }
    let eps = physical_contrast(eps_r) + cplx(T::one(), T::zero());
    let order = (k0 * radius * eps.norm().sqrt()).ceil().to_usize().unwrap_or(0) + 15;

    let x0 = k0 * radius;
    let k1 = eps.sqrt() * k0;
    let x1 = k1 * radius;
    let j_out = bessel_j_seq_complex(order + 1, cplx(x0, T::zero()));
    let y_out = bessel_y_seq(order + 1, x0)?;
    let j_in = bessel_j_seq_complex(order + 1, x1);
    let h_at = |x: T| -> Result<Vec<Cplx<T>>> {
        let j = bessel_j_seq_complex(order, cplx(x, T::zero()));
        let y = bessel_y_seq(order, x)?;
        Ok(j.iter().zip(&y).map(|(a, &b)| cplx(a.re, -b)).collect())
    };
    let h_src = h_at(k0 * rho_s)?;
    let h_obs = h_at(k0 * rho)?;

    // derivative of a cylinder function from its neighbours: C_n' = C_{n-1} − (n/x) C_n
    let deriv = |seq: &[Cplx<T>], n: usize, x: Cplx<T>| -> Cplx<T> {
        if n == 0 {
            -seq[1]
        } else {
            seq[n - 1] - seq[n] * T::from_usize_lossy(n) / x
        }
    };
    let h_rim: Vec<Cplx<T>> = j_out
        .iter()
        .zip(&y_out)
        .map(|(a, &b)| cplx(a.re, -b))
        .collect();
    let x0c = cplx(x0, T::zero());
    let k0c = cplx(k0, T::zero());

    let mut sum = cplx(T::zero(), T::zero());
    let mut last = T::zero();
    for n in 0..=order {
        let jn0 = j_out[n];
        let djn0 = deriv(&j_out, n, x0c);
        let hn0 = h_rim[n];
        let dhn0 = deriv(&h_rim, n, x0c);
        let jn1 = j_in[n];
        let djn1 = deriv(&j_in, n, x1);
        let num = k1 * jn0 * djn1 - k0c * djn0 * jn1;
        let den = k0c * dhn0 * jn1 - k1 * hn0 * djn1;
        let a_n = num / den;
        let weight = if n == 0 { T::one() } else { T::c(2.0) };
        let angle = T::from_usize_lossy(n) * (phi - phi_s);
        let term = a_n * h_src[n] * h_obs[n] * (weight * angle.cos());
        sum += term;
        last = term.norm();
    }
    let s = sum.norm();
    if s > T::zero() && last > T::c(1e-10) * s {
        return Err(Error::Oracle {
            tail: (last / s).to_f64_lossy(),
        });
    }
    let scattered = cplx(sum.im, -sum.re) / T::c(4.0);
    Ok(greens_2d(k0, eval, tx)? + scattered)
}

fn polar<T: Scalar>(p: Point<T>, c: Point<T>) -> (T, T) {
    let (dx, dy) = (p.x - c.x, p.y - c.y);
    (dx.hypot(dy), dy.atan2(dx))
}
