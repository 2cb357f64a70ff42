//! Dense linear-algebra helpers: Riccati and Lyapunov solvers, spectra,
//! finite-difference Jacobians.
//!
//! The continuous Riccati equation is solved with the matrix sign function of
//! the Hamiltonian followed by Newton–Kleinman refinement. The discrete one
//! uses the structured doubling algorithm followed by Hewer refinement. Both
//! refinements solve Lyapunov equations through their Kronecker form, which is
//! fine for the state dimensions handled here (n ≤ 8 or so).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SIGN_MAX_ITERS: usize = 100;
const SDA_MAX_ITERS: usize = 100;
const REFINE_STEPS: usize = 4;

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square() && is_symmetric(m, 1e-10) && m.clone().cholesky().is_some()
}

/// Largest modulus among the eigenvalues of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Largest real part among the eigenvalues of a square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Induced 2-norm.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Central-difference Jacobian of `f` at `x`.
pub fn numeric_jacobian<F>(f: F, x: &DVector<f64>, out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(out_dim, n);
    for j in 0..n {
        let step = 1e-6 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (f(&xp) - f(&xm)) / (2.0 * step);
        jac.set_column(j, &col);
    }
    jac
}

fn inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or(Error::NonFinite(what))
}

/// Solves `AᵀX + XA + C = 0` for symmetric `C`.
pub fn lyapunov_ct(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice((-c).as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or(Error::NonFinite("continuous Lyapunov solve"))?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

/// Solves `X = AᵀXA + C` for symmetric `C`.
pub fn lyapunov_dt(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let op = DMatrix::<f64>::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or(Error::NonFinite("discrete Lyapunov solve"))?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

/// Frobenius norm of `AᵀP + PA − PBR⁻¹BᵀP + Q`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let r_inv = match r.clone().try_inverse() {
        Some(m) => m,
        None => return f64::INFINITY,
    };
    let res = a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q;
    res.norm()
}

/// Frobenius norm of `AᵀPA − P − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let s = r + b.transpose() * p * b;
    let s_inv = match s.try_inverse() {
        Some(m) => m,
        None => return f64::INFINITY,
    };
    let bt_p_a = b.transpose() * p * a;
    let res = a.transpose() * p * a - p - bt_p_a.transpose() * s_inv * bt_p_a + q;
    res.norm()
}

/// Stabilizing solution of the continuous algebraic Riccati equation.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    system: &str,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let r_inv = inverse(r, "R inverse")?;
    let g = b * &r_inv * b.transpose();

    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let nonconv = |residual: f64| Error::RiccatiNonConvergence {
        system: system.to_string(),
        residual,
    };

    let mut z = h;
    let mut converged = false;
    for _ in 0..SIGN_MAX_ITERS {
        let det = z.determinant().abs();
        let z_inv = z.clone().try_inverse().ok_or_else(|| nonconv(f64::NAN))?;
        let c = if det.is_finite() && det > 0.0 {
            det.powf(1.0 / (2.0 * n as f64))
        } else {
            1.0
        };
        let next = (&z / c + z_inv * c) * 0.5;
        let delta = (&next - &z).norm();
        let scale = next.norm();
        z = next;
        if !scale.is_finite() {
            return Err(nonconv(f64::NAN));
        }
        if delta <= 1e-13 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(nonconv(f64::NAN));
    }

    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n))
        .copy_from(&(-z.view((n, 0), (n, n))));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|_| nonconv(f64::NAN))?;
    let mut p = symmetrize(&p);

    // Newton–Kleinman refinement.
    for _ in 0..REFINE_STEPS {
        let k = &r_inv * b.transpose() * &p;
        let a_cl = a - b * &k;
        let c = q + k.transpose() * r * &k;
        let candidate = lyapunov_ct(&a_cl, &c)?;
        if care_residual(a, b, q, r, &candidate) <= care_residual(a, b, q, r, &p) {
            p = candidate;
        } else {
            break;
        }
    }

    let residual = care_residual(a, b, q, r, &p);
    if !residual.is_finite() || residual > 1e-8 {
        return Err(nonconv(residual));
    }
    Ok(p)
}

/// Stabilizing solution of the discrete algebraic Riccati equation.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    system: &str,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let r_inv = inverse(r, "R inverse")?;
    let eye = DMatrix::<f64>::identity(n, n);
    let nonconv = |residual: f64| Error::RiccatiNonConvergence {
        system: system.to_string(),
        residual,
    };

    let mut ak = a.clone();
    let mut gk = b * &r_inv * b.transpose();
    let mut hk = q.clone();
    let mut converged = false;
    for _ in 0..SDA_MAX_ITERS {
        let w_inv = (&eye + &gk * &hk)
            .try_inverse()
            .ok_or_else(|| nonconv(f64::NAN))?;
        let a_next = &ak * &w_inv * &ak;
        let g_next = &gk + &ak * &w_inv * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w_inv * &ak;
        let delta = (&h_next - &hk).norm();
        let scale = h_next.norm();
        ak = a_next;
        gk = symmetrize(&g_next);
        hk = symmetrize(&h_next);
        if !scale.is_finite() {
            return Err(nonconv(f64::NAN));
        }
        if delta <= 1e-14 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(nonconv(f64::NAN));
    }

    let mut p = hk;
    // Hewer refinement.
    for _ in 0..REFINE_STEPS {
        let s = r + b.transpose() * &p * b;
        let k = s
            .try_inverse()
            .ok_or_else(|| nonconv(f64::NAN))?
            * b.transpose()
            * &p
            * a;
        let a_cl = a - b * &k;
        let c = q + k.transpose() * r * &k;
        let candidate = lyapunov_dt(&a_cl, &c)?;
        if dare_residual(a, b, q, r, &candidate) <= dare_residual(a, b, q, r, &p) {
            p = candidate;
        } else {
            break;
        }
    }

    let residual = dare_residual(a, b, q, r, &p);
    if !residual.is_finite() || residual > 1e-8 {
        return Err(nonconv(residual));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lyapunov_ct_solves_scalar_case() {
        // -2x + 1 = 0 for a = -1, c = 1
        let a = DMatrix::from_element(1, 1, -1.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        let x = lyapunov_ct(&a, &c).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_dt_solves_scalar_case() {
        // x = 0.25 x + 1
        let a = DMatrix::from_element(1, 1, 0.5);
        let c = DMatrix::from_element(1, 1, 1.0);
        let x = lyapunov_dt(&a, &c).unwrap();
        assert_relative_eq!(x[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn care_scalar_closed_form() {
        // 2ap - p²b²/r + q = 0 with a = 1, b = 1, q = 1, r = 1: p = 1 + √2.
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = solve_care(&one, &one, &one, &one, "scalar").unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0 + 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn dare_scalar_closed_form() {
        // p = a²p - a²p²b²/(r + b²p) + q, a = 2, b = 1, q = 1, r = 1
        // → p² - 4p - 1 = 0 → p = 2 + √5.
        let a = DMatrix::from_element(1, 1, 2.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = solve_dare(&a, &one, &one, &one, "scalar").unwrap();
        assert_relative_eq!(p[(0, 0)], 2.0 + 5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn jacobian_of_linear_map_is_the_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let jac = numeric_jacobian(|v| &m * v, &x, 2);
        assert!((jac - &m).amax() < 1e-9);
    }

    #[test]
    fn spectral_helpers() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        // eigenvalues -1, -2
        assert_relative_eq!(spectral_abscissa(&m), -1.0, epsilon = 1e-10);
        assert_relative_eq!(spectral_radius(&m), 2.0, epsilon = 1e-10);
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -4.0]);
        assert_relative_eq!(spectral_norm(&d), 4.0, epsilon = 1e-12);
    }
}
