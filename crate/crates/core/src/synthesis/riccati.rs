//! Linear-quadratic gain design for the truncated system.
//!
//! The stabilizing solution of `ΛᵀP + PΛ - P F R⁻¹ Fᵀ P + Q = 0` is read off
//! the stable invariant subspace of the Hamiltonian, found with the matrix
//! sign function (Newton iteration with determinant scaling).

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Debug)]
pub struct GainSet {
    /// `L_N`, so that `Λ_N + F_N L_N` is Hurwitz.
    pub l_n: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub closed_poles: Vec<Complex64>,
    /// Relative Riccati residual.
    pub residual: f64,
}

impl GainSet {
    pub fn empty() -> Self {
        Self { l_n: DMatrix::zeros(0, 0), p: DMatrix::zeros(0, 0), closed_poles: Vec::new(), residual: 0.0 }
    }

    pub fn closed_abscissa(&self) -> f64 {
        self.closed_poles.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn design_gain(lambda: &DMatrix<f64>, f: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<GainSet> {
    let n = lambda.nrows();
    if n == 0 {
        return Ok(GainSet::empty());
    }
    let m = f.ncols();
    if lambda.ncols() != n || f.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Riccati("inconsistent matrix dimensions".into()));
    }
    let r_inv = r.clone().try_inverse().ok_or_else(|| Error::Riccati("R is singular".into()))?;
    let g = f * &r_inv * f.transpose();

    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(lambda);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-lambda.transpose()));

    let h_norm = h.amax().max(1.0);
    let ev = linalg::general_eigenvalues(&h)?;
    let closest = ev.iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
    if closest <= 1e-10 * h_norm {
        return Err(Error::Riccati(format!(
            "Hamiltonian has an eigenvalue on the imaginary axis (|Re| = {closest:.3e}); \
             the pair is not stabilizable or Q is not detectable"
        )));
    }

    let z = matrix_sign(&h)?;
    let id = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(z.view((0, 0), (n, n)) + &id)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Riccati(format!("least-squares recovery of P failed: {e}")))?;
    let p = 0.5 * (&p + p.transpose());

    let res = lambda.transpose() * &p + &p * lambda - &p * &g * &p + q;
    let scale = q.amax() + 2.0 * lambda.amax() * p.amax() + p.amax().powi(2) * g.amax();
    let residual = res.amax() / scale.max(f64::MIN_POSITIVE);

    let l_n = -(&r_inv * f.transpose() * &p);
    let closed = lambda + f * &l_n;
    let closed_poles = linalg::general_eigenvalues(&closed)?;
    let gains = GainSet { l_n, p, closed_poles, residual };
    if gains.closed_abscissa() >= 0.0 {
        return Err(Error::Riccati(format!(
            "closed-loop matrix is not Hurwitz (abscissa {:.3e}, residual {residual:.3e})",
            gains.closed_abscissa()
        )));
    }
    Ok(gains)
}

fn matrix_sign(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = h.nrows() as f64;
    let mut z = h.clone();
    let mut scaling = true;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let log_det: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
        let zi = lu.try_inverse().ok_or_else(|| Error::Riccati("singular iterate in sign-function Newton".into()))?;
        let c = if scaling { (-log_det / m).exp() } else { 1.0 };
        let next = 0.5 * (c * &z + zi / c);
        let delta = (&next - &z).norm() / next.norm();
        z = next;
        if delta < 1e-2 {
            scaling = false;
        }
        if delta <= 1e-14 {
            return Ok(z);
        }
    }
    // slow tail: accept when Z^2 = I to working accuracy
    if (&z * &z - DMatrix::identity(z.nrows(), z.ncols())).amax() <= 1e-10 {
        return Ok(z);
    }
    Err(Error::Riccati("matrix sign iteration did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn scalar_riccati_hand_solution() {
        let g = design_gain(&DMatrix::from_element(1, 1, 2.0), &eye(1), &eye(1), &eye(1)).unwrap();
        let s5 = 5f64.sqrt();
        assert_relative_eq!(g.p[(0, 0)], 2.0 + s5, epsilon = 1e-12);
        assert_relative_eq!(g.l_n[(0, 0)], -(2.0 + s5), epsilon = 1e-12);
        assert_relative_eq!(g.closed_poles[0].re, -s5, epsilon = 1e-12);
    }

    #[test]
    fn stable_plant_stays_stable() {
        let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, -2.0]));
        let g = design_gain(&lam, &eye(2), &eye(2), &eye(2)).unwrap();
        assert!(g.closed_abscissa() < 0.0);
        assert!(g.residual < 1e-12);
    }

    #[test]
    fn repeated_unstable_eigenvalues() {
        let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 3.0, 0.5]));
        let f = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.8, 0.0, 0.0, 0.0, -0.3]);
        let g = design_gain(&lam, &f, &eye(3), &(2.0 * eye(3))).unwrap();
        assert!(g.closed_abscissa() < 0.0);
        assert!(g.residual < 1e-10, "{}", g.residual);
        assert_relative_eq!(g.p.clone(), g.p.transpose(), epsilon = 1e-14);
    }

    #[test]
    fn uncontrollable_unstable_mode_is_rejected() {
        let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]));
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(design_gain(&lam, &f, &eye(2), &eye(2)), Err(Error::Riccati(_))));
    }

    #[test]
    fn empty_system() {
        let g = design_gain(&DMatrix::zeros(0, 0), &DMatrix::zeros(0, 0), &DMatrix::zeros(0, 0), &DMatrix::zeros(0, 0)).unwrap();
        assert_eq!(g.l_n.nrows(), 0);
    }
}
