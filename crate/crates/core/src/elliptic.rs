//! Shifted elliptic solves `(A_h - θ I) u = rhs` with a resonance guard.
//!
//! `solve_neumann_data` gives `ζ_g` with `Δζ = θζ`, `∂ζ/∂ν = g` on Γ1, so the
//! Sylvester operator is `S g = -ζ_g`. `solve_source` gives `ξ_f` with zero
//! flux, and `S* f` is its trace.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{DiscreteOperator, Field, Grid, TraceField};
use crate::linalg::{self, BandedLu};
use crate::spectral::EigenBasis;

/// Shift `θ` certified to stay at least `eps_res` away from every computed eigenvalue.
#[derive(Clone, Debug, PartialEq)]
pub struct HelmholtzConfig {
    pub theta: f64,
    pub eps_res: f64,
    /// `min_j |θ - λ_j|` over the computed modes.
    pub resonance_margin: f64,
    /// 0-based index of the eigenvalue attaining the margin.
    pub nearest_mode: usize,
}

impl HelmholtzConfig {
    pub fn new(theta: f64, basis: &EigenBasis, eps_res: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(Error::Config(format!("theta must be finite, got {theta}")));
        }
        let (nearest_mode, resonance_margin) = basis
            .lambdas
            .iter()
            .map(|l| (theta - l).abs())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| Error::InsufficientModes("empty eigenbasis".into()))?;
        if resonance_margin <= eps_res {
            return Err(Error::Resonance {
                mode: Some(nearest_mode + 1),
                theta,
                lambda: basis.lambdas[nearest_mode],
                margin: resonance_margin,
                eps_res,
            });
        }
        Ok(Self { theta, eps_res, resonance_margin, nearest_mode })
    }

    /// Uses the default tolerance `eps_res = 1e-6 |λ_1|`.
    pub fn with_default_tol(theta: f64, basis: &EigenBasis) -> Result<Self> {
        Self::new(theta, basis, default_eps_res(basis))
    }

    /// `θ = -α - μ`.
    pub fn for_compensator(alpha: f64, mu: f64, basis: &EigenBasis, eps_res: f64) -> Result<Self> {
        Self::new(-alpha - mu, basis, eps_res)
    }
}

pub fn default_eps_res(basis: &EigenBasis) -> f64 {
    1e-6 * basis.lambdas.first().map_or(1.0, |l| l.abs())
}

/// Factorization of `A_h - θ I`, shareable across solves.
#[derive(Clone, Debug)]
pub struct HelmholtzSolver<'a> {
    pub cfg: HelmholtzConfig,
    op: &'a DiscreteOperator,
    grid: &'a Grid,
    lu: BandedLu,
}

impl<'a> HelmholtzSolver<'a> {
    /// Factors `A_h - θ I`. When `θ` lies below the last computed eigenvalue an
    /// inverse-iteration estimate of the nearest uncomputed eigenvalue is also
    /// checked against `eps_res`.
    pub fn new(op: &'a DiscreteOperator, grid: &'a Grid, cfg: HelmholtzConfig, basis: &EigenBasis) -> Result<Self> {
        let last = *basis.lambdas.last().expect("nonempty basis");
        let lu = BandedLu::from_csr(&op.laplacian, op.bandwidth, op.bandwidth, 1.0, -cfg.theta);
        let lu = match lu {
            Ok(lu) => lu,
            Err(Error::Singular(_)) if cfg.theta < last => {
                return Err(Error::Resonance {
                    mode: None,
                    theta: cfg.theta,
                    lambda: cfg.theta,
                    margin: 0.0,
                    eps_res: cfg.eps_res,
                })
            }
            Err(e) => return Err(e),
        };
        let solver = Self { cfg, op, grid, lu };
        if solver.cfg.theta < last {
            let lambda = solver.nearest_eigenvalue_estimate();
            let margin = (solver.cfg.theta - lambda).abs();
            if margin <= solver.cfg.eps_res {
                return Err(Error::Resonance {
                    mode: None,
                    theta: solver.cfg.theta,
                    lambda,
                    margin,
                    eps_res: solver.cfg.eps_res,
                });
            }
        }
        Ok(solver)
    }

    fn nearest_eigenvalue_estimate(&self) -> f64 {
        let w = &self.grid.omega_weights;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut x = linalg::uniform_vector(&mut rng, self.grid.len());
        let mut lambda = self.cfg.theta;
        for _ in 0..50 {
            self.lu.solve_in_place(x.as_mut_slice());
            let nrm = linalg::weighted_norm(w, &x);
            if !nrm.is_finite() || nrm == 0.0 {
                return self.cfg.theta;
            }
            x /= nrm;
            let ax = linalg::csr_mul_vec(&self.op.laplacian, x.as_slice());
            let next = linalg::weighted_dot(w, &ax, &x);
            if (next - lambda).abs() <= 1e-14 * next.abs() {
                return next;
            }
            lambda = next;
        }
        lambda
    }

    pub fn theta(&self) -> f64 {
        self.cfg.theta
    }

    /// `ζ = (A_h - θ I)^{-1} (-B_h g)`.
    pub fn solve_neumann_data(&self, g: &TraceField) -> Result<Field> {
        if g.len() != self.grid.nx {
            return Err(Error::LengthMismatch { expected: self.grid.nx, found: g.len() });
        }
        Ok(Field(self.neumann_vec(&g.0)))
    }

    /// `ξ = (A_h - θ I)^{-1} f`.
    pub fn solve_source(&self, f: &Field) -> Result<Field> {
        if f.len() != self.grid.len() {
            return Err(Error::LengthMismatch { expected: self.grid.len(), found: f.len() });
        }
        Ok(Field(self.source_vec(&f.0)))
    }

    pub(crate) fn neumann_vec(&self, g: &DVector<f64>) -> DVector<f64> {
        let mut rhs = -linalg::csr_mul_vec(&self.op.load, g.as_slice());
        self.lu.solve_in_place(rhs.as_mut_slice());
        rhs
    }

    pub(crate) fn source_vec(&self, f: &DVector<f64>) -> DVector<f64> {
        let mut x = f.clone();
        self.lu.solve_in_place(x.as_mut_slice());
        x
    }

    /// `S g = -ζ_g`.
    pub fn apply_s(&self, g: &TraceField) -> Result<Field> {
        Ok(Field(-self.solve_neumann_data(g)?.0))
    }

    /// `S* f = ξ_f |Γ1`.
    pub fn apply_s_adjoint(&self, f: &Field) -> Result<TraceField> {
        self.grid.trace_gamma1(&self.solve_source(f)?)
    }

    /// The dense matrix of `S` (columns `S e_i`).
    pub fn s_matrix(&self) -> DMatrix<f64> {
        let nx = self.grid.nx;
        let mut s = DMatrix::zeros(self.grid.len(), nx);
        for i in 0..nx {
            let mut e = DVector::zeros(nx);
            e[i] = 1.0;
            s.set_column(i, &(-self.neumann_vec(&e)));
        }
        s
    }

    /// The dense matrix of `S* = T (A_h - θ I)^{-1}`, built from transposed solves.
    pub fn s_adjoint_matrix(&self) -> DMatrix<f64> {
        let n = self.grid.len();
        let mut out = DMatrix::zeros(self.grid.nx, n);
        for (i, &k) in self.grid.gamma1_nodes.iter().enumerate() {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            self.lu.solve_transpose_in_place(e.as_mut_slice());
            out.set_row(i, &e.transpose());
        }
        out
    }
}

/// The Neumann map `Υ g`: harmonic field with flux `g` on Γ1.
pub fn neumann_map(op: &DiscreteOperator, grid: &Grid, g: &TraceField) -> Result<Field> {
    if g.len() != grid.nx {
        return Err(Error::LengthMismatch { expected: grid.nx, found: g.len() });
    }
    let lu = BandedLu::from_csr(&op.laplacian, op.bandwidth, op.bandwidth, 1.0, 0.0)?;
    let mut rhs = -linalg::csr_mul_vec(&op.load, g.0.as_slice());
    lu.solve_in_place(rhs.as_mut_slice());
    Ok(Field(rhs))
}

#[derive(Clone, Debug)]
pub struct ResolventReport {
    /// `R[j, i] = <ζ_{φ_i}, φ_j>_Ω - <φ_i, φ_j>_Γ1 / (θ - λ_j)`.
    pub residuals: DMatrix<f64>,
    pub max_abs: f64,
    /// `max_abs` divided by the largest predicted entry.
    pub max_rel: f64,
    pub resonance_margin: f64,
    /// `max_j 1 / |θ - λ_j|` over the checked modes.
    pub amplification: f64,
}

pub fn verify_resolvent_identity(
    solver: &HelmholtzSolver<'_>,
    basis: &EigenBasis,
    grid: &Grid,
    n_check: usize,
) -> Result<ResolventReport> {
    let m = n_check.min(basis.n_computed());
    let theta = solver.theta();
    let w = &grid.omega_weights;
    let traces: Vec<DVector<f64>> = (0..m).map(|j| grid.trace_vec(&basis.phi_vec(j).into_owned())).collect();
    let mut residuals = DMatrix::zeros(m, m);
    let mut scale: f64 = 0.0;
    for i in 0..m {
        let zeta = solver.neumann_vec(&traces[i]);
        for j in 0..m {
            let lhs = linalg::weighted_dot(w, &zeta, &basis.phi_vec(j).into_owned());
            let rhs = linalg::weighted_dot(&grid.gamma1_weights, &traces[i], &traces[j]) / (theta - basis.lambdas[j]);
            residuals[(j, i)] = lhs - rhs;
            scale = scale.max(rhs.abs());
        }
    }
    let max_abs = residuals.amax();
    let amplification = basis.lambdas[..m].iter().map(|l| 1.0 / (theta - l).abs()).fold(0.0, f64::max);
    Ok(ResolventReport {
        max_rel: if scale > 0.0 { max_abs / scale } else { max_abs },
        residuals,
        max_abs,
        resonance_margin: solver.cfg.resonance_margin,
        amplification,
    })
}

/// An `α > 0` placing `θ = -α - μ` at the midpoint between two consecutive
/// computed eigenvalues below `-μ`, choosing the midpoint closest to the
/// requested `α`.
pub fn suggest_alpha(basis: &EigenBasis, mu: f64, requested: f64) -> Option<f64> {
    basis
        .lambdas
        .windows(2)
        .map(|w| -0.5 * (w[0] + w[1]) - mu)
        .filter(|&a| a > 0.0)
        .min_by(|a, b| (a - requested).abs().total_cmp(&(b - requested).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble_operators, BoundaryConfig};
    use crate::spectral::compute_eigenbasis;

    fn setup(bc: BoundaryConfig, n: usize, modes: usize) -> (Grid, DiscreteOperator, EigenBasis) {
        let g = Grid::unit_square(n, bc).unwrap();
        let op = assemble_operators(&g);
        let b = compute_eigenbasis(&op, &g, modes).unwrap();
        (g, op, b)
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let (g, op, b) = setup(BoundaryConfig::B, 8, 6);
        let cfg = HelmholtzConfig::for_compensator(1.0, 13.0, &b, 1e-6).unwrap();
        let s = HelmholtzSolver::new(&op, &g, cfg, &b).unwrap();
        assert_eq!(s.solve_neumann_data(&TraceField::zeros(8)).unwrap(), Field::zeros(64));
        assert_eq!(s.solve_source(&Field::zeros(64)).unwrap(), Field::zeros(64));
    }

    #[test]
    fn source_solve_inverts_forward_map() {
        let (g, op, b) = setup(BoundaryConfig::A, 10, 4);
        let cfg = HelmholtzConfig::with_default_tol(-14.0, &b).unwrap();
        let s = HelmholtzSolver::new(&op, &g, cfg, &b).unwrap();
        let q = g.field_from_fn(|x, y| x * (1.0 - x) * y * y);
        let f = Field(op.apply(&q).0 + 14.0 * &q.0);
        let back = s.solve_source(&f).unwrap();
        assert!((back.0 - q.0).amax() <= 1e-10);
    }

    #[test]
    fn theta_zero_matches_neumann_map() {
        let (g, op, b) = setup(BoundaryConfig::B, 9, 4);
        let cfg = HelmholtzConfig::with_default_tol(0.0, &b).unwrap();
        let s = HelmholtzSolver::new(&op, &g, cfg, &b).unwrap();
        let data = g.trace_from_fn(|x| (3.0 * x).cos());
        let a = s.solve_neumann_data(&data).unwrap();
        let m = neumann_map(&op, &g, &data).unwrap();
        assert!((a.0 - m.0).amax() < 1e-12);
    }

    #[test]
    fn neumann_map_converges_to_harmonic_extension() {
        // config B: u = sin(pi x) cosh(pi y) / (pi sinh(pi)) has flux sin(pi x) on Γ1
        let pi = std::f64::consts::PI;
        let mut errs = Vec::new();
        for n in [15, 31] {
            let g = Grid::unit_square(n, BoundaryConfig::B).unwrap();
            let op = assemble_operators(&g);
            let u = neumann_map(&op, &g, &g.trace_from_fn(|x| (pi * x).sin())).unwrap();
            let exact = g.field_from_fn(|x, y| (pi * x).sin() * (pi * y).cosh() / (pi * pi.sinh()));
            errs.push((u.0 - exact.0).amax());
        }
        let ratio = errs[0] / errs[1];
        assert!(ratio > 3.0, "{errs:?}");
    }

    #[test]
    fn resolvent_identity_holds() {
        let (g, op, b) = setup(BoundaryConfig::B, 12, 8);
        for theta in [-14.0, -10.0 * b.lambdas[0].abs(), 3.0] {
            let cfg = HelmholtzConfig::with_default_tol(theta, &b).unwrap();
            let s = HelmholtzSolver::new(&op, &g, cfg, &b).unwrap();
            let r = verify_resolvent_identity(&s, &b, &g, 6).unwrap();
            assert!(r.max_rel <= 1e-9, "theta {theta}: {}", r.max_rel);
        }
    }

    #[test]
    fn near_resonance_reports_amplification() {
        let (g, op, b) = setup(BoundaryConfig::B, 12, 8);
        let eps = default_eps_res(&b);
        let theta = b.lambdas[0] + 10.0 * eps;
        let cfg = HelmholtzConfig::new(theta, &b, eps).unwrap();
        let s = HelmholtzSolver::new(&op, &g, cfg, &b).unwrap();
        let r = verify_resolvent_identity(&s, &b, &g, 3).unwrap();
        assert!(r.amplification > 1e4);
        assert!(r.max_rel <= 1e-6, "{}", r.max_rel);
    }

    #[test]
    fn resonance_is_refused_with_mode_index() {
        let (g, op, b) = setup(BoundaryConfig::B, 10, 5);
        let err = HelmholtzConfig::for_compensator(-b.lambdas[1] - 13.0, 13.0, &b, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Resonance { mode: Some(2), .. }));
        assert_eq!(err.exit_code(), 3);

        // an eigenvalue beyond the computed ones
        let small = compute_eigenbasis(&op, &g, 2).unwrap();
        let theta = b.lambdas[4];
        let cfg = HelmholtzConfig::new(theta, &small, 1e-6).unwrap();
        let err = HelmholtzSolver::new(&op, &g, cfg, &small).unwrap_err();
        assert!(matches!(err, Error::Resonance { mode: None, .. }), "{err}");
    }

    #[test]
    fn s_adjoint_duality() {
        let (g, op, b) = setup(BoundaryConfig::A, 9, 4);
        let cfg = HelmholtzConfig::with_default_tol(-14.0, &b).unwrap();
        let s = HelmholtzSolver::new(&op, &g, cfg, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let data = TraceField(linalg::uniform_vector(&mut rng, g.nx));
            let f = Field(linalg::uniform_vector(&mut rng, g.len()));
            let zeta = s.solve_neumann_data(&data).unwrap();
            let xi = s.solve_source(&f).unwrap();
            let lhs = g.inner_omega(&zeta, &f).unwrap();
            let rhs = -g.inner_gamma1(&data, &g.trace_gamma1(&xi).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1e-3));
        }
    }

    #[test]
    fn sylvester_residual_vanishes() {
        // (A + μ + α) S = B with S = -ζ
        let (g, op, b) = setup(BoundaryConfig::B, 9, 4);
        let (mu, alpha) = (13.0, 1.0);
        let cfg = HelmholtzConfig::for_compensator(alpha, mu, &b, 1e-6).unwrap();
        let s = HelmholtzSolver::new(&op, &g, cfg, &b).unwrap();
        let data = g.trace_from_fn(|x| x * x - 0.3);
        let sg = s.apply_s(&data).unwrap();
        let lhs = op.apply(&sg).0 + (mu + alpha) * &sg.0;
        let rhs = op.apply_load(&data).0;
        assert!((lhs - &rhs).amax() <= 1e-10 * rhs.amax());
    }

    #[test]
    fn suggested_alpha_is_off_resonance() {
        let (_, _, b) = setup(BoundaryConfig::B, 10, 8);
        let a = suggest_alpha(&b, 13.0, 6.0).unwrap();
        assert!(a > 0.0);
        // gaps around lambda_2 give alpha ~ 1.8 and ~ 16.5; 6 is closer to the first
        assert!((a - (-0.5 * (b.lambdas[0] + b.lambdas[1]) - 13.0)).abs() < 1e-12, "{a}");
        assert!(HelmholtzConfig::for_compensator(a, 13.0, &b, default_eps_res(&b)).is_ok());
    }
}
