//! The identity suite behind `heatstab verify`: every check reports its
//! residual next to the tolerance it is held to.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::elliptic::verify_resolvent_identity;
use crate::error::Result;
use crate::linalg;
use crate::synthesis::similarity::{verify_similarity_s, verify_similarity_t, verify_sylvester};
use crate::synthesis::{adjoint_residual, Design};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub residual: f64,
    pub tol: f64,
    /// Passing means `residual <= tol` unless built with [`Check::below`] or [`Check::above`].
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &'static str, residual: f64, tol: f64) -> Self {
        Self { name, residual, tol, passed: residual <= tol }
    }

    /// Passes when `value < bound`.
    pub fn below(name: &'static str, value: f64, bound: f64) -> Self {
        Self { name, residual: value, tol: bound, passed: value < bound }
    }

    /// Passes when `value > bound`.
    pub fn above(name: &'static str, value: f64, bound: f64) -> Self {
        Self { name, residual: value, tol: bound, passed: value > bound }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} residual={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.residual,
            self.tol
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteTolerances {
    pub identity: f64,
    pub similarity: f64,
    pub spectra: f64,
    pub resolvent_modes: usize,
    pub random_pairs: usize,
    pub seed: u64,
}

impl Default for SuiteTolerances {
    fn default() -> Self {
        Self { identity: 1e-9, similarity: 1e-8, spectra: 1e-7, resolvent_modes: 6, random_pairs: 100, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AdjointResiduals {
    pub trace_duality: f64,
    pub s_duality: f64,
    pub generator_duality: f64,
}

/// Max relative residuals of `<B g, f> = <g, T f>`, `<S g, f> = <g, S* f>` and
/// `<𝒜 x, y> = <x, 𝒜* y>` over `pairs` seeded random samples.
pub fn adjoint_residuals(design: &Design<'_>, pairs: usize, seed: u64) -> Result<AdjointResiduals> {
    let grid = design.grid;
    let (w, wg) = (&grid.omega_weights, &grid.gamma1_weights);
    let rel = |lhs: f64, rhs: f64, scale: f64| if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
    let closed = design.closed_loop()?;
    let adjoint = design.observer_generator()?;
    let s_adj = design.solver.s_adjoint_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = AdjointResiduals::default();
    for _ in 0..pairs {
        let g = linalg::uniform_vector(&mut rng, grid.nx);
        let f = linalg::uniform_vector(&mut rng, grid.len());

        let bg = linalg::csr_mul_vec(&design.op.load, g.as_slice());
        let tf = grid.trace_vec(&f);
        let scale = (linalg::weighted_norm(w, &bg) * linalg::weighted_norm(w, &f))
            .max(linalg::weighted_norm(wg, &g) * linalg::weighted_norm(wg, &tf));
        out.trace_duality =
            out.trace_duality.max(rel(linalg::weighted_dot(w, &bg, &f), linalg::weighted_dot(wg, &g, &tf), scale));

        let sg = &design.ops.s * &g;
        let sf = &s_adj * &f;
        let scale = (linalg::weighted_norm(w, &sg) * linalg::weighted_norm(w, &f))
            .max(linalg::weighted_norm(wg, &g) * linalg::weighted_norm(wg, &sf));
        out.s_duality = out.s_duality.max(rel(linalg::weighted_dot(w, &sg, &f), linalg::weighted_dot(wg, &g, &sf), scale));

        let x = linalg::uniform_vector(&mut rng, closed.dim());
        let y = linalg::uniform_vector(&mut rng, closed.dim());
        out.generator_duality = out.generator_duality.max(adjoint_residual(&closed, &adjoint, &x, &y));
    }
    Ok(out)
}

/// Runs every identity check on a synthesized design.
pub fn run_suite(design: &Design<'_>, tol: &SuiteTolerances) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let res = verify_resolvent_identity(&design.solver, design.basis, design.grid, tol.resolvent_modes)?;
    checks.push(Check::at_most("resolvent_identity", res.max_rel, tol.identity));

    let syl = verify_sylvester(design);
    checks.push(Check::at_most("sylvester", syl.sylvester_rel, tol.identity));
    checks.push(Check::at_most("s_bv_identity", syl.sbv_rel, tol.identity));

    let adj = adjoint_residuals(design, tol.random_pairs, tol.seed)?;
    checks.push(Check::at_most("trace_duality", adj.trace_duality, tol.identity));
    checks.push(Check::at_most("s_duality", adj.s_duality, tol.identity));
    checks.push(Check::at_most("generator_duality", adj.generator_duality, tol.identity));

    let closed = design.closed_loop()?;
    let sim = verify_similarity_s(design, &closed)?;
    checks.push(Check::at_most("similarity_s_offblock", sim.offblock_rel, tol.similarity));
    checks.push(Check::at_most("similarity_s_spectra", sim.spectra_mismatch, tol.spectra));
    checks.push(Check::at_most("similarity_s_block11", sim.block11_mismatch, tol.spectra));
    let tr = verify_similarity_t(design);
    checks.push(Check::at_most("similarity_t_cancellation", tr.cancellation_rel, tol.similarity));

    let hautus = &design.controllability;
    checks.push(Check::above("hautus_sigma_min", hautus.min_sigma(), hautus.rank_tol));
    checks.push(Check::below("closed_loop_abscissa", sim.abscissa, 0.0));
    let observer_abscissa = design.observer_generator()?.spectral_abscissa()?;
    checks.push(Check::below("observer_abscissa", observer_abscissa, 0.0));
    Ok(checks)
}
