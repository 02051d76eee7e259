//! Truncated modal system, gain design and the assembled closed-loop,
//! observer and output-feedback generators.

pub mod generator;
pub mod riccati;
pub mod similarity;

use nalgebra::{DMatrix, DVector};

use crate::elliptic::{default_eps_res, HelmholtzConfig, HelmholtzSolver};
use crate::error::{Error, Result};
use crate::grid::{DiscreteOperator, Grid};
use crate::linalg;
use crate::spectral::{cluster_indices, gram_reports, select_unstable_count, EigenBasis, GramReport, UnstableSelection};

pub use generator::{adjoint_residual, AssembledGenerator, Block, BlockKind, Coupling};
pub use riccati::{design_gain, GainSet};

/// `Λ_N = diag(λ_j + μ)` and `F_N[k, i] = <ζ_{φ_i}, φ_k>_Ω`.
#[derive(Clone, Debug)]
pub struct TruncatedSystem {
    pub lambda_n: DMatrix<f64>,
    pub f_n: DMatrix<f64>,
    /// `1 / (θ - λ_k)`.
    pub d_n: DVector<f64>,
    /// Γ1 Gram matrix of the traces of `φ_1..φ_N`.
    pub g_n: DMatrix<f64>,
    pub theta: f64,
    pub mu: f64,
    /// Column `i` is `ζ_{φ_i}`, the shifted solve with Neumann data `φ_i|Γ1`.
    pub zetas: DMatrix<f64>,
}

impl TruncatedSystem {
    pub fn n(&self) -> usize {
        self.lambda_n.nrows()
    }

    /// `max |F_N - D_N G_N| / max |F_N|`.
    pub fn factorization_residual(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        let dg = DMatrix::from_diagonal(&self.d_n) * &self.g_n;
        (&self.f_n - dg).amax() / self.f_n.amax().max(f64::MIN_POSITIVE)
    }
}

pub fn assemble_truncated(
    basis: &EigenBasis,
    selection: &UnstableSelection,
    solver: &HelmholtzSolver<'_>,
    grid: &Grid,
) -> Result<TruncatedSystem> {
    let n = selection.count;
    if n > basis.n_computed() {
        return Err(Error::InsufficientModes(format!("N = {n} exceeds {} computed modes", basis.n_computed())));
    }
    let theta = solver.theta();
    let w = &grid.omega_weights;
    let traces: Vec<DVector<f64>> = (0..n).map(|j| grid.trace_vec(&basis.phi_vec(j).into_owned())).collect();
    let mut zetas = DMatrix::zeros(grid.len(), n);
    for (i, t) in traces.iter().enumerate() {
        zetas.set_column(i, &solver.neumann_vec(t));
    }
    let f_n = DMatrix::from_fn(n, n, |k, i| linalg::weighted_dot(w, &zetas.column(i).into_owned(), &basis.phi_vec(k).into_owned()));
    let g_n = DMatrix::from_fn(n, n, |a, b| linalg::weighted_dot(&grid.gamma1_weights, &traces[a], &traces[b]));
    let d_n = DVector::from_fn(n, |k, _| 1.0 / (theta - basis.lambdas[k]));
    let lambda_n = DMatrix::from_diagonal(&DVector::from_fn(n, |k, _| basis.lambdas[k] + selection.mu));
    Ok(TruncatedSystem { lambda_n, f_n, d_n, g_n, theta, mu: selection.mu, zetas })
}

#[derive(Clone, Debug)]
pub struct HautusCluster {
    /// 1-based mode indices sharing the eigenvalue.
    pub modes: Vec<usize>,
    pub eigenvalue: f64,
    /// Smallest singular value of `[λ I - Λ | F]`.
    pub sigma_min: f64,
    /// `|det P_j|`, the cluster's diagonal block of `F`.
    pub block_det: f64,
}

#[derive(Clone, Debug)]
pub struct ControllabilityReport {
    pub clusters: Vec<HautusCluster>,
    pub rank_tol: f64,
}

impl ControllabilityReport {
    pub fn controllable(&self) -> bool {
        self.clusters.iter().all(|c| c.sigma_min > self.rank_tol)
    }

    pub fn min_sigma(&self) -> f64 {
        self.clusters.iter().map(|c| c.sigma_min).fold(f64::INFINITY, f64::min)
    }

    pub fn into_result(self) -> Result<Self> {
        match self.clusters.iter().find(|c| c.sigma_min <= self.rank_tol) {
            Some(c) => Err(Error::Uncontrollable {
                modes: c.modes.clone(),
                eigenvalue: c.eigenvalue,
                sigma_min: c.sigma_min,
                rank_tol: self.rank_tol,
            }),
            None => Ok(self),
        }
    }
}

/// Hautus test on a diagonal `Λ`: full row rank of `[λ I - Λ | F]` at each
/// distinct diagonal value, with `rank_tol = rank_tol_rel * ||F||_2`.
pub fn check_controllability(lambda: &DMatrix<f64>, f: &DMatrix<f64>, cluster_tol: f64, rank_tol_rel: f64) -> ControllabilityReport {
    let n = lambda.nrows();
    let diag: Vec<f64> = lambda.diagonal().iter().copied().collect();
    let f_norm = linalg::singular_values(f).first().copied().unwrap_or(0.0);
    let rank_tol = rank_tol_rel * f_norm;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diag[b].total_cmp(&diag[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let clusters = cluster_indices(&sorted, cluster_tol)
        .into_iter()
        .map(|group| {
            let idx: Vec<usize> = group.iter().map(|&g| order[g]).collect();
            let eigenvalue = diag[idx[0]];
            let mut pbh = DMatrix::zeros(n, 2 * n);
            let shifted = DMatrix::from_diagonal_element(n, n, eigenvalue) - lambda;
            pbh.view_mut((0, 0), (n, n)).copy_from(&shifted);
            pbh.view_mut((0, n), (n, f.ncols().min(n))).copy_from(&f.columns(0, f.ncols().min(n)));
            let sigma_min = linalg::singular_values(&pbh).get(n - 1).copied().unwrap_or(0.0);
            let block = DMatrix::from_fn(idx.len(), idx.len(), |a, b| f[(idx[a], idx[b])]);
            HautusCluster {
                modes: idx.iter().map(|i| i + 1).collect(),
                eigenvalue,
                sigma_min,
                block_det: block.determinant().abs(),
            }
        })
        .collect();
    ControllabilityReport { clusters, rank_tol }
}

#[derive(Clone, Debug)]
pub struct DesignParams {
    pub mu: f64,
    pub alpha: f64,
    pub lqr_q: f64,
    pub lqr_r: f64,
    /// Defaults to `1e-6 |λ_1|`.
    pub eps_res: Option<f64>,
    pub rank_tol_rel: f64,
    pub sing_tol: f64,
    pub cluster_tol_rel: f64,
}

impl DesignParams {
    pub fn new(mu: f64, alpha: f64) -> Self {
        Self { mu, alpha, lqr_q: 1.0, lqr_r: 1.0, eps_res: None, rank_tol_rel: 1e-8, sing_tol: 1e-8, cluster_tol_rel: 1e-6 }
    }
}

/// Dense factors of the bounded operators used by the generators.
#[derive(Clone, Debug)]
pub struct CouplingOperators {
    /// `Φ_N`, n x N.
    pub phi: DMatrix<f64>,
    /// `K = L Φᵀ W`, N x n.
    pub k: DMatrix<f64>,
    /// `K* = Φ Lᵀ`, n x N.
    pub k_adj: DMatrix<f64>,
    /// `B_v = T Φ`, nx x N.
    pub b_v: DMatrix<f64>,
    /// `B_v* = Φᵀ Tᵀ W_Γ`, N x nx.
    pub b_v_adj: DMatrix<f64>,
    /// `S`, n x nx.
    pub s: DMatrix<f64>,
    /// `K S`, N x nx.
    pub ks: DMatrix<f64>,
    /// `T ξ_{φ_j}`, nx x N, so that `S* K* B_v* = xi_trace Lᵀ B_v*`.
    pub xi_trace: DMatrix<f64>,
    /// `B_h` as a dense n x nx matrix.
    pub load: DMatrix<f64>,
    /// `Tᵀ`, n x nx.
    pub trace_t: DMatrix<f64>,
}

pub struct Design<'a> {
    pub grid: &'a Grid,
    pub op: &'a DiscreteOperator,
    pub basis: &'a EigenBasis,
    pub params: DesignParams,
    pub selection: UnstableSelection,
    pub solver: HelmholtzSolver<'a>,
    pub gram: Vec<GramReport>,
    pub truncated: TruncatedSystem,
    pub controllability: ControllabilityReport,
    pub gains: GainSet,
    pub ops: CouplingOperators,
}

/// Runs the full design: mode selection, resonance guard, Γ1 Gram check,
/// truncation, Hautus test, Riccati gain, and the coupling operators.
pub fn synthesize<'a>(grid: &'a Grid, op: &'a DiscreteOperator, basis: &'a EigenBasis, params: DesignParams) -> Result<Design<'a>> {
    if params.alpha.is_nan() || params.alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {}", params.alpha)));
    }
    if !(params.lqr_q > 0.0 && params.lqr_r > 0.0) {
        return Err(Error::Config("lqr_q and lqr_r must be positive".into()));
    }
    let selection = select_unstable_count(basis, params.mu)?;
    let eps_res = params.eps_res.unwrap_or_else(|| default_eps_res(basis));
    let cfg = HelmholtzConfig::for_compensator(params.alpha, params.mu, basis, eps_res)?;
    let solver = HelmholtzSolver::new(op, grid, cfg, basis)?;
    let n = selection.count;

    let cluster_tol = params.cluster_tol_rel * basis.lambdas[0].abs();
    let gram = gram_reports(basis, n, grid, cluster_tol);
    if let Some(bad) = gram.iter().find(|g| g.sigma_min < params.sing_tol) {
        return Err(Error::DegenerateTrace {
            modes: bad.group.iter().map(|j| j + 1).collect(),
            sigma_min: bad.sigma_min,
            sing_tol: params.sing_tol,
        });
    }

    let truncated = assemble_truncated(basis, &selection, &solver, grid)?;
    let controllability =
        check_controllability(&truncated.lambda_n, &truncated.f_n, cluster_tol, params.rank_tol_rel).into_result()?;
    let gains = design_gain(
        &truncated.lambda_n,
        &truncated.f_n,
        &DMatrix::from_diagonal_element(n, n, params.lqr_q),
        &DMatrix::from_diagonal_element(n, n, params.lqr_r),
    )?;
    let ops = coupling_operators(grid, op, basis, &solver, &gains.l_n);
    Ok(Design { grid, op, basis, params, selection, solver, gram, truncated, controllability, gains, ops })
}

fn coupling_operators(
    grid: &Grid,
    op: &DiscreteOperator,
    basis: &EigenBasis,
    solver: &HelmholtzSolver<'_>,
    l: &DMatrix<f64>,
) -> CouplingOperators {
    let n = l.nrows();
    let phi = basis.leading(n);
    let w = &grid.omega_weights;
    let wphi = DMatrix::from_fn(phi.nrows(), n, |r, c| w[r] * phi[(r, c)]);
    let k = l * wphi.transpose();
    let k_adj = &phi * l.transpose();
    let trace_t = linalg::csr_to_dense(&op.trace).transpose();
    let b_v = trace_t.tr_mul(&phi);
    let b_v_adj = DMatrix::from_fn(n, grid.nx, |r, c| b_v[(c, r)] * grid.gamma1_weights[c]);
    let s = solver.s_matrix();
    let ks = &k * &s;
    let mut xi_trace = DMatrix::zeros(grid.nx, n);
    for j in 0..n {
        let xi = solver.source_vec(&basis.phi_vec(j).into_owned());
        xi_trace.set_column(j, &grid.trace_vec(&xi));
    }
    CouplingOperators { phi, k, k_adj, b_v, b_v_adj, s, ks, xi_trace, load: linalg::csr_to_dense(&op.load), trace_t }
}

impl Design<'_> {
    pub fn n(&self) -> usize {
        self.selection.count
    }

    fn field(&self) -> BlockKind {
        BlockKind::Field { shift: self.params.mu }
    }

    fn actuator(&self) -> BlockKind {
        BlockKind::Trace { diag: -self.params.alpha }
    }

    /// `w_t = (A + μ) w`.
    pub fn open_loop(&self) -> AssembledGenerator {
        AssembledGenerator::new(self.grid, &self.op.laplacian, &[("w", self.field())])
    }

    /// `𝒜` on `(w, v)`: `[[A+μ, B], [-B_v K, -B_v K S - α]]`.
    pub fn closed_loop(&self) -> Result<AssembledGenerator> {
        let o = &self.ops;
        let mut g = AssembledGenerator::new(self.grid, &self.op.laplacian, &[("w", self.field()), ("v", self.actuator())]);
        g.couple("w", "v", o.load.clone(), identity(self.grid.nx))?;
        g.couple("v", "w", -&o.b_v, o.k.transpose())?;
        g.couple("v", "v", -&o.b_v, o.ks.transpose())?;
        Ok(g)
    }

    /// `𝒜*` on `(w̃, p̃)`: `[[A+μ, -K* B_v*], [B*, -α - S* K* B_v*]]`.
    pub fn observer_generator(&self) -> Result<AssembledGenerator> {
        let o = &self.ops;
        let mut g =
            AssembledGenerator::new(self.grid, &self.op.laplacian, &[("w_err", self.field()), ("p_err", self.actuator())]);
        g.couple("w_err", "p_err", -&o.k_adj, o.b_v_adj.transpose())?;
        g.couple("p_err", "w_err", identity(self.grid.nx), o.trace_t.clone())?;
        g.couple("p_err", "p_err", -self.s_adj_k_adj_left(), o.b_v_adj.transpose())?;
        Ok(g)
    }

    /// `T ξ Lᵀ`, the left factor of `S* K* B_v*`.
    fn s_adj_k_adj_left(&self) -> DMatrix<f64> {
        &self.ops.xi_trace * self.gains.l_n.transpose()
    }

    /// Plant with sensor and the observer on `(w, p, ŵ, p̂)`, plus the input
    /// map `E u = (B u, 0, B u, 0)`.
    pub fn observer_system(&self) -> Result<(AssembledGenerator, DMatrix<f64>)> {
        let o = &self.ops;
        let mut g = AssembledGenerator::new(
            self.grid,
            &self.op.laplacian,
            &[("w", self.field()), ("p", self.actuator()), ("w_hat", self.field()), ("p_hat", self.actuator())],
        );
        let skb = self.s_adj_k_adj_left();
        g.couple("p", "w", identity(self.grid.nx), o.trace_t.clone())?;
        g.couple("w_hat", "p", o.k_adj.clone(), o.b_v_adj.transpose())?;
        g.couple("w_hat", "p_hat", -&o.k_adj, o.b_v_adj.transpose())?;
        g.couple("p_hat", "w_hat", identity(self.grid.nx), o.trace_t.clone())?;
        g.couple("p_hat", "p", skb.clone(), o.b_v_adj.transpose())?;
        g.couple("p_hat", "p_hat", -skb, o.b_v_adj.transpose())?;

        let mut input = DMatrix::zeros(g.dim(), self.grid.nx);
        for name in ["w", "w_hat"] {
            let b = g.block(name)?;
            input.view_mut((b.offset, 0), (b.len, self.grid.nx)).copy_from(&o.load);
        }
        Ok((g, input))
    }

    /// Plant, actuator, sensor and observer on `(w, v̂, p, ŵ, p̂)`, with the
    /// actuator driven by the feedback evaluated on the observer state.
    pub fn output_feedback(&self) -> Result<AssembledGenerator> {
        let o = &self.ops;
        let mut g = AssembledGenerator::new(
            self.grid,
            &self.op.laplacian,
            &[
                ("w", self.field()),
                ("v_hat", self.actuator()),
                ("p", self.actuator()),
                ("w_hat", self.field()),
                ("p_hat", self.actuator()),
            ],
        );
        let nx = self.grid.nx;
        let skb = self.s_adj_k_adj_left();
        g.couple("w", "v_hat", o.load.clone(), identity(nx))?;
        g.couple("v_hat", "w_hat", -&o.b_v, o.k.transpose())?;
        g.couple("v_hat", "v_hat", -&o.b_v, o.ks.transpose())?;
        g.couple("p", "w", identity(nx), o.trace_t.clone())?;
        g.couple("w_hat", "v_hat", o.load.clone(), identity(nx))?;
        g.couple("w_hat", "p", o.k_adj.clone(), o.b_v_adj.transpose())?;
        g.couple("w_hat", "p_hat", -&o.k_adj, o.b_v_adj.transpose())?;
        g.couple("p_hat", "p", skb.clone(), o.b_v_adj.transpose())?;
        g.couple("p_hat", "w_hat", identity(nx), o.trace_t.clone())?;
        g.couple("p_hat", "p_hat", -skb, o.b_v_adj.transpose())?;
        Ok(g)
    }

    /// Predicted spectrum of `A + μ - S B_v K`: `eig(Λ_N + F_N L_N)` together
    /// with `λ_j + μ` for every `j > N`, given all eigenvalues of `A_h`.
    pub fn predicted_block_spectrum(&self, all_lambdas: &[f64]) -> Vec<num_complex::Complex64> {
        let mut out = self.gains.closed_poles.clone();
        out.extend(all_lambdas[self.n()..].iter().map(|l| num_complex::Complex64::new(l + self.params.mu, 0.0)));
        out
    }
}

fn identity(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}
