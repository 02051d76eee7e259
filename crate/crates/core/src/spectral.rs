//! Ordered eigenpairs of the discrete Laplacian and the unstable-mode count.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{DiscreteOperator, Field, Grid};
use crate::linalg::{self, BandedLu};

/// Eigenpairs `(λ_j, φ_j)` with `0 > λ_1 >= λ_2 >= ...` and `φ_j`
/// orthonormal in the Ω inner product. Stored column-wise.
#[derive(Clone, Debug)]
pub struct EigenBasis {
    pub lambdas: Vec<f64>,
    phis: DMatrix<f64>,
}

impl EigenBasis {
    /// Assemble a basis from given pairs; columns of `phis` are the eigenvectors.
    pub fn from_parts(lambdas: Vec<f64>, phis: DMatrix<f64>) -> Result<Self> {
        if lambdas.len() != phis.ncols() {
            return Err(Error::LengthMismatch { expected: lambdas.len(), found: phis.ncols() });
        }
        if lambdas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Numerical("eigenvalues must be non-increasing".into()));
        }
        Ok(Self { lambdas, phis })
    }

    pub fn n_computed(&self) -> usize {
        self.lambdas.len()
    }

    /// `φ_j` for a 0-based `j`.
    pub fn phi(&self, j: usize) -> Field {
        Field(self.phis.column(j).into_owned())
    }

    pub fn phi_vec(&self, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.phis.column(j)
    }

    /// `Φ`, one eigenvector per column.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phis
    }

    /// The first `count` columns of `Φ`.
    pub fn leading(&self, count: usize) -> DMatrix<f64> {
        self.phis.columns(0, count).into_owned()
    }

    /// Groups of 0-based indices whose eigenvalues chain within `tol`.
    pub fn clusters(&self, tol: f64) -> Vec<Vec<usize>> {
        cluster_indices(&self.lambdas, tol)
    }

    /// Largest relative residual `||A φ - λ φ||_Ω / |λ|` over the basis.
    pub fn max_residual(&self, op: &DiscreteOperator, grid: &Grid) -> f64 {
        (0..self.n_computed())
            .map(|j| {
                let phi = self.phis.column(j);
                let r = linalg::csr_mul_vec(&op.laplacian, phi.as_slice()) - self.lambdas[j] * phi;
                linalg::weighted_norm(&grid.omega_weights, &r) / self.lambdas[j].abs()
            })
            .fold(0.0, f64::max)
    }

    /// `max |Φᵀ W Φ - I|`.
    pub fn orthonormality_defect(&self, grid: &Grid) -> f64 {
        let g = weighted_gram(&self.phis, &grid.omega_weights);
        (g - DMatrix::identity(self.n_computed(), self.n_computed())).amax()
    }
}

pub(crate) fn cluster_indices(values: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (j, &v) in values.iter().enumerate() {
        match out.last_mut() {
            Some(c) if (values[*c.last().unwrap()] - v).abs() <= tol => c.push(j),
            _ => out.push(vec![j]),
        }
    }
    out
}

fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let wx = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| w[r] * x[(r, c)]);
    x.transpose() * wx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenMethod {
    /// Dense below `dense_limit` nodes, shift-invert subspace iteration above.
    Auto,
    Dense,
    ShiftInvert,
}

#[derive(Clone, Debug)]
pub struct EigenOptions {
    pub method: EigenMethod,
    pub dense_limit: usize,
    /// Target relative residual for the iterative solver.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative to `|λ_1|`; eigenvalues closer than this form one cluster.
    pub cluster_tol_rel: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self { method: EigenMethod::Auto, dense_limit: 1024, tol: 1e-11, max_iter: 1000, cluster_tol_rel: 1e-6 }
    }
}

pub fn compute_eigenbasis(op: &DiscreteOperator, grid: &Grid, count: usize) -> Result<EigenBasis> {
    compute_eigenbasis_with(op, grid, count, &EigenOptions::default())
}

pub fn compute_eigenbasis_with(
    op: &DiscreteOperator,
    grid: &Grid,
    count: usize,
    opts: &EigenOptions,
) -> Result<EigenBasis> {
    let n = grid.len();
    if count == 0 || count > n {
        return Err(Error::InsufficientModes(format!("requested {count} eigenpairs from {n} nodes")));
    }
    let dense = match opts.method {
        EigenMethod::Dense => true,
        EigenMethod::ShiftInvert => false,
        EigenMethod::Auto => n <= opts.dense_limit || count + 10 >= n / 2,
    };
    let (lambdas, mut phis) =
        if dense { dense_pairs(op, grid, count)? } else { shift_invert_pairs(op, grid, count, opts)? };

    if lambdas.iter().any(|&l| l >= 0.0 || !l.is_finite()) {
        return Err(Error::Numerical(format!("discrete Laplacian produced eigenvalue {:?}", lambdas[0])));
    }
    let tol = opts.cluster_tol_rel * lambdas[0].abs();
    for cluster in cluster_indices(&lambdas, tol) {
        orthonormalize(&mut phis, &cluster, &grid.omega_weights);
    }
    for j in 0..count {
        fix_sign(&mut phis, j);
    }
    Ok(EigenBasis { lambdas, phis })
}

fn dense_pairs(op: &DiscreteOperator, grid: &Grid, count: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let a = linalg::csr_to_dense(&op.laplacian);
    let s = grid.omega_weights.map(f64::sqrt);
    // S A S^{-1} is symmetric because W A is
    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| 0.5 * (s[r] * a[(r, c)] / s[c] + s[c] * a[(c, r)] / s[r]));
    let (values, vectors) = linalg::symmetric_eigen(&m)?;
    let n = values.len();
    // ascending order from LAPACK; the eigenvalues nearest zero come last
    let lambdas = (0..count).map(|c| values[n - 1 - c]).collect();
    let phis = DMatrix::from_fn(a.nrows(), count, |r, c| vectors[(r, n - 1 - c)] / s[r]);
    Ok((lambdas, phis))
}

fn shift_invert_pairs(
    op: &DiscreteOperator,
    grid: &Grid,
    count: usize,
    opts: &EigenOptions,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = grid.len();
    let p = (count + 10).min(n);
    let w = &grid.omega_weights;
    // A is negative definite, so the shift 0 targets the eigenvalues nearest zero
    let lu = BandedLu::from_csr(&op.laplacian, op.bandwidth, op.bandwidth, 1.0, 0.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = DMatrix::from_fn(n, p, |_, _| 0.0);
    for c in 0..p {
        x.set_column(c, &linalg::uniform_vector(&mut rng, n));
    }
    orthonormalize(&mut x, &(0..p).collect::<Vec<_>>(), w);

    let mut worst = f64::INFINITY;
    for _ in 0..opts.max_iter {
        for c in 0..p {
            let mut col = x.column(c).into_owned();
            lu.solve_in_place(col.as_mut_slice());
            x.set_column(c, &col);
        }
        orthonormalize(&mut x, &(0..p).collect::<Vec<_>>(), w);

        let mut ax = DMatrix::zeros(n, p);
        for c in 0..p {
            ax.set_column(c, &linalg::csr_mul_vec(&op.laplacian, x.column(c).as_slice()));
        }
        let wax = DMatrix::from_fn(n, p, |r, c| w[r] * ax[(r, c)]);
        let h = x.transpose() * wax;
        let h = 0.5 * (&h + h.transpose());
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let v = DMatrix::from_fn(p, p, |r, c| eig.eigenvectors[(r, order[c])]);
        let theta: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        x = &x * &v;
        let ax = ax * &v;

        worst = (0..count)
            .map(|j| {
                let r = ax.column(j) - theta[j] * x.column(j);
                linalg::weighted_norm(w, &r) / theta[j].abs()
            })
            .fold(0.0, f64::max);
        if worst <= opts.tol {
            return Ok((theta[..count].to_vec(), x.columns(0, count).into_owned()));
        }
    }
    Err(Error::EigenNonConvergence { iterations: opts.max_iter, residual: worst })
}

/// Modified Gram-Schmidt with one reorthogonalization pass, in the W inner product.
fn orthonormalize(x: &mut DMatrix<f64>, cols: &[usize], w: &DVector<f64>) {
    for (a, &c) in cols.iter().enumerate() {
        let mut v = x.column(c).into_owned();
        for _ in 0..2 {
            for &d in &cols[..a] {
                let u = x.column(d);
                let proj = linalg::weighted_dot(w, &u.into_owned(), &v);
                v.axpy(-proj, &x.column(d), 1.0);
            }
        }
        let nrm = linalg::weighted_norm(w, &v);
        x.set_column(c, &(v / nrm));
    }
}

/// Makes the first component of (nearly) maximal magnitude positive.
fn fix_sign(x: &mut DMatrix<f64>, j: usize) {
    let col = x.column(j);
    let big = col.amax();
    let lead = col.iter().find(|v| v.abs() >= (1.0 - 1e-8) * big).copied().unwrap_or(0.0);
    if lead < 0.0 {
        x.column_mut(j).neg_mut();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnstableSelection {
    /// `N`, the number of modes with `λ_j + μ >= 0`.
    pub count: usize,
    pub mu: f64,
    /// `λ_{N+1} + μ`, always negative.
    pub margin: f64,
}

pub fn select_unstable_count(basis: &EigenBasis, mu: f64) -> Result<UnstableSelection> {
    let count = basis.lambdas.iter().take_while(|&&l| l + mu >= 0.0).count();
    match basis.lambdas.get(count) {
        Some(&next) => Ok(UnstableSelection { count, mu, margin: next + mu }),
        None => Err(Error::InsufficientModes(format!(
            "all {} computed modes satisfy lambda_j + mu >= 0; cannot certify lambda_(N+1) + mu < 0 \
             (increase modes)",
            basis.n_computed()
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct GramReport {
    /// 0-based mode indices of the group.
    pub group: Vec<usize>,
    pub matrix: DMatrix<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// `G_{ab} = <φ_a, φ_b>_Γ1` over the traces of the group's eigenvectors.
pub fn gram_trace_matrix(basis: &EigenBasis, group: &[usize], grid: &Grid) -> GramReport {
    let traces: Vec<DVector<f64>> = group.iter().map(|&j| grid.trace_vec(&basis.phi_vec(j).into_owned())).collect();
    let m = group.len();
    let mut matrix = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = linalg::weighted_dot(&grid.gamma1_weights, &traces[a], &traces[b]);
            matrix[(a, b)] = v;
            matrix[(b, a)] = v;
        }
    }
    let s = linalg::singular_values(&matrix);
    GramReport {
        group: group.to_vec(),
        sigma_min: s.last().copied().unwrap_or(0.0),
        sigma_max: s.first().copied().unwrap_or(0.0),
        matrix,
    }
}

/// Gram reports for every eigenvalue cluster among the first `count` modes.
pub fn gram_reports(basis: &EigenBasis, count: usize, grid: &Grid, cluster_tol: f64) -> Vec<GramReport> {
    cluster_indices(&basis.lambdas[..count.min(basis.n_computed())], cluster_tol)
        .iter()
        .map(|g| gram_trace_matrix(basis, g, grid))
        .collect()
}
