//! Finite-difference discretization of the rectangle `[0, Lx] x [0, Ly]`.
//!
//! Interior nodes sit at `((i+1) hx, (j+1) hy)` for `i < nx`, `j < ny`, indexed
//! `k = j * nx + i` from the bottom row up. The control boundary Γ1 is the top
//! edge `y = Ly`; its adjacent row `j = ny - 1` carries the boundary trace.
//!
//! Neumann edges are treated with the one-sided second-order flux formula
//! `u'(edge) = (3 u_b - 4 u_0 + u_1) / (2 hy)`, which folds into the adjacent
//! row as `(2/3)(u_1 - u_0) / hy^2` plus a load `2 g / (3 hy)`. Such rows get
//! quadrature weight `1.5 hx hy`, making `W A_h` symmetric.

use nalgebra::DVector;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::linalg;

/// Which edges besides Γ1 carry homogeneous Dirichlet data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryConfig {
    /// Dirichlet on the bottom, left and right edges.
    A,
    /// Dirichlet on the left and right edges; homogeneous Neumann on the bottom.
    B,
}

impl std::str::FromStr for BoundaryConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(Error::Config(format!("unknown boundary configuration '{other}' (expected A or B)"))),
        }
    }
}

impl std::fmt::Display for BoundaryConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub hx: f64,
    pub hy: f64,
    pub boundary: BoundaryConfig,
    /// Node indices of the Γ1-adjacent row, left to right.
    pub gamma1_nodes: Vec<usize>,
    pub omega_weights: DVector<f64>,
    pub gamma1_weights: DVector<f64>,
}

/// A grid function over the interior nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Field(pub DVector<f64>);

/// A function on Γ1, sampled at the `nx` boundary quadrature nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceField(pub DVector<f64>);

impl Field {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TraceField {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64, boundary: BoundaryConfig) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidGrid(format!("need nx, ny >= 2, got nx = {nx}, ny = {ny}")));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(Error::InvalidGrid(format!("side lengths must be positive, got Lx = {lx}, Ly = {ly}")));
        }
        let hx = lx / (nx + 1) as f64;
        let hy = ly / (ny + 1) as f64;

        let mut grid = Self {
            nx,
            ny,
            lx,
            ly,
            hx,
            hy,
            boundary,
            gamma1_nodes: ((ny - 1) * nx..ny * nx).collect(),
            omega_weights: DVector::zeros(nx * ny),
            gamma1_weights: DVector::from_element(nx, hx),
        };
        grid.omega_weights = DVector::from_fn(nx * ny, |k, _| {
            let j = k / nx;
            let factor = if grid.is_neumann_row(j) { 1.5 } else { 1.0 };
            factor * hx * hy
        });
        Ok(grid)
    }

    pub fn unit_square(n: usize, boundary: BoundaryConfig) -> Result<Self> {
        Self::new(n, n, 1.0, 1.0, boundary)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn position(&self, k: usize) -> (f64, f64) {
        let (i, j) = (k % self.nx, k / self.nx);
        ((i + 1) as f64 * self.hx, (j + 1) as f64 * self.hy)
    }

    /// Abscissae of the Γ1 quadrature nodes.
    pub fn gamma1_positions(&self) -> Vec<f64> {
        (0..self.nx).map(|i| (i + 1) as f64 * self.hx).collect()
    }

    fn is_neumann_row(&self, j: usize) -> bool {
        j == self.ny - 1 || (j == 0 && self.boundary == BoundaryConfig::B)
    }

    pub fn field_from_fn(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        Field(DVector::from_fn(self.len(), |k, _| {
            let (x, y) = self.position(k);
            f(x, y)
        }))
    }

    pub fn trace_from_fn(&self, g: impl Fn(f64) -> f64) -> TraceField {
        TraceField(DVector::from_fn(self.nx, |i, _| g((i + 1) as f64 * self.hx)))
    }

    fn check_field(&self, f: &Field) -> Result<()> {
        if f.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), found: f.len() });
        }
        Ok(())
    }

    fn check_trace(&self, g: &TraceField) -> Result<()> {
        if g.len() != self.nx {
            return Err(Error::LengthMismatch { expected: self.nx, found: g.len() });
        }
        Ok(())
    }

    pub fn inner_omega(&self, a: &Field, b: &Field) -> Result<f64> {
        self.check_field(a)?;
        self.check_field(b)?;
        Ok(linalg::weighted_dot(&self.omega_weights, &a.0, &b.0))
    }

    pub fn inner_gamma1(&self, a: &TraceField, b: &TraceField) -> Result<f64> {
        self.check_trace(a)?;
        self.check_trace(b)?;
        Ok(linalg::weighted_dot(&self.gamma1_weights, &a.0, &b.0))
    }

    pub fn norm_omega(&self, a: &Field) -> Result<f64> {
        Ok(self.inner_omega(a, a)?.max(0.0).sqrt())
    }

    pub fn norm_gamma1(&self, a: &TraceField) -> Result<f64> {
        Ok(self.inner_gamma1(a, a)?.max(0.0).sqrt())
    }

    /// Boundary value on Γ1: the value at the adjacent node. For fields with
    /// zero normal flux this matches the edge value to second order.
    pub fn trace_gamma1(&self, f: &Field) -> Result<TraceField> {
        self.check_field(f)?;
        Ok(TraceField(self.trace_vec(&f.0)))
    }

    pub(crate) fn trace_vec(&self, f: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nx, |i, _| f[self.gamma1_nodes[i]])
    }
}

/// The discrete Laplacian `A_h` together with the boundary load `B_h` and
/// the trace `T`, all stored in CSR form.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub laplacian: CsrMatrix<f64>,
    /// `B_h = W^{-1} T^T W_Γ`, mapping Neumann data on Γ1 to a nodal load.
    pub load: CsrMatrix<f64>,
    pub trace: CsrMatrix<f64>,
    /// Half bandwidth of `A_h` (equal to `nx`).
    pub bandwidth: usize,
}

pub fn assemble_operators(grid: &Grid) -> DiscreteOperator {
    let (nx, ny) = (grid.nx, grid.ny);
    let n = grid.len();
    let cx = 1.0 / (grid.hx * grid.hx);
    let cy = 1.0 / (grid.hy * grid.hy);

    let mut a = CooMatrix::new(n, n);
    for j in 0..ny {
        for i in 0..nx {
            let k = grid.index(i, j);
            let mut diag = -2.0 * cx;
            if i > 0 {
                a.push(k, k - 1, cx);
            }
            if i + 1 < nx {
                a.push(k, k + 1, cx);
            }

            let top = j == ny - 1;
            let bottom_neumann = j == 0 && grid.boundary == BoundaryConfig::B;
            if top || bottom_neumann {
                let inward = if top { k - nx } else { k + nx };
                a.push(k, inward, 2.0 / 3.0 * cy);
                diag -= 2.0 / 3.0 * cy;
            } else {
                diag -= 2.0 * cy;
                if j > 0 {
                    a.push(k, k - nx, cy);
                }
                if j + 1 < ny {
                    a.push(k, k + nx, cy);
                }
            }
            a.push(k, k, diag);
        }
    }

    let mut load = CooMatrix::new(n, nx);
    let mut trace = CooMatrix::new(nx, n);
    for (i, &k) in grid.gamma1_nodes.iter().enumerate() {
        load.push(k, i, grid.gamma1_weights[i] / grid.omega_weights[k]);
        trace.push(i, k, 1.0);
    }

    DiscreteOperator {
        laplacian: CsrMatrix::from(&a),
        load: CsrMatrix::from(&load),
        trace: CsrMatrix::from(&trace),
        bandwidth: nx,
    }
}

impl DiscreteOperator {
    pub fn dim(&self) -> usize {
        self.laplacian.nrows()
    }

    pub fn apply(&self, f: &Field) -> Field {
        Field(linalg::csr_mul_vec(&self.laplacian, f.0.as_slice()))
    }

    pub fn apply_load(&self, g: &TraceField) -> Field {
        Field(linalg::csr_mul_vec(&self.load, g.0.as_slice()))
    }

    /// `max |(W A)_{kl} - (W A)_{lk}| / max |W A|`.
    pub fn self_adjointness_residual(&self, grid: &Grid) -> f64 {
        let w = &grid.omega_weights;
        let wa = linalg::csr_to_dense(&self.laplacian);
        let wa = nalgebra::DMatrix::from_fn(wa.nrows(), wa.ncols(), |r, c| w[r] * wa[(r, c)]);
        let asym = (&wa - wa.transpose()).amax();
        asym / wa.amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_by_three_geometry() {
        let g = Grid::unit_square(3, BoundaryConfig::A).unwrap();
        assert_eq!((g.hx, g.hy), (0.25, 0.25));
        assert_eq!(g.len(), 9);
        assert_eq!(g.gamma1_nodes, vec![6, 7, 8]);
        assert!(g.omega_weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(matches!(Grid::new(1, 3, 1.0, 1.0, BoundaryConfig::A), Err(Error::InvalidGrid(_))));
        assert!(Grid::new(3, 1, 1.0, 1.0, BoundaryConfig::B).is_err());
        assert!(Grid::new(3, 3, 0.0, 1.0, BoundaryConfig::B).is_err());
        assert!(Grid::new(3, 3, 1.0, -2.0, BoundaryConfig::B).is_err());
    }

    #[test]
    fn quadrature_measures() {
        let g = Grid::unit_square(63, BoundaryConfig::A).unwrap();
        let s = g.omega_weights.sum();
        assert!((0.95..=1.0).contains(&s), "{s}");
        let one = Field(DVector::from_element(g.len(), 1.0));
        assert_relative_eq!(g.inner_omega(&one, &one).unwrap(), s);
        let l = g.gamma1_weights.sum();
        assert!((l - 1.0).abs() < 2.0 * g.hx);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let g = Grid::unit_square(3, BoundaryConfig::A).unwrap();
        let r = g.inner_omega(&Field::zeros(9), &Field::zeros(8));
        assert!(matches!(r, Err(Error::LengthMismatch { expected: 9, found: 8 })));
        assert!(g.inner_gamma1(&TraceField::zeros(2), &TraceField::zeros(3)).is_err());
    }

    #[test]
    fn laplacian_weighted_symmetric() {
        for bc in [BoundaryConfig::A, BoundaryConfig::B] {
            let g = Grid::new(3, 3, 1.0, 1.0, bc).unwrap();
            let op = assemble_operators(&g);
            assert!(op.self_adjointness_residual(&g) <= 1e-12);
            let g = Grid::new(7, 4, 2.0, 0.5, bc).unwrap();
            let op = assemble_operators(&g);
            assert!(op.self_adjointness_residual(&g) <= 1e-12);
        }
    }

    #[test]
    fn laplacian_negative_definite() {
        for bc in [BoundaryConfig::A, BoundaryConfig::B] {
            let g = Grid::new(6, 5, 1.0, 1.3, bc).unwrap();
            let op = assemble_operators(&g);
            let a = linalg::csr_to_dense(&op.laplacian);
            let s = g.omega_weights.map(f64::sqrt);
            let sym = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| s[r] * a[(r, c)] / s[c]);
            let ev = sym.symmetric_eigenvalues();
            assert!(ev.max() < 0.0);
        }
    }

    #[test]
    fn load_is_weighted_adjoint_of_trace() {
        let g = Grid::new(9, 7, 1.0, 1.0, BoundaryConfig::B).unwrap();
        let op = assemble_operators(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let f = Field(linalg::uniform_vector(&mut rng, g.len()));
            let gg = TraceField(linalg::uniform_vector(&mut rng, g.nx));
            let lhs = g.inner_omega(&op.apply_load(&gg), &f).unwrap();
            let rhs = g.inner_gamma1(&gg, &g.trace_gamma1(&f).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn load_matches_ghost_point_flux() {
        let g = Grid::unit_square(5, BoundaryConfig::A).unwrap();
        let op = assemble_operators(&g);
        let b = linalg::csr_to_dense(&op.load);
        assert_relative_eq!(b[(g.gamma1_nodes[2], 2)], 2.0 / (3.0 * g.hy), epsilon = 1e-12);
        assert_eq!(b.column(2).iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn trace_is_linear_and_reads_top_row() {
        let g = Grid::unit_square(4, BoundaryConfig::B).unwrap();
        let f = g.field_from_fn(|x, y| x + 10.0 * y);
        let h = g.field_from_fn(|x, _| x * x);
        let t = g.trace_gamma1(&Field(2.0 * &f.0 - 3.0 * &h.0)).unwrap();
        let expect = 2.0 * g.trace_gamma1(&f).unwrap().0 - 3.0 * g.trace_gamma1(&h).unwrap().0;
        assert_relative_eq!(t.0, expect, epsilon = 1e-14);
        assert_relative_eq!(g.trace_gamma1(&f).unwrap().0[0], 0.2 + 10.0 * 0.8, epsilon = 1e-14);
        assert_eq!(g.trace_gamma1(&Field::zeros(16)).unwrap(), TraceField::zeros(4));
    }

    #[test]
    fn laplacian_consistent_with_zero_flux_profile() {
        // sin(pi x)(2y - y^2) has zero flux at y = 1 and vanishes on the other edges
        let g = Grid::unit_square(40, BoundaryConfig::A).unwrap();
        let op = assemble_operators(&g);
        let pi = std::f64::consts::PI;
        let u = g.field_from_fn(|x, y| (pi * x).sin() * (2.0 * y - y * y));
        let lap = g.field_from_fn(|x, y| (pi * x).sin() * (-pi * pi * (2.0 * y - y * y) - 2.0));
        let au = op.apply(&u);
        let err = (&au.0 - &lap.0).amax();
        assert!(err < 5e-2, "{err}");
    }
}
