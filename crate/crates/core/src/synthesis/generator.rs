//! Stacked-state generators stored as a block diagonal plus low-rank couplings.
//!
//! A generator `M` acts on a vector partitioned into named blocks. Field blocks
//! carry `A_h + shift I`, trace blocks carry a scalar multiple of the identity,
//! and every off-diagonal or dense correction is a coupling `left * rightᵀ`
//! from one block into another.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockKind {
    /// `A_h + shift I` on a grid field, weighted by the Ω quadrature.
    Field { shift: f64 },
    /// `diag I` on a Γ1 function, weighted by the Γ1 quadrature.
    Trace { diag: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
    pub kind: BlockKind,
}

/// Adds `left * rightᵀ` to the `(row, col)` block.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub row: usize,
    pub col: usize,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct AssembledGenerator {
    pub blocks: Vec<Block>,
    pub couplings: Vec<Coupling>,
    pub laplacian: CsrMatrix<f64>,
    pub bandwidth: usize,
    omega_weights: DVector<f64>,
    gamma1_weights: DVector<f64>,
}

impl AssembledGenerator {
    pub fn new(grid: &Grid, laplacian: &CsrMatrix<f64>, kinds: &[(&'static str, BlockKind)]) -> Self {
        let mut offset = 0;
        let blocks = kinds
            .iter()
            .map(|&(name, kind)| {
                let len = match kind {
                    BlockKind::Field { .. } => grid.len(),
                    BlockKind::Trace { .. } => grid.nx,
                };
                let b = Block { name, offset, len, kind };
                offset += len;
                b
            })
            .collect();
        Self {
            blocks,
            couplings: Vec::new(),
            laplacian: laplacian.clone(),
            bandwidth: grid.nx,
            omega_weights: grid.omega_weights.clone(),
            gamma1_weights: grid.gamma1_weights.clone(),
        }
    }

    /// Adds `left * rightᵀ` into block `(row, col)`; zero-rank couplings are dropped.
    pub fn couple(&mut self, row: &str, col: &str, left: DMatrix<f64>, right: DMatrix<f64>) -> Result<()> {
        let (r, c) = (self.block_index(row)?, self.block_index(col)?);
        if left.nrows() != self.blocks[r].len || right.nrows() != self.blocks[c].len || left.ncols() != right.ncols() {
            return Err(Error::Numerical(format!(
                "coupling {row} <- {col}: shapes {:?} x {:?}ᵀ do not fit blocks of length {} and {}",
                left.shape(),
                right.shape(),
                self.blocks[r].len,
                self.blocks[c].len
            )));
        }
        if left.ncols() > 0 {
            self.couplings.push(Coupling { row: r, col: c, left, right });
        }
        Ok(())
    }

    pub fn block_index(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Numerical(format!("no block named '{name}'")))
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        Ok(&self.blocks[self.block_index(name)?])
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    pub fn rank(&self) -> usize {
        self.couplings.iter().map(|c| c.left.ncols()).sum()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        for b in &self.blocks {
            let xb = x.rows(b.offset, b.len);
            let yb = match b.kind {
                BlockKind::Field { shift } => linalg::csr_mul_vec(&self.laplacian, xb.as_slice()) + shift * xb,
                BlockKind::Trace { diag } => diag * xb,
            };
            y.rows_mut(b.offset, b.len).copy_from(&yb);
        }
        for c in &self.couplings {
            let (rb, cb) = (&self.blocks[c.row], &self.blocks[c.col]);
            let coef = c.right.tr_mul(&x.rows(cb.offset, cb.len));
            let mut yr = y.rows_mut(rb.offset, rb.len);
            yr.gemv(1.0, &c.left, &coef, 1.0);
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let lap = linalg::csr_to_dense(&self.laplacian);
        for b in &self.blocks {
            match b.kind {
                BlockKind::Field { shift } => {
                    let mut v = m.view_mut((b.offset, b.offset), (b.len, b.len));
                    v.copy_from(&lap);
                    for i in 0..b.len {
                        v[(i, i)] += shift;
                    }
                }
                BlockKind::Trace { diag } => {
                    for i in 0..b.len {
                        m[(b.offset + i, b.offset + i)] = diag;
                    }
                }
            }
        }
        for c in &self.couplings {
            let (rb, cb) = (&self.blocks[c.row], &self.blocks[c.col]);
            let mut v = m.view_mut((rb.offset, cb.offset), (rb.len, cb.len));
            v.gemm(1.0, &c.left, &c.right.transpose(), 1.0);
        }
        m
    }

    /// Weights of the product-space inner product.
    pub fn weights(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.dim());
        for b in &self.blocks {
            let src = match b.kind {
                BlockKind::Field { .. } => &self.omega_weights,
                BlockKind::Trace { .. } => &self.gamma1_weights,
            };
            w.rows_mut(b.offset, b.len).copy_from(src);
        }
        w
    }

    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        linalg::weighted_dot(&self.weights(), x, y)
    }

    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        self.inner(x, x).max(0.0).sqrt()
    }

    /// Norm of each block of `x` in its own inner product.
    pub fn block_norms(&self, x: &DVector<f64>) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| {
                let w = match b.kind {
                    BlockKind::Field { .. } => &self.omega_weights,
                    BlockKind::Trace { .. } => &self.gamma1_weights,
                };
                linalg::weighted_norm(w, &x.rows(b.offset, b.len).into_owned())
            })
            .collect()
    }

    pub fn spectral_abscissa(&self) -> Result<f64> {
        linalg::spectral_abscissa(&self.to_dense())
    }
}

/// `|<M x, y> - <x, M* y>| / max(||M x|| ||y||, ||x|| ||M* y||)` in the weighted product space.
pub fn adjoint_residual(m: &AssembledGenerator, m_adj: &AssembledGenerator, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let mx = m.apply(x);
    let my = m_adj.apply(y);
    let lhs = m.inner(&mx, y);
    let rhs = m.inner(x, &my);
    let scale = (m.norm(&mx) * m.norm(y)).max(m.norm(x) * m.norm(&my));
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble_operators, BoundaryConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Grid, AssembledGenerator) {
        let g = Grid::unit_square(4, BoundaryConfig::B).unwrap();
        let op = assemble_operators(&g);
        let mut m = AssembledGenerator::new(
            &g,
            &op.laplacian,
            &[("w", BlockKind::Field { shift: 3.0 }), ("v", BlockKind::Trace { diag: -1.0 })],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = DMatrix::from_fn(16, 2, |_, _| linalg::uniform_vector(&mut rng, 1)[0]);
        let r = DMatrix::from_fn(4, 2, |_, _| linalg::uniform_vector(&mut rng, 1)[0]);
        m.couple("w", "v", l, r).unwrap();
        (g, m)
    }

    #[test]
    fn apply_matches_dense() {
        let (_, m) = sample();
        let x = DVector::from_fn(m.dim(), |i, _| (i as f64 * 0.7).sin());
        assert_relative_eq!(m.apply(&x), m.to_dense() * &x, epsilon = 1e-10);
        assert_eq!(m.rank(), 2);
    }

    #[test]
    fn shape_errors_are_reported() {
        let (_, mut m) = sample();
        assert!(m.couple("w", "v", DMatrix::zeros(3, 1), DMatrix::zeros(4, 1)).is_err());
        assert!(m.couple("w", "nope", DMatrix::zeros(16, 1), DMatrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn abscissa_of_decoupled_blocks() {
        let g = Grid::unit_square(3, BoundaryConfig::A).unwrap();
        let op = assemble_operators(&g);
        let m = AssembledGenerator::new(&g, &op.laplacian, &[("p", BlockKind::Trace { diag: -1.0 }), ("q", BlockKind::Trace { diag: -3.0 })]);
        assert_relative_eq!(m.spectral_abscissa().unwrap(), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn block_norms_use_block_weights() {
        let (g, m) = sample();
        let x = DVector::from_element(m.dim(), 1.0);
        let n = m.block_norms(&x);
        assert_relative_eq!(n[0], g.omega_weights.sum().sqrt(), epsilon = 1e-14);
        assert_relative_eq!(n[1], g.gamma1_weights.sum().sqrt(), epsilon = 1e-14);
        assert_relative_eq!(m.norm(&x), (n[0] * n[0] + n[1] * n[1]).sqrt(), epsilon = 1e-14);
    }
}
