//! Dense checks of the operator identities behind the closed-loop and
//! observer constructions: the Sylvester equation, `S B_v`, and the
//! similarity transforms `𝕊 = [[I, S], [0, I]]` and `𝕋 = [[I, 0], [-S*, I]]`.

use nalgebra::DMatrix;

use super::{AssembledGenerator, Design};
use crate::error::Result;
use crate::linalg;

#[derive(Clone, Debug)]
pub struct SylvesterReport {
    /// Max over columns of `|(A + μ + α) S e_i - B e_i| / |B e_i|`.
    pub sylvester_rel: f64,
    /// Max over `i <= N` of `|S B_v e_i + ζ_{φ_i}| / |ζ_{φ_i}|`.
    pub sbv_rel: f64,
}

pub fn verify_sylvester(design: &Design<'_>) -> SylvesterReport {
    let o = &design.ops;
    let shift = design.params.mu + design.params.alpha;
    let mut sylvester_rel: f64 = 0.0;
    for i in 0..o.s.ncols() {
        let col = o.s.column(i).into_owned();
        let r = linalg::csr_mul_vec(&design.op.laplacian, col.as_slice()) + shift * &col - o.load.column(i);
        sylvester_rel = sylvester_rel.max(r.amax() / o.load.column(i).amax());
    }
    let mut sbv_rel: f64 = 0.0;
    let sbv = &o.s * &o.b_v;
    for i in 0..design.n() {
        let zeta = design.truncated.zetas.column(i);
        sbv_rel = sbv_rel.max((sbv.column(i) + zeta).amax() / zeta.amax());
    }
    SylvesterReport { sylvester_rel, sbv_rel }
}

#[derive(Clone, Debug)]
pub struct SimilarityReport {
    /// `|(𝕊𝒜𝕊⁻¹)_{12}| / |𝒜_{12}|`, entrywise maxima.
    pub offblock_rel: f64,
    /// Multiset distance between `eig(𝒜)` and `eig(𝕊𝒜𝕊⁻¹)`.
    pub spectra_mismatch: f64,
    /// Multiset distance between `eig((𝕊𝒜𝕊⁻¹)_{11})` and the modal prediction
    /// `eig(Λ_N + F_N L_N) ∪ {λ_j + μ : j > N}`.
    pub block11_mismatch: f64,
    pub abscissa: f64,
}

pub fn verify_similarity_s(design: &Design<'_>, closed: &AssembledGenerator) -> Result<SimilarityReport> {
    let m = closed.to_dense();
    let n = design.grid.len();
    let nx = design.grid.nx;
    let s = &design.ops.s;

    // (I + E) M (I - E) with E = S in the (1,2) position
    let mut p = m.clone();
    let es = s * m.rows(n, nx);
    p.rows_mut(0, n).zip_apply(&es, |a, b| *a += b);
    let pe = p.columns(0, n) * s;
    let mut t = p;
    t.columns_mut(n, nx).zip_apply(&pe, |a, b| *a -= b);

    let offblock_rel = t.view((0, n), (n, nx)).amax() / m.view((0, n), (n, nx)).amax();
    let ev_m = linalg::general_eigenvalues(&m)?;
    let ev_t = linalg::general_eigenvalues(&t)?;
    let abscissa = ev_m.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);

    let block = t.view((0, 0), (n, n)).into_owned();
    let ev_block = linalg::general_eigenvalues(&block)?;
    let predicted = design.predicted_block_spectrum(&all_eigenvalues(design)?);

    Ok(SimilarityReport {
        offblock_rel,
        spectra_mismatch: linalg::spectra_mismatch(&ev_m, &ev_t),
        block11_mismatch: linalg::spectra_mismatch(&ev_block, &predicted),
        abscissa,
    })
}

/// All eigenvalues of `A_h` in non-increasing order (dense).
fn all_eigenvalues(design: &Design<'_>) -> Result<Vec<f64>> {
    let a = linalg::csr_to_dense(&design.op.laplacian);
    let s = design.grid.omega_weights.map(f64::sqrt);
    let sym = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| 0.5 * (s[r] * a[(r, c)] / s[c] + s[c] * a[(c, r)] / s[r]));
    let mut ev = linalg::symmetric_eigen(&sym)?.0;
    ev.reverse();
    Ok(ev)
}

#[derive(Clone, Debug)]
pub struct TransformReport {
    /// `|-S*(A + μ) - α S* + B*| / |B*|`, entrywise maxima.
    pub cancellation_rel: f64,
    /// The same residual relative to `|S*(A + μ)|`, the size of the cancelling terms.
    pub cancellation_rel_terms: f64,
}

pub fn verify_similarity_t(design: &Design<'_>) -> TransformReport {
    let s_adj = design.solver.s_adjoint_matrix();
    let (mu, alpha) = (design.params.mu, design.params.alpha);
    let t = design.ops.trace_t.transpose();
    let mut resid = DMatrix::zeros(s_adj.nrows(), s_adj.ncols());
    let mut terms: f64 = 0.0;
    for i in 0..s_adj.nrows() {
        let row = s_adj.row(i).transpose();
        let ra = linalg::csr_tr_mul_vec(&design.op.laplacian, row.as_slice()) + mu * &row;
        terms = terms.max(ra.amax());
        let r = -ra - alpha * &row + t.row(i).transpose();
        resid.set_row(i, &r.transpose());
    }
    let amax = resid.amax();
    TransformReport { cancellation_rel: amax / t.amax(), cancellation_rel_terms: amax / terms }
}
