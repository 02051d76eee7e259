//! Linear-algebra kernels shared by the solvers: a banded LU factorization
//! with partial pivoting for the shifted Laplacians, and dense helpers on
//! top of nalgebra.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

/// LU factorization `P A = L U` of a banded matrix with `kl` sub- and `ku`
/// super-diagonals. Row interchanges widen the upper band of `U` to `kl + ku`.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    /// Row `i`, column `c` lives at `rows[i * width + c + kl - i]`.
    rows: Vec<f64>,
    /// Multipliers of elimination step `k`, for rows `k+1 ..= k+kl`.
    lower: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    /// Factor `scale * A + shift * I` for a square CSR matrix whose entries
    /// all satisfy `-kl <= j - i <= ku`.
    pub fn from_csr(a: &CsrMatrix<f64>, kl: usize, ku: usize, scale: f64, shift: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::LengthMismatch { expected: n, found: a.ncols() });
        }
        let mut entries: Vec<(usize, usize, f64)> =
            a.triplet_iter().map(|(i, j, v)| (i, j, scale * v)).collect();
        entries.extend((0..n).map(|i| (i, i, shift)));
        Self::factor(n, kl, ku, entries)
    }

    /// Factor the matrix given by (possibly repeated) triplets; repeats are summed.
    pub fn factor(
        n: usize,
        kl: usize,
        ku: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let width = 2 * kl + ku + 1;
        let mut rows = vec![0.0; n * width];
        let mut norm_max: f64 = 0.0;
        for (i, j, v) in entries {
            if j + kl < i || j > i + ku {
                return Err(Error::Numerical(format!(
                    "entry ({i}, {j}) lies outside the band (kl = {kl}, ku = {ku})"
                )));
            }
            rows[i * width + j + kl - i] += v;
        }
        for v in &rows {
            norm_max = norm_max.max(v.abs());
        }
        if norm_max == 0.0 && n > 0 {
            return Err(Error::Singular("zero matrix".into()));
        }

        let mut lower = vec![0.0; n * kl.max(1)];
        let mut pivots = vec![0; n];
        let at = |i: usize, c: usize| i * width + c + kl - i;

        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);

            let mut p = k;
            let mut best = rows[at(k, k)].abs();
            for i in k + 1..=last_row {
                let v = rows[at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            pivots[k] = p;
            if best <= norm_max * f64::EPSILON {
                return Err(Error::Singular(format!(
                    "zero pivot at step {k} of banded LU (|pivot| = {best:.3e})"
                )));
            }
            if p != k {
                for c in k..=last_col {
                    rows.swap(at(k, c), at(p, c));
                }
            }

            let pivot = rows[at(k, k)];
            for i in k + 1..=last_row {
                let m = rows[at(i, k)] / pivot;
                lower[k * kl + (i - k - 1)] = m;
                rows[at(i, k)] = 0.0;
                if m != 0.0 {
                    for c in k + 1..=last_col {
                        rows[at(i, c)] -= m * rows[at(k, c)];
                    }
                }
            }
        }

        Ok(Self { n, kl, ku, width, rows, lower, pivots })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn u(&self, i: usize, c: usize) -> f64 {
        self.rows[i * self.width + c + self.kl - i]
    }

    /// Overwrite `b` with `A^{-1} b`.
    #[allow(clippy::needless_range_loop)]
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, kl) = (self.n, self.kl);
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for t in 0..kl.min(n - 1 - k) {
                    b[k + 1 + t] -= self.lower[k * kl + t] * bk;
                }
            }
        }
        let span = self.kl + self.ku;
        for k in (0..n).rev() {
            let mut s = b[k];
            for c in k + 1..=(k + span).min(n - 1) {
                s -= self.u(k, c) * b[c];
            }
            b[k] = s / self.u(k, k);
        }
    }

    /// Overwrite `b` with `A^{-T} b`.
    #[allow(clippy::needless_range_loop)]
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let (n, kl) = (self.n, self.kl);
        let span = self.kl + self.ku;
        for k in 0..n {
            let y = b[k] / self.u(k, k);
            b[k] = y;
            if y != 0.0 {
                for c in k + 1..=(k + span).min(n - 1) {
                    b[c] -= self.u(k, c) * y;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for t in 0..kl.min(n - 1 - k) {
                s -= self.lower[k * kl + t] * b[k + 1 + t];
            }
            b[k] = s;
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_transpose_in_place(x.as_mut_slice());
        x
    }
}

pub fn csr_mul_vec(a: &CsrMatrix<f64>, x: &[f64]) -> DVector<f64> {
    let mut y = DVector::zeros(a.nrows());
    for (i, row) in a.row_iter().enumerate() {
        y[i] = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&j, &v)| v * x[j])
            .sum();
    }
    y
}

/// `Aᵀ x`.
pub fn csr_tr_mul_vec(a: &CsrMatrix<f64>, x: &[f64]) -> DVector<f64> {
    let mut y = DVector::zeros(a.ncols());
    for (i, row) in a.row_iter().enumerate() {
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            y[j] += v * x[i];
        }
    }
    y
}

pub fn csr_to_dense(a: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        m[(i, j)] += *v;
    }
    m
}

/// `sum_i w_i a_i b_i`.
pub fn weighted_dot(w: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    w.iter().zip(a.iter()).zip(b.iter()).map(|((w, a), b)| w * a * b).sum()
}

pub fn weighted_norm(w: &DVector<f64>, a: &DVector<f64>) -> f64 {
    weighted_dot(w, a, a).max(0.0).sqrt()
}

/// Eigenvalues of a general real matrix (LAPACK `dgeev`).
pub fn general_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry in eigenvalue problem".into()));
    }
    let ni = n as i32;
    let mut a = m.clone();
    let (mut wr, mut wi) = (vec![0.0; n], vec![0.0; n]);
    let (mut vl, mut vr) = ([0.0; 1], [0.0; 1]);
    let mut info = 0;
    let mut query = [0.0];
    unsafe {
        lapack::dgeev(b'N', b'N', ni, a.as_mut_slice(), ni, &mut wr, &mut wi, &mut vl, 1, &mut vr, 1, &mut query, -1, &mut info);
    }
    let lwork = (query[0] as usize).max(4 * n);
    let mut work = vec![0.0; lwork];
    unsafe {
        lapack::dgeev(
            b'N', b'N', ni, a.as_mut_slice(), ni, &mut wr, &mut wi, &mut vl, 1, &mut vr, 1, &mut work, lwork as i32, &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!("dgeev failed with info = {info} (n = {n})")));
    }
    Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex64::new(re, im)).collect())
}

/// Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix
/// (LAPACK `dsyevd`); only the lower triangle is read.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let ni = n as i32;
    let mut a = m.clone();
    let mut w = vec![0.0; n];
    let mut info = 0;
    let (mut qwork, mut qiwork) = ([0.0], [0]);
    unsafe {
        lapack::dsyevd(b'V', b'L', ni, a.as_mut_slice(), ni, &mut w, &mut qwork, -1, &mut qiwork, -1, &mut info);
    }
    let lwork = qwork[0] as usize;
    let liwork = qiwork[0] as usize;
    let (mut work, mut iwork) = (vec![0.0; lwork], vec![0; liwork]);
    unsafe {
        lapack::dsyevd(b'V', b'L', ni, a.as_mut_slice(), ni, &mut w, &mut work, lwork as i32, &mut iwork, liwork as i32, &mut info);
    }
    if info != 0 {
        return Err(Error::Numerical(format!("dsyevd failed with info = {info} (n = {n})")));
    }
    Ok((w, a))
}

/// Largest real part among the eigenvalues of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    let ev = general_eigenvalues(m)?;
    Ok(ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Largest deviation between two eigenvalue multisets, each eigenvalue
/// measured relative to `max(1, |z|)`. Matching is greedy nearest-neighbour
/// in order of decreasing real part.
pub fn spectra_mismatch(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| b_cmp(&a[j], &a[i]));
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for i in order {
        let z = a[i];
        let (best, dist) = b
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, w)| (k, (z - w).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("equal lengths");
        used[best] = true;
        worst = worst.max(dist / z.norm().max(1.0));
    }
    worst
}

/// Compares two spectra cluster by cluster. Eigenvalues closer than `radius`
/// (single linkage over both lists) form one cluster; each cluster must hold the
/// same count from `a` and `b`, and the returned value is the worst relative gap
/// between the cluster means. Means of a split defective eigenvalue are well
/// conditioned even when the individual members are not. Returns `∞` on any
/// count mismatch.
pub fn clustered_spectra_mismatch(a: &[Complex64], b: &[Complex64], radius: f64) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let all: Vec<(Complex64, bool)> = a.iter().map(|&z| (z, true)).chain(b.iter().map(|&z| (z, false))).collect();
    let mut label = vec![usize::MAX; all.len()];
    let mut worst: f64 = 0.0;
    for seed in 0..all.len() {
        if label[seed] != usize::MAX {
            continue;
        }
        label[seed] = seed;
        let mut stack = vec![seed];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in 0..all.len() {
                if label[j] == usize::MAX && (all[i].0 - all[j].0).norm() <= radius {
                    label[j] = seed;
                    stack.push(j);
                }
            }
        }
        let (mut sa, mut sb, mut na, mut nb) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), 0usize, 0usize);
        for &i in &members {
            if all[i].1 {
                sa += all[i].0;
                na += 1;
            } else {
                sb += all[i].0;
                nb += 1;
            }
        }
        if na != nb {
            return f64::INFINITY;
        }
        let (ma, mb) = (sa / na as f64, sb / nb as f64);
        worst = worst.max((ma - mb).norm() / ma.norm().max(1.0));
    }
    worst
}

fn b_cmp(x: &Complex64, y: &Complex64) -> std::cmp::Ordering {
    x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im))
}

/// Entries uniform in [-1, 1].
pub fn uniform_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_banded(n: usize, kl: usize, ku: usize, seed: u64) -> Vec<(usize, usize, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Vec::new();
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                // small diagonal so that pivoting is exercised
                let v: f64 = rng.random_range(-1.0..1.0) + if i == j { 0.1 } else { 0.0 };
                e.push((i, j, v));
            }
        }
        e
    }

    #[test]
    fn banded_lu_matches_dense_solve() {
        let (n, kl, ku) = (40, 3, 5);
        let entries = random_banded(n, kl, ku, 7);
        let mut dense = DMatrix::zeros(n, n);
        for &(i, j, v) in &entries {
            dense[(i, j)] += v;
        }
        let lu = BandedLu::factor(n, kl, ku, entries).unwrap();
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let x = lu.solve(&b);
        assert_relative_eq!(&dense * &x, b.clone(), epsilon = 1e-10);
        let xt = lu.solve_transpose(&b);
        assert_relative_eq!(dense.transpose() * &xt, b, epsilon = 1e-10);
    }

    #[test]
    fn banded_lu_rejects_singular() {
        let entries = vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 4.0)];
        assert!(matches!(BandedLu::factor(2, 1, 1, entries), Err(Error::Singular(_))));
    }

    #[test]
    fn banded_lu_rejects_out_of_band_entry() {
        assert!(BandedLu::factor(3, 0, 0, vec![(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn abscissa_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -3.0]));
        assert_relative_eq!(spectral_abscissa(&m).unwrap(), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn abscissa_of_block_triangular() {
        // blocks with abscissa -2 and -0.5, arbitrary coupling
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[-2.0, 1.0, 0.0, -1.0, -2.0, 0.0, 5.0, 7.0, -0.5],
        );
        assert_relative_eq!(spectral_abscissa(&m).unwrap(), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn spectra_mismatch_is_permutation_invariant() {
        let a = vec![Complex64::new(-1.0, 2.0), Complex64::new(-1.0, -2.0), Complex64::new(-5.0, 0.0)];
        let b = vec![a[2], a[0], a[1]];
        assert_eq!(spectra_mismatch(&a, &b), 0.0);
        let c = vec![a[0], a[1], Complex64::new(-5.0 + 1e-3, 0.0)];
        assert_relative_eq!(spectra_mismatch(&a, &c), 2e-4, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_eigen_has_small_residual() {
        let n = 200;
        let m = DMatrix::from_fn(n, n, |i, j| 1.0 / (1.0 + i as f64 + j as f64) + if i == j { (i as f64).sin() } else { 0.0 });
        let (w, v) = symmetric_eigen(&m).unwrap();
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
        for (c, wc) in w.iter().enumerate() {
            let r = &m * v.column(c) - *wc * v.column(c);
            assert!(r.amax() < 1e-12, "column {c}: {}", r.amax());
        }
    }

    #[test]
    fn clustered_mismatch_tolerates_split_jordan_block() {
        let mut j = DMatrix::from_diagonal_element(4, 4, -2.0);
        for i in 0..3 {
            j[(i, i + 1)] = 1.0;
        }
        j[(3, 0)] = 1e-12;
        let ev = general_eigenvalues(&j).unwrap();
        let exact = vec![Complex64::new(-2.0, 0.0); 4];
        assert!(spectra_mismatch(&ev, &exact) > 1e-4);
        assert!(clustered_spectra_mismatch(&ev, &exact, 1e-2) < 1e-12);
        assert!(clustered_spectra_mismatch(&ev, &[exact[0], exact[0], exact[0], Complex64::new(-1.0, 0.0)], 1e-2).is_infinite());
    }
}
