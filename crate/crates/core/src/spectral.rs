//! Spectral metrics and symmetric matrix functions.
//!
//! Everything here runs in 64-bit precision. Decompositions (SVD, QR,
//! symmetric eigen) are delegated to nalgebra at the boundary; tolerance
//! constants live in one place ([`Tolerances`]) so every module floors and
//! rejects with the same numbers.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::RandomSource;

/// Centralized tolerance record.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Relative eigenvalue floor for symmetric PD functions:
    /// floor = `pd_floor_rel` * trace(P) / r.
    pub pd_floor_rel: f64,
    /// Maximum Gram condition number accepted after flooring.
    pub gram_cond_max: f64,
    /// Default tolerance for numerical-rank counting in property suites.
    pub rank_tol: f64,
    /// Orthonormality drift allowed when entering a strict-mode step.
    pub stiefel_entry: f64,
    /// Orthonormality guaranteed after a polar retraction.
    pub stiefel_post: f64,
}

pub const TOL: Tolerances = Tolerances {
    pd_floor_rel: 1e-12,
    gram_cond_max: 1e14,
    rank_tol: 1e-8,
    stiefel_entry: 1e-6,
    stiefel_post: 1e-10,
};

/// Singular values plus the two derived metrics reported everywhere.
#[derive(Debug, Clone)]
pub struct SpectralSummary {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// ||M||_F^2 / ||M||_2^2, in [1, min(m, n)].
    pub stable_rank: f64,
    /// sigma_1 / sigma_r for the r this summary was built with.
    pub condition_number_r: f64,
}

/// Full thin SVD by one-sided Jacobi rotations: A = U diag(sigma) V^T with
/// U m x k, V n x k, k = min(m, n), sigma descending and non-negative.
/// Jacobi converges unconditionally and keeps its accuracy on
/// rank-deficient inputs, which iterative bidiagonal solvers do not
/// guarantee.
pub fn thin_svd(a: &DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
    if a.rows() < a.cols() {
        let (u, s, v) = thin_svd(&a.transpose());
        return (v, s, u);
    }
    let (m, n) = a.dims();
    let mut work = a.clone();
    let mut v = DenseMatrix::identity(n);
    let eps = 1e-15;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let ap = work[(i, p)];
                    let aq = work[(i, q)];
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let ap = work[(i, p)];
                    let aq = work[(i, q)];
                    work[(i, p)] = c * ap - s * aq;
                    work[(i, q)] = s * ap + c * aq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }
    let norms = work.col_norms();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));
    let mut u = DenseMatrix::zeros(m, n);
    let mut v_sorted = DenseMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for i in 0..n {
            v_sorted[(i, dst)] = v[(i, src)];
        }
        if s > 0.0 {
            for i in 0..m {
                u[(i, dst)] = work[(i, src)] / s;
            }
        }
    }
    complete_zero_columns(&mut u, &sigma);
    (u, sigma, v_sorted)
}

/// Fills columns whose singular value is exactly zero with an orthonormal
/// completion so U always has orthonormal columns.
fn complete_zero_columns(u: &mut DenseMatrix, sigma: &[f64]) {
    let m = u.rows();
    let mut candidate = 0usize;
    for j in 0..u.cols() {
        if sigma[j] > 0.0 {
            continue;
        }
        while candidate < m {
            let mut col = vec![0.0; m];
            col[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against every filled column.
            for _ in 0..2 {
                for jj in 0..u.cols() {
                    if jj == j || (sigma[jj] <= 0.0 && jj > j) {
                        continue;
                    }
                    let dot: f64 = (0..m).map(|i| col[i] * u[(i, jj)]).sum();
                    for (i, c) in col.iter_mut().enumerate() {
                        *c -= dot * u[(i, jj)];
                    }
                }
            }
            let norm = col.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (i, c) in col.iter().enumerate() {
                    u[(i, j)] = c / norm;
                }
                break;
            }
        }
    }
}

/// Descending singular values of `m`.
pub fn singular_values(m: &DenseMatrix) -> Vec<f64> {
    thin_svd(m).1
}

pub fn spectral_summary(m: &DenseMatrix, r: usize) -> Result<SpectralSummary> {
    let s = singular_values(m);
    if r == 0 || r > s.len() {
        return Err(Error::Shape(format!("r = {r} outside 1..={}", s.len())));
    }
    let top = s[0];
    if top == 0.0 {
        return Err(Error::Domain("spectral summary of the zero matrix".into()));
    }
    let frob_sq: f64 = s.iter().map(|v| v * v).sum();
    Ok(SpectralSummary {
        stable_rank: frob_sq / (top * top),
        condition_number_r: if s[r - 1] > 0.0 { top / s[r - 1] } else { f64::INFINITY },
        singular_values: s,
    })
}

/// ||M||_F^2 / ||M||_2^2. Errors on the zero matrix.
pub fn stable_rank(m: &DenseMatrix) -> Result<f64> {
    let s = singular_values(m);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Err(Error::Domain("stable rank of the zero matrix is undefined".into()));
    }
    let frob_sq: f64 = s.iter().map(|v| v * v).sum();
    Ok(frob_sq / (top * top))
}

/// Number of singular values exceeding `tol * sigma_max`.
pub fn numerical_rank(m: &DenseMatrix, tol: f64) -> Result<usize> {
    if tol <= 0.0 {
        return Err(Error::Domain("numerical_rank needs tol > 0".into()));
    }
    let s = singular_values(m);
    let cut = tol * s.first().copied().unwrap_or(0.0);
    Ok(s.iter().filter(|&&v| v > cut).count())
}

/// ||X^T X - Y^T Y||_F; zero exactly at balanced factor pairs.
pub fn gram_imbalance(x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "factors share a column count: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    Ok(x.gram().sub(&y.gram()).frob_norm())
}

/// sigma_1 / sigma_r of `m`.
pub fn condition_number_r(m: &DenseMatrix, r: usize) -> Result<f64> {
    Ok(spectral_summary(m, r)?.condition_number_r)
}

fn symmetrize(p: &DenseMatrix) -> DenseMatrix {
    p.add(&p.transpose()).scale(0.5)
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations,
/// eigenvalues descending, vectors as columns of the returned matrix.
pub fn sym_eigen(p: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    assert_eq!(p.rows(), p.cols(), "sym_eigen needs a square matrix");
    let n = p.rows();
    let mut a = symmetrize(p);
    let mut v = DenseMatrix::identity(n);
    let tol = 1e-15 * a.frob_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut rotated = false;
        for pi in 0..n {
            for qi in (pi + 1)..n {
                let apq = a[(pi, qi)];
                if apq.abs() <= tol {
                    continue;
                }
                let tau = (a[(qi, qi)] - a[(pi, pi)]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let (app, aqq) = (a[(pi, pi)], a[(qi, qi)]);
                a[(pi, pi)] = app - t * apq;
                a[(qi, qi)] = aqq + t * apq;
                a[(pi, qi)] = 0.0;
                a[(qi, pi)] = 0.0;
                for i in 0..n {
                    if i == pi || i == qi {
                        continue;
                    }
                    let aip = a[(i, pi)];
                    let aiq = a[(i, qi)];
                    a[(i, pi)] = c * aip - s * aiq;
                    a[(pi, i)] = a[(i, pi)];
                    a[(i, qi)] = s * aip + c * aiq;
                    a[(qi, i)] = a[(i, qi)];
                }
                for i in 0..n {
                    let vip = v[(i, pi)];
                    let viq = v[(i, qi)];
                    v[(i, pi)] = c * vip - s * viq;
                    v[(i, qi)] = s * vip + c * viq;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite eigenvalues"));
    let vals: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = DenseMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    (vals, vecs)
}

/// E diag(f(lambda)) E^T for a symmetric `p`; the result is symmetrized.
fn sym_matrix_function(p: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let (vals, vecs) = sym_eigen(p);
    let mapped: Vec<f64> = vals.into_iter().map(f).collect();
    let scaled = DenseMatrix::from_fn(p.rows(), p.rows(), |i, j| vecs[(i, j)] * mapped[j]);
    symmetrize(&scaled.matmul_nt(&vecs))
}

/// Relative PD floor: `pd_floor_rel * trace(P) / r`.
pub fn pd_floor(p: &DenseMatrix) -> f64 {
    let trace: f64 = (0..p.rows()).map(|i| p[(i, i)]).sum();
    TOL.pd_floor_rel * trace / p.rows().max(1) as f64
}

/// Symmetric PSD square root; negative eigenvalues (noise) clamp to zero.
pub fn sym_psd_sqrt(p: &DenseMatrix) -> DenseMatrix {
    sym_matrix_function(p, |l| l.max(0.0).sqrt())
}

/// Checks PD-ness against the relative floor, then applies `lambda^power`.
/// Used for the +/-1 and +/-1/2 powers of Gram matrices.
pub fn sym_pd_power(p: &DenseMatrix, power: f64) -> Result<DenseMatrix> {
    let floor = pd_floor(p);
    let (vals, _) = sym_eigen(p);
    let min = vals.last().copied().unwrap_or(0.0);
    if min <= floor {
        return Err(Error::Conditioning(format!(
            "matrix not positive definite: min eigenvalue {min:e} <= floor {floor:e}"
        )));
    }
    Ok(sym_matrix_function(p, |l| l.powf(power)))
}

/// Floors the Gram with `delta * (trace/r) * I`, rejects condition numbers
/// beyond the centralized bound, and inverts.
pub fn gram_inverse(gram: &DenseMatrix, delta: f64) -> Result<DenseMatrix> {
    let r = gram.rows();
    let trace: f64 = (0..r).map(|i| gram[(i, i)]).sum();
    let mut floored = gram.clone();
    let ridge = delta * trace / r.max(1) as f64;
    for i in 0..r {
        floored[(i, i)] += ridge;
    }
    let (vals, _) = sym_eigen(&floored);
    let (max, min) = (vals.first().copied().unwrap_or(0.0), vals.last().copied().unwrap_or(0.0));
    if min <= 0.0 || max / min > TOL.gram_cond_max {
        return Err(Error::Conditioning(format!(
            "Gram condition {:e} beyond {:e} after flooring",
            if min > 0.0 { max / min } else { f64::INFINITY },
            TOL.gram_cond_max
        )));
    }
    Ok(sym_matrix_function(&floored, |l| 1.0 / l))
}

/// The matrix geometric mean of PX^{-1} and PY:
/// S = PX^{-1/2} (PX^{1/2} PY PX^{1/2})^{1/2} PX^{-1/2},
/// the unique SPD solution of S PX S = PY.
pub fn geometric_mean_s(px: &DenseMatrix, py: &DenseMatrix) -> Result<DenseMatrix> {
    if px.dims() != py.dims() || px.rows() != px.cols() {
        return Err(Error::Shape(format!(
            "geometric mean needs square same-size operands, got {:?} and {:?}",
            px.dims(),
            py.dims()
        )));
    }
    let px_half = sym_pd_power(px, 0.5)?;
    let px_neg_half = sym_pd_power(px, -0.5)?;
    let middle = px_half.matmul(py).matmul(&px_half);
    let middle_min = sym_eigen(&middle).0.last().copied().unwrap_or(0.0);
    if middle_min <= pd_floor(&middle) {
        return Err(Error::Conditioning(format!(
            "geometric mean operand not positive definite (min eigenvalue {middle_min:e})"
        )));
    }
    let root = sym_psd_sqrt(&middle);
    Ok(symmetrize(&px_neg_half.matmul(&root).matmul(&px_neg_half)))
}

/// Truncated SVD: returns (U_r, sigma_r, V_r) with sigma descending and a
/// deterministic sign convention (largest-magnitude entry of each left
/// singular vector made positive).
pub fn svd_truncated(m: &DenseMatrix, r: usize) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(Error::Shape(format!("truncation rank {r} outside 1..={k}")));
    }
    let (full_u, full_sigma, full_v) = thin_svd(m);
    let mut u = DenseMatrix::zeros(m.rows(), r);
    let mut v = DenseMatrix::zeros(m.cols(), r);
    let mut sigma = Vec::with_capacity(r);
    for dst in 0..r {
        sigma.push(full_sigma[dst]);
        let flip = sign_convention(&full_u.column(dst));
        for i in 0..m.rows() {
            u[(i, dst)] = flip * full_u[(i, dst)];
        }
        for j in 0..m.cols() {
            v[(j, dst)] = flip * full_v[(j, dst)];
        }
    }
    Ok((u, sigma, v))
}

/// Bottom-r singular triplets (smallest singular values), sigma ascending
/// would be unhelpful downstream, so they come back descending among the
/// selected r, same sign convention as [`svd_truncated`].
pub fn svd_bottom(m: &DenseMatrix, r: usize) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(Error::Shape(format!("truncation rank {r} outside 1..={k}")));
    }
    let (u, sigma, v) = svd_truncated(m, k)?;
    let lo = k - r;
    Ok((u.col_range(lo, k), sigma[lo..].to_vec(), v.col_range(lo, k)))
}

/// +1 if the largest-magnitude entry is positive (ties to the earliest
/// index), -1 otherwise; fixes the sign ambiguity of singular/QR vectors.
fn sign_convention(col: &[f64]) -> f64 {
    let mut best = 0usize;
    let mut best_abs = 0.0f64;
    for (i, &v) in col.iter().enumerate() {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    if col.get(best).copied().unwrap_or(0.0) < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Thin QR of `m` (rows >= cols) with the same left-vector sign convention;
/// returns (Q: m x n, R: n x n) with Q^T Q = I.
pub fn qr_thin(m: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    if m.rows() < m.cols() {
        return Err(Error::Shape(format!(
            "thin QR needs rows >= cols, got {} x {}",
            m.rows(),
            m.cols()
        )));
    }
    let qr = m.to_na().qr();
    let mut q = DenseMatrix::from_na(&qr.q());
    let mut r = DenseMatrix::from_na(&qr.r());
    for j in 0..q.cols() {
        let col = q.column(j);
        if sign_convention(&col) < 0.0 {
            for i in 0..q.rows() {
                q[(i, j)] = -q[(i, j)];
            }
            for jj in 0..r.cols() {
                r[(j, jj)] = -r[(j, jj)];
            }
        }
    }
    Ok((q, r))
}

/// Random matrix with orthonormal columns (thin Q of a Gaussian draw).
pub fn random_orthonormal(rng: &mut RandomSource, rows: usize, cols: usize) -> DenseMatrix {
    assert!(rows >= cols, "orthonormal frame needs rows >= cols");
    let g = rng.gaussian_matrix(rows, cols, 1.0);
    qr_thin(&g).expect("shape checked").0
}

/// Orthogonal polar factor of `m` via SVD; the independent oracle for the
/// polar retraction.
/// Dense inverse of a small square matrix.
pub fn invert_small(m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.rows() != m.cols() {
        return Err(Error::Shape(format!("inverse needs a square matrix, got {}x{}", m.rows(), m.cols())));
    }
    m.to_na()
        .try_inverse()
        .map(|inv| DenseMatrix::from_na(&inv))
        .ok_or_else(|| Error::Conditioning("matrix is singular".into()))
}

/// Random invertible r x r gauge with singular values in [0.5, 5], hence
/// condition number at most 10.
pub fn well_conditioned_q(rng: &mut RandomSource, r: usize) -> DenseMatrix {
    let u = random_orthonormal(rng, r, r);
    let v = random_orthonormal(rng, r, r);
    let d: Vec<f64> = (0..r).map(|_| 0.5 + 4.5 * rng.next_uniform()).collect();
    u.matmul(&DenseMatrix::from_diag(&d)).matmul_nt(&v)
}

pub fn polar_factor(m: &DenseMatrix) -> DenseMatrix {
    let r = m.rows().min(m.cols());
    let (u, _, v) = svd_truncated(m, r).expect("rank within bounds");
    u.matmul_nt(&v)
}
