//! Adapter parameterizations: every supported architecture as a
//! materializable, countable, differentiable description of the update.
//!
//! A spec owns its parameters. `materialize` produces the dense update (or
//! the stacked update for tensor forms), `trainable`/`vjp` expose the
//! parameters and their gradients in one canonical block order so generic
//! training and finite-difference checks never special-case a variant.
//! Frozen fields (base weights, shared bases, dictionaries, masks) are data
//! the optimizers never touch.

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, Tensor3};
use crate::spectral::{numerical_rank, svd_truncated};

/// How orthonormality of the U/V factors is maintained during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoMode {
    /// The optimizer must keep factors on the Stiefel manifold.
    Strict,
    /// A penalty or landing term owns feasibility; drift is allowed.
    Penalized,
}

/// Dense product of a spec: a single matrix or a stack of layers.
#[derive(Debug, Clone)]
pub enum Materialized {
    Matrix(DenseMatrix),
    Stack(Tensor3),
}

impl Materialized {
    /// (rows, cols, layers); layers = 1 for the matrix form.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            Materialized::Matrix(m) => (m.rows(), m.cols(), 1),
            Materialized::Stack(t) => t.dims(),
        }
    }

    pub fn as_matrix(&self) -> Result<&DenseMatrix> {
        match self {
            Materialized::Matrix(m) => Ok(m),
            Materialized::Stack(_) => {
                Err(Error::Shape("expected a matrix, found a layer stack".into()))
            }
        }
    }

    pub fn as_stack(&self) -> Result<&Tensor3> {
        match self {
            Materialized::Stack(t) => Ok(t),
            Materialized::Matrix(_) => {
                Err(Error::Shape("expected a layer stack, found a matrix".into()))
            }
        }
    }

    pub fn frob_norm(&self) -> f64 {
        match self {
            Materialized::Matrix(m) => m.frob_norm(),
            Materialized::Stack(t) => t.frob_norm(),
        }
    }

    pub fn sub(&self, other: &Materialized) -> Result<Materialized> {
        match (self, other) {
            (Materialized::Matrix(a), Materialized::Matrix(b)) => {
                Ok(Materialized::Matrix(a.sub(b)))
            }
            (Materialized::Stack(a), Materialized::Stack(b)) => Ok(Materialized::Stack(a.sub(b))),
            _ => Err(Error::Shape("matrix and stack are not comparable".into())),
        }
    }
}

/// Tagged union over every adapter architecture.
///
/// Matrix variants produce m x n updates; CP3, Tucker2, Tucker3 and TT3
/// produce m x n x L stacks. DoRA materializes the full adapted matrix
/// (magnitudes times unit columns of W0 + XY^T), HiRA materializes
/// W0 ⊙ (XY^T); every other variant materializes the bare update.
#[derive(Debug, Clone)]
pub enum AdapterSpec {
    /// X Y^T.
    Bm { x: DenseMatrix, y: DenseMatrix },
    /// U Sigma V^T; sigma is r x 1 when `sigma_diagonal`, else r x r.
    SvdType {
        u: DenseMatrix,
        sigma: DenseMatrix,
        v: DenseMatrix,
        sigma_diagonal: bool,
        ortho_mode: OrthoMode,
    },
    /// (X1 Y1^T) ⊙ (X2 Y2^T).
    FedPara { x1: DenseMatrix, y1: DenseMatrix, x2: DenseMatrix, y2: DenseMatrix },
    /// W0 ⊙ (X Y^T); W0 frozen.
    Hira { w0: DenseMatrix, x: DenseMatrix, y: DenseMatrix },
    /// A ⊗ B.
    Kron { a: DenseMatrix, b: DenseMatrix },
    /// sum_k alpha_k (A_k ⊗ B_k).
    KronEnsemble { alpha: Vec<f64>, a: Vec<DenseMatrix>, b: Vec<DenseMatrix> },
    /// X Y^T + S with S supported on a fixed mask; only `values` train.
    LowRankSparse {
        x: DenseMatrix,
        y: DenseMatrix,
        mask: Vec<(usize, usize)>,
        values: Vec<f64>,
    },
    /// W0 ⊙ S; W0 and the mask frozen, only `values` train.
    SparseHadamard { w0: DenseMatrix, mask: Vec<(usize, usize)>, values: Vec<f64> },
    /// diag(a) A diag(b) B^T with frozen shared bases.
    Vera {
        a: Vec<f64>,
        b: Vec<f64>,
        a_shared: DenseMatrix,
        b_shared: DenseMatrix,
    },
    /// (sum_k alpha_k A_k)(sum_k beta_k B_k)^T over frozen dictionaries.
    Nola {
        alpha: Vec<f64>,
        beta: Vec<f64>,
        dict_a: Vec<DenseMatrix>,
        dict_b: Vec<DenseMatrix>,
    },
    /// Column magnitudes times unit columns of W0 + X Y^T; W0 frozen.
    Dora {
        w0: DenseMatrix,
        magnitude: Vec<f64>,
        x: DenseMatrix,
        y: DenseMatrix,
    },
    /// Stack[i,j,l] = sum_s S1[i,s] S2[j,s] S3[l,s].
    Cp3 { s1: DenseMatrix, s2: DenseMatrix, s3: DenseMatrix },
    /// Layer l = U1 C_l U2^T with one r x r core per layer.
    Tucker2 { cores: Vec<DenseMatrix>, u1: DenseMatrix, u2: DenseMatrix },
    /// Full order-3 Tucker form: core contracted with U1, U2, U3.
    Tucker3 { core: Tensor3, u1: DenseMatrix, u2: DenseMatrix, u3: DenseMatrix },
    /// Tensor-train: layer l = G1 (sum_q G3[q,l] G2[:, :, q]).
    Tt3 { g1: DenseMatrix, g2: Tensor3, g3: DenseMatrix },
}

fn finite(label: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite entry in {label}")))
    }
}

fn check_mask(mask: &[(usize, usize)], rows: usize, cols: usize, values: usize) -> Result<()> {
    if mask.len() != values {
        return Err(Error::Shape(format!(
            "mask holds {} coordinates but {} values supplied",
            mask.len(),
            values
        )));
    }
    let mut prev: Option<usize> = None;
    for &(i, j) in mask {
        if i >= rows || j >= cols {
            return Err(Error::Shape(format!(
                "mask coordinate ({i}, {j}) outside {rows} x {cols}"
            )));
        }
        let linear = i * cols + j;
        if let Some(p) = prev {
            if linear <= p {
                return Err(Error::Shape(
                    "mask coordinates must be strictly increasing".into(),
                ));
            }
        }
        prev = Some(linear);
    }
    Ok(())
}

fn factor_pair(label: &str, x: &DenseMatrix, y: &DenseMatrix) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "{label}: factors share a column count, got {} and {}",
            x.cols(),
            y.cols()
        )));
    }
    if x.rows() == 0 || y.rows() == 0 || x.cols() == 0 {
        return Err(Error::Shape(format!("{label}: empty factor")));
    }
    Ok(())
}

impl AdapterSpec {
    /// Checks the structural invariants. Every consumer that accepts a spec
    /// from outside the crate calls this before using it.
    pub fn validate(&self) -> Result<()> {
        match self {
            AdapterSpec::Bm { x, y } => {
                factor_pair("BM", x, y)?;
                finite("X", x.data())?;
                finite("Y", y.data())
            }
            AdapterSpec::SvdType { u, sigma, v, sigma_diagonal, .. } => {
                factor_pair("SVD-type", u, v)?;
                let r = u.cols();
                let want = if *sigma_diagonal { (r, 1) } else { (r, r) };
                if sigma.dims() != want {
                    return Err(Error::Shape(format!(
                        "Sigma is {} x {}, expected {} x {}",
                        sigma.rows(),
                        sigma.cols(),
                        want.0,
                        want.1
                    )));
                }
                finite("U", u.data())?;
                finite("Sigma", sigma.data())?;
                finite("V", v.data())
            }
            AdapterSpec::FedPara { x1, y1, x2, y2 } => {
                factor_pair("FedPara branch 1", x1, y1)?;
                factor_pair("FedPara branch 2", x2, y2)?;
                if x1.rows() != x2.rows() || y1.rows() != y2.rows() {
                    return Err(Error::Shape(
                        "FedPara branches must produce equal shapes".into(),
                    ));
                }
                finite("X1", x1.data())?;
                finite("Y1", y1.data())?;
                finite("X2", x2.data())?;
                finite("Y2", y2.data())
            }
            AdapterSpec::Hira { w0, x, y } => {
                factor_pair("HiRA", x, y)?;
                if w0.dims() != (x.rows(), y.rows()) {
                    return Err(Error::Shape(format!(
                        "W0 is {} x {}, factors give {} x {}",
                        w0.rows(),
                        w0.cols(),
                        x.rows(),
                        y.rows()
                    )));
                }
                finite("X", x.data())?;
                finite("Y", y.data())
            }
            AdapterSpec::Kron { a, b } => {
                if a.rows() == 0 || a.cols() == 0 || b.rows() == 0 || b.cols() == 0 {
                    return Err(Error::Shape("Kronecker factors must be nonempty".into()));
                }
                finite("A", a.data())?;
                finite("B", b.data())
            }
            AdapterSpec::KronEnsemble { alpha, a, b } => {
                if alpha.is_empty() || alpha.len() != a.len() || alpha.len() != b.len() {
                    return Err(Error::Shape(format!(
                        "ensemble sizes disagree: {} weights, {} A factors, {} B factors",
                        alpha.len(),
                        a.len(),
                        b.len()
                    )));
                }
                for (ak, bk) in a.iter().zip(b) {
                    if ak.dims() != a[0].dims() || bk.dims() != b[0].dims() {
                        return Err(Error::Shape("ensemble terms must share shapes".into()));
                    }
                    finite("A_k", ak.data())?;
                    finite("B_k", bk.data())?;
                }
                finite("alpha", alpha)
            }
            AdapterSpec::LowRankSparse { x, y, mask, values } => {
                factor_pair("low-rank part", x, y)?;
                check_mask(mask, x.rows(), y.rows(), values.len())?;
                finite("X", x.data())?;
                finite("Y", y.data())?;
                finite("values", values)
            }
            AdapterSpec::SparseHadamard { w0, mask, values } => {
                check_mask(mask, w0.rows(), w0.cols(), values.len())?;
                finite("values", values)
            }
            AdapterSpec::Vera { a, b, a_shared, b_shared } => {
                factor_pair("shared bases", a_shared, b_shared)?;
                if a.len() != a_shared.rows() {
                    return Err(Error::Shape(format!(
                        "a has {} entries, base has {} rows",
                        a.len(),
                        a_shared.rows()
                    )));
                }
                if b.len() != a_shared.cols() {
                    return Err(Error::Shape(format!(
                        "b has {} entries, rank is {}",
                        b.len(),
                        a_shared.cols()
                    )));
                }
                finite("a", a)?;
                finite("b", b)
            }
            AdapterSpec::Nola { alpha, beta, dict_a, dict_b } => {
                if alpha.is_empty()
                    || alpha.len() != beta.len()
                    || alpha.len() != dict_a.len()
                    || alpha.len() != dict_b.len()
                {
                    return Err(Error::Shape(format!(
                        "dictionary sizes disagree: {} alpha, {} beta, {} A, {} B",
                        alpha.len(),
                        beta.len(),
                        dict_a.len(),
                        dict_b.len()
                    )));
                }
                for (ak, bk) in dict_a.iter().zip(dict_b) {
                    factor_pair("dictionary atoms", ak, bk)?;
                    if ak.dims() != dict_a[0].dims() || bk.dims() != dict_b[0].dims() {
                        return Err(Error::Shape("dictionary atoms must share shapes".into()));
                    }
                }
                finite("alpha", alpha)?;
                finite("beta", beta)
            }
            AdapterSpec::Dora { w0, magnitude, x, y } => {
                factor_pair("DoRA", x, y)?;
                if w0.dims() != (x.rows(), y.rows()) {
                    return Err(Error::Shape(format!(
                        "W0 is {} x {}, factors give {} x {}",
                        w0.rows(),
                        w0.cols(),
                        x.rows(),
                        y.rows()
                    )));
                }
                if magnitude.len() != w0.cols() {
                    return Err(Error::Shape(format!(
                        "{} magnitudes for {} columns",
                        magnitude.len(),
                        w0.cols()
                    )));
                }
                finite("magnitude", magnitude)?;
                finite("X", x.data())?;
                finite("Y", y.data())
            }
            AdapterSpec::Cp3 { s1, s2, s3 } => {
                if s1.cols() != s2.cols() || s1.cols() != s3.cols() || s1.cols() == 0 {
                    return Err(Error::Shape(format!(
                        "CP factors share a column count, got {}, {}, {}",
                        s1.cols(),
                        s2.cols(),
                        s3.cols()
                    )));
                }
                finite("S1", s1.data())?;
                finite("S2", s2.data())?;
                finite("S3", s3.data())
            }
            AdapterSpec::Tucker2 { cores, u1, u2 } => {
                let r = u1.cols();
                if r == 0 || u2.cols() != r {
                    return Err(Error::Shape("U1 and U2 share a column count".into()));
                }
                if cores.is_empty() {
                    return Err(Error::Shape("at least one core layer required".into()));
                }
                for c in cores {
                    if c.dims() != (r, r) {
                        return Err(Error::Shape(format!(
                            "core layer is {} x {}, expected {r} x {r}",
                            c.rows(),
                            c.cols()
                        )));
                    }
                    finite("core", c.data())?;
                }
                finite("U1", u1.data())?;
                finite("U2", u2.data())
            }
            AdapterSpec::Tucker3 { core, u1, u2, u3 } => {
                let (r1, r2, r3) = core.dims();
                if u1.cols() != r1 || u2.cols() != r2 || u3.cols() != r3 {
                    return Err(Error::Shape(format!(
                        "core is {r1} x {r2} x {r3}, factors have {} / {} / {} columns",
                        u1.cols(),
                        u2.cols(),
                        u3.cols()
                    )));
                }
                finite("core", core.data())?;
                finite("U1", u1.data())?;
                finite("U2", u2.data())?;
                finite("U3", u3.data())
            }
            AdapterSpec::Tt3 { g1, g2, g3 } => {
                let (r1, _, r2) = g2.dims();
                if g1.cols() != r1 {
                    return Err(Error::Shape(format!(
                        "G1 has {} columns, G2 expects {r1}",
                        g1.cols()
                    )));
                }
                if g3.rows() != r2 {
                    return Err(Error::Shape(format!(
                        "G3 has {} rows, G2 expects {r2}",
                        g3.rows()
                    )));
                }
                finite("G1", g1.data())?;
                finite("G2", g2.data())?;
                finite("G3", g3.data())
            }
        }
    }

    /// (rows, cols, layers) of the materialized output; layers = 1 for
    /// matrix variants.
    pub fn output_dims(&self) -> (usize, usize, usize) {
        match self {
            AdapterSpec::Bm { x, y } => (x.rows(), y.rows(), 1),
            AdapterSpec::SvdType { u, v, .. } => (u.rows(), v.rows(), 1),
            AdapterSpec::FedPara { x1, y1, .. } => (x1.rows(), y1.rows(), 1),
            AdapterSpec::Hira { x, y, .. } => (x.rows(), y.rows(), 1),
            AdapterSpec::Kron { a, b } => (a.rows() * b.rows(), a.cols() * b.cols(), 1),
            AdapterSpec::KronEnsemble { a, b, .. } => {
                (a[0].rows() * b[0].rows(), a[0].cols() * b[0].cols(), 1)
            }
            AdapterSpec::LowRankSparse { x, y, .. } => (x.rows(), y.rows(), 1),
            AdapterSpec::SparseHadamard { w0, .. } => (w0.rows(), w0.cols(), 1),
            AdapterSpec::Vera { a_shared, b_shared, .. } => (a_shared.rows(), b_shared.rows(), 1),
            AdapterSpec::Nola { dict_a, dict_b, .. } => (dict_a[0].rows(), dict_b[0].rows(), 1),
            AdapterSpec::Dora { w0, .. } => (w0.rows(), w0.cols(), 1),
            AdapterSpec::Cp3 { s1, s2, s3 } => (s1.rows(), s2.rows(), s3.rows()),
            AdapterSpec::Tucker2 { cores, u1, u2 } => (u1.rows(), u2.rows(), cores.len()),
            AdapterSpec::Tucker3 { u1, u2, u3, .. } => (u1.rows(), u2.rows(), u3.rows()),
            AdapterSpec::Tt3 { g1, g2, g3 } => (g1.rows(), g2.dims().1, g3.cols()),
        }
    }

    /// Name as it appears in config files.
    pub fn name(&self) -> &'static str {
        match self {
            AdapterSpec::Bm { .. } => "bm",
            AdapterSpec::SvdType { .. } => "svd_type",
            AdapterSpec::FedPara { .. } => "fedpara",
            AdapterSpec::Hira { .. } => "hira",
            AdapterSpec::Kron { .. } => "kron",
            AdapterSpec::KronEnsemble { .. } => "kron_ensemble",
            AdapterSpec::LowRankSparse { .. } => "low_rank_sparse",
            AdapterSpec::SparseHadamard { .. } => "sparse_hadamard",
            AdapterSpec::Vera { .. } => "vera",
            AdapterSpec::Nola { .. } => "nola",
            AdapterSpec::Dora { .. } => "dora",
            AdapterSpec::Cp3 { .. } => "cp3",
            AdapterSpec::Tucker2 { .. } => "tucker2",
            AdapterSpec::Tucker3 { .. } => "tucker3",
            AdapterSpec::Tt3 { .. } => "tt3",
        }
    }

    /// Number of trainable scalars; frozen fields never count.
    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|block| block.len()).sum()
    }

    /// Trainable parameter blocks in the canonical order used by `vjp`.
    pub fn trainable(&self) -> Vec<&[f64]> {
        match self {
            AdapterSpec::Bm { x, y } => vec![x.data(), y.data()],
            AdapterSpec::SvdType { u, sigma, v, .. } => {
                vec![u.data(), sigma.data(), v.data()]
            }
            AdapterSpec::FedPara { x1, y1, x2, y2 } => {
                vec![x1.data(), y1.data(), x2.data(), y2.data()]
            }
            AdapterSpec::Hira { x, y, .. } => vec![x.data(), y.data()],
            AdapterSpec::Kron { a, b } => vec![a.data(), b.data()],
            AdapterSpec::KronEnsemble { alpha, a, b } => {
                let mut blocks: Vec<&[f64]> = vec![alpha.as_slice()];
                blocks.extend(a.iter().map(|m| m.data()));
                blocks.extend(b.iter().map(|m| m.data()));
                blocks
            }
            AdapterSpec::LowRankSparse { x, y, values, .. } => {
                vec![x.data(), y.data(), values.as_slice()]
            }
            AdapterSpec::SparseHadamard { values, .. } => vec![values.as_slice()],
            AdapterSpec::Vera { a, b, .. } => vec![a.as_slice(), b.as_slice()],
            AdapterSpec::Nola { alpha, beta, .. } => vec![alpha.as_slice(), beta.as_slice()],
            AdapterSpec::Dora { magnitude, x, y, .. } => {
                vec![magnitude.as_slice(), x.data(), y.data()]
            }
            AdapterSpec::Cp3 { s1, s2, s3 } => vec![s1.data(), s2.data(), s3.data()],
            AdapterSpec::Tucker2 { cores, u1, u2 } => {
                let mut blocks: Vec<&[f64]> = vec![u1.data(), u2.data()];
                blocks.extend(cores.iter().map(|c| c.data()));
                blocks
            }
            AdapterSpec::Tucker3 { core, u1, u2, u3 } => {
                vec![core.data(), u1.data(), u2.data(), u3.data()]
            }
            AdapterSpec::Tt3 { g1, g2, g3 } => vec![g1.data(), g2.data(), g3.data()],
        }
    }

    /// Mutable view of the same blocks, same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            AdapterSpec::Bm { x, y } => vec![x.data_mut(), y.data_mut()],
            AdapterSpec::SvdType { u, sigma, v, .. } => {
                vec![u.data_mut(), sigma.data_mut(), v.data_mut()]
            }
            AdapterSpec::FedPara { x1, y1, x2, y2 } => {
                vec![x1.data_mut(), y1.data_mut(), x2.data_mut(), y2.data_mut()]
            }
            AdapterSpec::Hira { x, y, .. } => vec![x.data_mut(), y.data_mut()],
            AdapterSpec::Kron { a, b } => vec![a.data_mut(), b.data_mut()],
            AdapterSpec::KronEnsemble { alpha, a, b } => {
                let mut blocks: Vec<&mut [f64]> = vec![alpha.as_mut_slice()];
                blocks.extend(a.iter_mut().map(|m| m.data_mut()));
                blocks.extend(b.iter_mut().map(|m| m.data_mut()));
                blocks
            }
            AdapterSpec::LowRankSparse { x, y, values, .. } => {
                vec![x.data_mut(), y.data_mut(), values.as_mut_slice()]
            }
            AdapterSpec::SparseHadamard { values, .. } => vec![values.as_mut_slice()],
            AdapterSpec::Vera { a, b, .. } => vec![a.as_mut_slice(), b.as_mut_slice()],
            AdapterSpec::Nola { alpha, beta, .. } => {
                vec![alpha.as_mut_slice(), beta.as_mut_slice()]
            }
            AdapterSpec::Dora { magnitude, x, y, .. } => {
                vec![magnitude.as_mut_slice(), x.data_mut(), y.data_mut()]
            }
            AdapterSpec::Cp3 { s1, s2, s3 } => {
                vec![s1.data_mut(), s2.data_mut(), s3.data_mut()]
            }
            AdapterSpec::Tucker2 { cores, u1, u2 } => {
                let mut blocks: Vec<&mut [f64]> = vec![u1.data_mut(), u2.data_mut()];
                blocks.extend(cores.iter_mut().map(|c| c.data_mut()));
                blocks
            }
            AdapterSpec::Tucker3 { core, u1, u2, u3 } => {
                vec![core.data_mut(), u1.data_mut(), u2.data_mut(), u3.data_mut()]
            }
            AdapterSpec::Tt3 { g1, g2, g3 } => {
                vec![g1.data_mut(), g2.data_mut(), g3.data_mut()]
            }
        }
    }

    /// Dense output of the variant's defining formula.
    pub fn materialize(&self) -> Result<Materialized> {
        self.validate()?;
        Ok(match self {
            AdapterSpec::Bm { x, y } => Materialized::Matrix(x.matmul_nt(y)),
            AdapterSpec::SvdType { u, sigma, v, sigma_diagonal, .. } => {
                Materialized::Matrix(scaled_left(u, sigma, *sigma_diagonal).matmul_nt(v))
            }
            AdapterSpec::FedPara { x1, y1, x2, y2 } => {
                Materialized::Matrix(x1.matmul_nt(y1).hadamard(&x2.matmul_nt(y2)))
            }
            AdapterSpec::Hira { w0, x, y } => Materialized::Matrix(w0.hadamard(&x.matmul_nt(y))),
            AdapterSpec::Kron { a, b } => Materialized::Matrix(a.kron(b)),
            AdapterSpec::KronEnsemble { alpha, a, b } => {
                let (m, n, _) = self.output_dims();
                let mut out = DenseMatrix::zeros(m, n);
                for ((&w, ak), bk) in alpha.iter().zip(a).zip(b) {
                    out = out.add(&ak.kron(bk).scale(w));
                }
                Materialized::Matrix(out)
            }
            AdapterSpec::LowRankSparse { x, y, mask, values } => {
                let mut out = x.matmul_nt(y);
                for (&(i, j), &v) in mask.iter().zip(values) {
                    out[(i, j)] += v;
                }
                Materialized::Matrix(out)
            }
            AdapterSpec::SparseHadamard { w0, mask, values } => {
                let mut out = DenseMatrix::zeros(w0.rows(), w0.cols());
                for (&(i, j), &v) in mask.iter().zip(values) {
                    out[(i, j)] = w0[(i, j)] * v;
                }
                Materialized::Matrix(out)
            }
            AdapterSpec::Vera { a, b, a_shared, b_shared } => {
                // diag(a) A diag(b) B^T via column then row scaling.
                let ab = DenseMatrix::from_fn(a_shared.rows(), a_shared.cols(), |i, s| {
                    a_shared[(i, s)] * b[s]
                });
                let mut out = ab.matmul_nt(b_shared);
                for i in 0..out.rows() {
                    for j in 0..out.cols() {
                        out[(i, j)] *= a[i];
                    }
                }
                Materialized::Matrix(out)
            }
            AdapterSpec::Nola { alpha, beta, dict_a, dict_b } => {
                let a_bar = mix(alpha, dict_a);
                let b_bar = mix(beta, dict_b);
                Materialized::Matrix(a_bar.matmul_nt(&b_bar))
            }
            AdapterSpec::Dora { w0, magnitude, x, y } => {
                let v = w0.add(&x.matmul_nt(y));
                let norms = column_norms_checked(&v)?;
                let out = DenseMatrix::from_fn(v.rows(), v.cols(), |i, j| {
                    magnitude[j] * v[(i, j)] / norms[j]
                });
                Materialized::Matrix(out)
            }
            AdapterSpec::Cp3 { s1, s2, s3 } => {
                let (m, n, layers) = self.output_dims();
                let r = s1.cols();
                let mut t = Tensor3::zeros(m, n, layers);
                for l in 0..layers {
                    for s in 0..r {
                        let w = s3[(l, s)];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            let wj = w * s2[(j, s)];
                            for i in 0..m {
                                t[(i, j, l)] += s1[(i, s)] * wj;
                            }
                        }
                    }
                }
                Materialized::Stack(t)
            }
            AdapterSpec::Tucker2 { cores, u1, u2 } => {
                let slices: Vec<DenseMatrix> =
                    cores.iter().map(|c| u1.matmul(c).matmul_nt(u2)).collect();
                Materialized::Stack(Tensor3::from_slices(&slices)?)
            }
            AdapterSpec::Tucker3 { core, u1, u2, u3 } => {
                let slices: Vec<DenseMatrix> = (0..u3.rows())
                    .map(|l| u1.matmul(&mode3_contract(core, u3, l)).matmul_nt(u2))
                    .collect();
                Materialized::Stack(Tensor3::from_slices(&slices)?)
            }
            AdapterSpec::Tt3 { g1, g2, g3 } => {
                let slices: Vec<DenseMatrix> = (0..g3.cols())
                    .map(|l| g1.matmul(&tt_middle(g2, g3, l)))
                    .collect();
                Materialized::Stack(Tensor3::from_slices(&slices)?)
            }
        })
    }

    /// Gradients of a scalar loss with respect to every trainable block,
    /// given the loss gradient `g` with respect to the materialized output.
    /// Blocks come back flat, aligned with `trainable()`.
    pub fn vjp(&self, g: &Materialized) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        if g.dims() != self.output_dims() {
            return Err(Error::Shape(format!(
                "cotangent dims {:?} do not match output dims {:?}",
                g.dims(),
                self.output_dims()
            )));
        }
        match self {
            AdapterSpec::Bm { x, y } => {
                let g = g.as_matrix()?;
                let (gx, gy) = bm_grads(x, y, g);
                Ok(vec![gx.into_data(), gy.into_data()])
            }
            AdapterSpec::SvdType { u, sigma, v, sigma_diagonal, .. } => {
                let g = g.as_matrix()?;
                let (gu, gs, gv) = svd_grads(u, sigma, v, *sigma_diagonal, g);
                Ok(vec![gu.into_data(), gs.into_data(), gv.into_data()])
            }
            AdapterSpec::FedPara { x1, y1, x2, y2 } => {
                let g = g.as_matrix()?;
                let p1 = x1.matmul_nt(y1);
                let p2 = x2.matmul_nt(y2);
                let g1 = g.hadamard(&p2);
                let g2 = g.hadamard(&p1);
                Ok(vec![
                    g1.matmul(y1).into_data(),
                    g1.matmul_tn(x1).into_data(),
                    g2.matmul(y2).into_data(),
                    g2.matmul_tn(x2).into_data(),
                ])
            }
            AdapterSpec::Hira { w0, x, y } => {
                let g = g.as_matrix()?;
                let gm = g.hadamard(w0);
                Ok(vec![gm.matmul(y).into_data(), gm.matmul_tn(x).into_data()])
            }
            AdapterSpec::Kron { a, b } => {
                let g = g.as_matrix()?;
                let (ga, gb) = kron_grads(a, b, g, 1.0);
                Ok(vec![ga.into_data(), gb.into_data()])
            }
            AdapterSpec::KronEnsemble { alpha, a, b } => {
                let g = g.as_matrix()?;
                let mut galpha = Vec::with_capacity(alpha.len());
                let mut gas = Vec::with_capacity(alpha.len());
                let mut gbs = Vec::with_capacity(alpha.len());
                for ((&w, ak), bk) in alpha.iter().zip(a).zip(b) {
                    galpha.push(g.frob_inner(&ak.kron(bk)));
                    let (ga, gb) = kron_grads(ak, bk, g, w);
                    gas.push(ga.into_data());
                    gbs.push(gb.into_data());
                }
                let mut blocks = vec![galpha];
                blocks.extend(gas);
                blocks.extend(gbs);
                Ok(blocks)
            }
            AdapterSpec::LowRankSparse { x, y, mask, .. } => {
                let g = g.as_matrix()?;
                let gvals = mask.iter().map(|&(i, j)| g[(i, j)]).collect();
                Ok(vec![g.matmul(y).into_data(), g.matmul_tn(x).into_data(), gvals])
            }
            AdapterSpec::SparseHadamard { w0, mask, .. } => {
                let g = g.as_matrix()?;
                Ok(vec![mask.iter().map(|&(i, j)| g[(i, j)] * w0[(i, j)]).collect()])
            }
            AdapterSpec::Vera { a, b, a_shared, b_shared } => {
                let g = g.as_matrix()?;
                // Row dots against A diag(b) B^T for a, diagonal of
                // (diag(a) A)^T G B for b.
                let ab = DenseMatrix::from_fn(a_shared.rows(), a_shared.cols(), |i, s| {
                    a_shared[(i, s)] * b[s]
                });
                let k = ab.matmul_nt(b_shared);
                let ga: Vec<f64> = (0..a.len())
                    .map(|i| (0..k.cols()).map(|j| g[(i, j)] * k[(i, j)]).sum())
                    .collect();
                let gb_full = g.matmul(b_shared);
                let gb: Vec<f64> = (0..b.len())
                    .map(|s| {
                        (0..a.len()).map(|i| a[i] * a_shared[(i, s)] * gb_full[(i, s)]).sum()
                    })
                    .collect();
                Ok(vec![ga, gb])
            }
            AdapterSpec::Nola { alpha, beta, dict_a, dict_b } => {
                let g = g.as_matrix()?;
                let a_bar = mix(alpha, dict_a);
                let b_bar = mix(beta, dict_b);
                let gb_bar = g.matmul(&b_bar);
                let ga_bar = g.matmul_tn(&a_bar);
                let galpha = dict_a.iter().map(|ak| gb_bar.frob_inner(ak)).collect();
                let gbeta = dict_b.iter().map(|bk| ga_bar.frob_inner(bk)).collect();
                Ok(vec![galpha, gbeta])
            }
            AdapterSpec::Dora { w0, magnitude, x, y } => {
                let g = g.as_matrix()?;
                let v = w0.add(&x.matmul_nt(y));
                let norms = column_norms_checked(&v)?;
                let mut gmag = vec![0.0; magnitude.len()];
                let mut gv = DenseMatrix::zeros(v.rows(), v.cols());
                for j in 0..v.cols() {
                    let c = norms[j];
                    let mut gdotv = 0.0;
                    for i in 0..v.rows() {
                        gdotv += g[(i, j)] * v[(i, j)];
                    }
                    gmag[j] = gdotv / c;
                    let scale = magnitude[j] / c;
                    for i in 0..v.rows() {
                        gv[(i, j)] = scale * (g[(i, j)] - gdotv * v[(i, j)] / (c * c));
                    }
                }
                Ok(vec![gmag, gv.matmul(y).into_data(), gv.matmul_tn(x).into_data()])
            }
            AdapterSpec::Cp3 { s1, s2, s3 } => {
                let g = g.as_stack()?;
                let (m, n, layers) = g.dims();
                let r = s1.cols();
                let mut gs1 = DenseMatrix::zeros(m, r);
                let mut gs2 = DenseMatrix::zeros(n, r);
                let mut gs3 = DenseMatrix::zeros(layers, r);
                for l in 0..layers {
                    let gl = g.slice(l);
                    let t1 = gl.matmul(s2);
                    let t2 = gl.matmul_tn(s1);
                    for s in 0..r {
                        let w = s3[(l, s)];
                        for i in 0..m {
                            gs1[(i, s)] += w * t1[(i, s)];
                        }
                        for j in 0..n {
                            gs2[(j, s)] += w * t2[(j, s)];
                        }
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += s1[(i, s)] * t1[(i, s)];
                        }
                        gs3[(l, s)] = acc;
                    }
                }
                Ok(vec![gs1.into_data(), gs2.into_data(), gs3.into_data()])
            }
            AdapterSpec::Tucker2 { cores, u1, u2 } => {
                let g = g.as_stack()?;
                let mut gu1 = DenseMatrix::zeros(u1.rows(), u1.cols());
                let mut gu2 = DenseMatrix::zeros(u2.rows(), u2.cols());
                let mut gcores = Vec::with_capacity(cores.len());
                for (l, c) in cores.iter().enumerate() {
                    let gl = g.slice(l);
                    let glu2 = gl.matmul(u2);
                    gu1 = gu1.add(&glu2.matmul_nt(c));
                    gu2 = gu2.add(&gl.matmul_tn(&u1.matmul(c)));
                    gcores.push(u1.matmul_tn(&glu2).into_data());
                }
                let mut blocks = vec![gu1.into_data(), gu2.into_data()];
                blocks.extend(gcores);
                Ok(blocks)
            }
            AdapterSpec::Tucker3 { core, u1, u2, u3 } => {
                let g = g.as_stack()?;
                let (r1, r2, r3) = core.dims();
                let layers = u3.rows();
                let mut gu1 = DenseMatrix::zeros(u1.rows(), r1);
                let mut gu2 = DenseMatrix::zeros(u2.rows(), r2);
                let mut gu3 = DenseMatrix::zeros(layers, r3);
                let mut gcore = Tensor3::zeros(r1, r2, r3);
                // h_l = U1^T G_l U2 collapses every row/col contraction.
                for l in 0..layers {
                    let gl = g.slice(l);
                    let glu2 = gl.matmul(u2);
                    let hl = u1.matmul_tn(&glu2);
                    let cl = mode3_contract(core, u3, l);
                    gu1 = gu1.add(&glu2.matmul_nt(&cl));
                    gu2 = gu2.add(&gl.matmul_tn(&u1.matmul(&cl)));
                    for t in 0..r3 {
                        let w = u3[(l, t)];
                        let mut inner = 0.0;
                        for p in 0..r1 {
                            for q in 0..r2 {
                                gcore[(p, q, t)] += w * hl[(p, q)];
                                inner += hl[(p, q)] * core[(p, q, t)];
                            }
                        }
                        gu3[(l, t)] = gu3[(l, t)] + inner;
                    }
                }
                Ok(vec![
                    gcore.into_data(),
                    gu1.into_data(),
                    gu2.into_data(),
                    gu3.into_data(),
                ])
            }
            AdapterSpec::Tt3 { g1, g2, g3 } => {
                let gt = g.as_stack()?;
                let (r1, n, r2) = g2.dims();
                let layers = g3.cols();
                let mut gg1 = DenseMatrix::zeros(g1.rows(), r1);
                let mut gg2 = Tensor3::zeros(r1, n, r2);
                let mut gg3 = DenseMatrix::zeros(r2, layers);
                for l in 0..layers {
                    let gl = gt.slice(l);
                    gg1 = gg1.add(&gl.matmul_nt(&tt_middle(g2, g3, l)));
                    let nl = g1.matmul_tn(&gl);
                    for q in 0..r2 {
                        let w = g3[(q, l)];
                        let mut inner = 0.0;
                        for p in 0..r1 {
                            for j in 0..n {
                                gg2[(p, j, q)] += w * nl[(p, j)];
                                inner += nl[(p, j)] * g2[(p, j, q)];
                            }
                        }
                        gg3[(q, l)] = inner + gg3[(q, l)];
                    }
                }
                Ok(vec![gg1.into_data(), gg2.into_data(), gg3.into_data()])
            }
        }
    }
}

/// U scaled by Sigma on the right, honoring the storage layout.
fn scaled_left(u: &DenseMatrix, sigma: &DenseMatrix, diagonal: bool) -> DenseMatrix {
    if diagonal {
        DenseMatrix::from_fn(u.rows(), u.cols(), |i, s| u[(i, s)] * sigma[(s, 0)])
    } else {
        u.matmul(sigma)
    }
}

/// sum_k weight_k atoms_k.
fn mix(weights: &[f64], atoms: &[DenseMatrix]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(atoms[0].rows(), atoms[0].cols());
    for (&w, atom) in weights.iter().zip(atoms) {
        out.axpy(w, atom);
    }
    out
}

fn column_norms_checked(v: &DenseMatrix) -> Result<Vec<f64>> {
    let norms = v.col_norms();
    for (j, &c) in norms.iter().enumerate() {
        if c <= f64::MIN_POSITIVE {
            return Err(Error::Conditioning(format!(
                "column {j} of the adapted matrix has zero norm"
            )));
        }
    }
    Ok(norms)
}

/// Layer l of the core contracted along the third mode with row l of `u3`.
fn mode3_contract(core: &Tensor3, u3: &DenseMatrix, l: usize) -> DenseMatrix {
    let (r1, r2, r3) = core.dims();
    DenseMatrix::from_fn(r1, r2, |p, q| (0..r3).map(|t| u3[(l, t)] * core[(p, q, t)]).sum())
}

/// sum_q G3[q, l] G2[:, :, q], the r1 x n middle factor for layer l.
fn tt_middle(g2: &Tensor3, g3: &DenseMatrix, l: usize) -> DenseMatrix {
    let (r1, n, r2) = g2.dims();
    DenseMatrix::from_fn(r1, n, |p, j| (0..r2).map(|q| g3[(q, l)] * g2[(p, j, q)]).sum())
}

/// Factor gradients for the two-factor product X Y^T: (G Y, G^T X).
pub fn bm_grads(x: &DenseMatrix, y: &DenseMatrix, g: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    (g.matmul(y), g.matmul_tn(x))
}

/// Factor gradients for U Sigma V^T in either Sigma layout.
pub fn svd_grads(
    u: &DenseMatrix,
    sigma: &DenseMatrix,
    v: &DenseMatrix,
    diagonal: bool,
    g: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let gv = g.matmul(v);
    let gtu = g.matmul_tn(u);
    if diagonal {
        let r = u.cols();
        let gu = DenseMatrix::from_fn(u.rows(), r, |i, s| gv[(i, s)] * sigma[(s, 0)]);
        let gsig = DenseMatrix::from_fn(r, 1, |s, _| {
            (0..u.rows()).map(|i| u[(i, s)] * gv[(i, s)]).sum()
        });
        let gvm = DenseMatrix::from_fn(v.rows(), r, |j, s| gtu[(j, s)] * sigma[(s, 0)]);
        (gu, gsig, gvm)
    } else {
        (gv.matmul_nt(sigma), u.matmul_tn(&gv), gtu.matmul(sigma))
    }
}

/// Kronecker factor gradients scaled by `weight`: block sums of G against
/// the opposite factor.
fn kron_grads(
    a: &DenseMatrix,
    b: &DenseMatrix,
    g: &DenseMatrix,
    weight: f64,
) -> (DenseMatrix, DenseMatrix) {
    let (d3, d4) = b.dims();
    let ga = DenseMatrix::from_fn(a.rows(), a.cols(), |p, q| {
        let mut acc = 0.0;
        for i in 0..d3 {
            for j in 0..d4 {
                acc += g[(p * d3 + i, q * d4 + j)] * b[(i, j)];
            }
        }
        weight * acc
    });
    let gb = DenseMatrix::from_fn(d3, d4, |i, j| {
        let mut acc = 0.0;
        for p in 0..a.rows() {
            for q in 0..a.cols() {
                acc += g[(p * d3 + i, q * d4 + j)] * a[(p, q)];
            }
        }
        weight * acc
    });
    (ga, gb)
}

/// ||U^T U - I||_F^2, the soft feasibility penalty for near-orthonormal
/// factors.
pub fn orthogonality_penalty(u: &DenseMatrix) -> f64 {
    let mut gram = u.gram();
    for s in 0..gram.rows() {
        gram[(s, s)] -= 1.0;
    }
    gram.frob_norm_sq()
}

/// Khatri-Rao route for the FedPara product: (X1 * X2)(Y1 * Y2)^T built
/// from m x r^2 and n x r^2 intermediates, never a second m x n buffer.
pub fn materialize_fedpara_krp(spec: &AdapterSpec) -> Result<DenseMatrix> {
    let AdapterSpec::FedPara { x1, y1, x2, y2 } = spec else {
        return Err(Error::Shape("Khatri-Rao route applies to FedPara only".into()));
    };
    spec.validate()?;
    Ok(x1.khatri_rao_rows(x2).matmul_nt(&y1.khatri_rao_rows(y2)))
}

/// Builds a FedPara spec that reproduces a target of rank at most r: the
/// first branch carries a truncated-SVD split of the target, the second is
/// the rank-one all-ones product so the Hadamard is the identity map.
pub fn construct_fedpara_rank_r(t: &DenseMatrix, r: usize) -> Result<AdapterSpec> {
    let observed = numerical_rank(t, 1e-10)?;
    if observed > r {
        return Err(Error::Rank(format!(
            "target has numerical rank {observed}, above the requested {r}"
        )));
    }
    let (m, n) = t.dims();
    let (u, sigma, v) = svd_truncated(t, r.min(m).min(n))?;
    let k = sigma.len();
    let x1 = DenseMatrix::from_fn(m, r, |i, s| {
        if s < k {
            u[(i, s)] * sigma[s].sqrt()
        } else {
            0.0
        }
    });
    let y1 = DenseMatrix::from_fn(n, r, |j, s| {
        if s < k {
            v[(j, s)] * sigma[s].sqrt()
        } else {
            0.0
        }
    });
    let x2 = DenseMatrix::from_fn(m, r, |_, s| if s == 0 { 1.0 } else { 0.0 });
    let y2 = DenseMatrix::from_fn(n, r, |_, s| if s == 0 { 1.0 } else { 0.0 });
    Ok(AdapterSpec::FedPara { x1, y1, x2, y2 })
}

/// One randomly filled instance of every variant at small dimensions.
/// Dimensions differ per variant (Kronecker forms need composite sizes);
/// callers read `output_dims` per spec. Shared by the self-check command
/// and the gradient suites so no variant is ever skipped by accident.
pub fn sample_specs(rng: &mut crate::rng::RandomSource) -> Vec<(&'static str, AdapterSpec)> {
    let (m, n, r, layers, k) = (5usize, 4usize, 2usize, 3usize, 2usize);
    let gm = |rng: &mut crate::rng::RandomSource, rows, cols| rng.gaussian_matrix(rows, cols, 1.0);
    let mask = rng.sparse_mask(m, n, 6);
    let values: Vec<f64> = (0..6).map(|_| rng.next_gaussian()).collect();
    vec![
        ("bm", AdapterSpec::Bm { x: gm(rng, m, r), y: gm(rng, n, r) }),
        (
            "svd_diag",
            AdapterSpec::SvdType {
                u: gm(rng, m, r),
                sigma: gm(rng, r, 1),
                v: gm(rng, n, r),
                sigma_diagonal: true,
                ortho_mode: OrthoMode::Penalized,
            },
        ),
        (
            "svd_full",
            AdapterSpec::SvdType {
                u: gm(rng, m, r),
                sigma: gm(rng, r, r),
                v: gm(rng, n, r),
                sigma_diagonal: false,
                ortho_mode: OrthoMode::Penalized,
            },
        ),
        (
            "fedpara",
            AdapterSpec::FedPara {
                x1: gm(rng, m, r),
                y1: gm(rng, n, r),
                x2: gm(rng, m, r),
                y2: gm(rng, n, r),
            },
        ),
        ("hira", AdapterSpec::Hira { w0: gm(rng, m, n), x: gm(rng, m, r), y: gm(rng, n, r) }),
        ("kron", AdapterSpec::Kron { a: gm(rng, 2, 2), b: gm(rng, 3, 2) }),
        (
            "kron_ensemble",
            AdapterSpec::KronEnsemble {
                alpha: (0..k).map(|_| rng.next_gaussian()).collect(),
                a: (0..k).map(|_| gm(rng, 2, 2)).collect(),
                b: (0..k).map(|_| gm(rng, 3, 2)).collect(),
            },
        ),
        (
            "low_rank_sparse",
            AdapterSpec::LowRankSparse {
                x: gm(rng, m, r),
                y: gm(rng, n, r),
                mask: mask.clone(),
                values: values.clone(),
            },
        ),
        ("sparse_hadamard", AdapterSpec::SparseHadamard { w0: gm(rng, m, n), mask, values }),
        (
            "vera",
            AdapterSpec::Vera {
                a: (0..m).map(|_| rng.next_gaussian()).collect(),
                b: (0..r).map(|_| rng.next_gaussian()).collect(),
                a_shared: gm(rng, m, r),
                b_shared: gm(rng, n, r),
            },
        ),
        (
            "nola",
            AdapterSpec::Nola {
                alpha: (0..k).map(|_| rng.next_gaussian()).collect(),
                beta: (0..k).map(|_| rng.next_gaussian()).collect(),
                dict_a: (0..k).map(|_| gm(rng, m, r)).collect(),
                dict_b: (0..k).map(|_| gm(rng, n, r)).collect(),
            },
        ),
        (
            "dora",
            AdapterSpec::Dora {
                w0: gm(rng, m, n),
                magnitude: (0..n).map(|_| 1.0 + rng.next_uniform()).collect(),
                x: gm(rng, m, r).scale(0.1),
                y: gm(rng, n, r).scale(0.1),
            },
        ),
        (
            "cp3",
            AdapterSpec::Cp3 { s1: gm(rng, m, r), s2: gm(rng, n, r), s3: gm(rng, layers, r) },
        ),
        (
            "tucker2",
            AdapterSpec::Tucker2 {
                cores: (0..layers).map(|_| gm(rng, r, r)).collect(),
                u1: gm(rng, m, r),
                u2: gm(rng, n, r),
            },
        ),
        (
            "tucker3",
            AdapterSpec::Tucker3 {
                core: Tensor3::from_fn(2, 2, 2, |_, _, _| rng.next_gaussian()),
                u1: gm(rng, m, 2),
                u2: gm(rng, n, 2),
                u3: gm(rng, layers, 2),
            },
        ),
        (
            "tt3",
            AdapterSpec::Tt3 {
                g1: gm(rng, m, 2),
                g2: Tensor3::from_fn(2, n, 3, |_, _, _| rng.next_gaussian()),
                g3: gm(rng, 3, layers),
            },
        ),
    ]
}

/// Drops singular components with |sigma_s| < threshold from a
/// diagonal-Sigma spec.
pub fn prune_by_sigma(spec: &AdapterSpec, threshold: f64) -> Result<AdapterSpec> {
    let AdapterSpec::SvdType { u, sigma, v, sigma_diagonal, ortho_mode } = spec else {
        return Err(Error::Shape("pruning applies to the SVD-type variant".into()));
    };
    if !sigma_diagonal {
        return Err(Error::Shape("pruning needs a diagonal Sigma".into()));
    }
    spec.validate()?;
    let keep: Vec<usize> =
        (0..u.cols()).filter(|&s| sigma[(s, 0)].abs() >= threshold).collect();
    if keep.is_empty() {
        return Err(Error::EmptyAdapter(format!(
            "every component falls below threshold {threshold}"
        )));
    }
    let pick = |src: &DenseMatrix| {
        DenseMatrix::from_fn(src.rows(), keep.len(), |i, s| src[(i, keep[s])])
    };
    Ok(AdapterSpec::SvdType {
        u: pick(u),
        sigma: DenseMatrix::from_fn(keep.len(), 1, |s, _| sigma[(keep[s], 0)]),
        v: pick(v),
        sigma_diagonal: true,
        ortho_mode: *ortho_mode,
    })
}
