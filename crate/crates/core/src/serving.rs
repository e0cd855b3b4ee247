//! Batched multi-adapter serving for Hadamard-masked updates.
//!
//! K users share one frozen weight W but each brings a private factor pair
//! (X^k, Y^k). The masked update W o (X^k Y^kT) never needs materializing:
//! writing X Y^T as a sum of rank-one slices turns the whole batch into r
//! GEMMs over K x m stacks, so the kernel touches only K-row temporaries.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::RandomSource;

/// One serving batch: per-user input rows and per-user adapter factors.
#[derive(Debug, Clone)]
pub struct BatchRequest {
    z: DenseMatrix,
    factors: Vec<(DenseMatrix, DenseMatrix)>,
}

impl BatchRequest {
    /// Validates that every factor pair shares the batch geometry:
    /// Z is K x m, each X^k is m x r, each Y^k is n x r, K >= 1.
    ///
    /// The output width n is read from the first Y factor; `forward` calls
    /// later check it against the served weight.
    pub fn new(z: DenseMatrix, factors: Vec<(DenseMatrix, DenseMatrix)>) -> Result<Self> {
        let k = z.rows();
        if k == 0 {
            return Err(Error::Shape("a batch needs at least one user row".into()));
        }
        if factors.len() != k {
            return Err(Error::Shape(format!(
                "{} input rows but {} factor pairs",
                k,
                factors.len()
            )));
        }
        let m = z.cols();
        let (_, n, r) = {
            let (x0, y0) = &factors[0];
            (x0.rows(), y0.rows(), x0.cols())
        };
        if r == 0 {
            return Err(Error::Shape("adapter rank must be at least 1".into()));
        }
        for (k_idx, (x, y)) in factors.iter().enumerate() {
            if x.rows() != m || x.cols() != r || y.rows() != n || y.cols() != r {
                return Err(Error::Shape(format!(
                    "factor pair {} is {}x{} / {}x{}, expected {}x{} / {}x{}",
                    k_idx,
                    x.rows(),
                    x.cols(),
                    y.rows(),
                    y.cols(),
                    m,
                    r,
                    n,
                    r
                )));
            }
        }
        Ok(Self { z, factors })
    }

    pub fn users(&self) -> usize {
        self.z.rows()
    }

    /// Shared geometry (m, n, r) of every factor pair in the batch.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, y0) = &self.factors[0];
        (self.z.cols(), y0.rows(), y0.cols())
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.z
    }

    pub fn factors(&self) -> &[(DenseMatrix, DenseMatrix)] {
        &self.factors
    }
}

/// Tally of model-counted arithmetic for one forward call.
///
/// Charges follow the serving cost model rather than a raw scalar count:
/// the batched path pays 2mn per user per rank slice (multiply and add
/// through the full weight) plus mn per user for the base product, while
/// the per-user paths pay fused multiply-adds (mnr to materialize the
/// masked update, mn per row-by-weight product). Elementwise masks are
/// lower order (m + n per row) and uncharged on every path. The asymmetry
/// is deliberately conservative toward the batched path: measured gains
/// can only beat the prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    flops: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn charge(&mut self, amount: u64) {
        self.flops += amount;
    }
}

/// Model cost of the batched stacking path: K·r·2mn + K·mn.
pub fn fast_flops_model(k: usize, m: usize, n: usize, r: usize) -> u64 {
    let (k, m, n, r) = (k as u64, m as u64, n as u64, r as u64);
    k * r * 2 * m * n + k * m * n
}

/// Model cost of the per-user masked loop: K·(mnr + 2mn).
pub fn naive_flops_model(k: usize, m: usize, n: usize, r: usize) -> u64 {
    let (k, m, n, r) = (k as u64, m as u64, n as u64, r as u64);
    k * (m * n * r + 2 * m * n)
}

/// Model cost of a plain additive-adapter loop: K·(mn + mr + nr).
pub fn standard_flops_model(k: usize, m: usize, n: usize, r: usize) -> u64 {
    let (k, m, n, r) = (k as u64, m as u64, n as u64, r as u64);
    k * (m * n + m * r + n * r)
}

fn check_weight(w: &DenseMatrix, batch: &BatchRequest) -> Result<()> {
    let (m, n, _) = batch.dims();
    if w.rows() != m || w.cols() != n {
        return Err(Error::Shape(format!(
            "weight is {}x{} but the batch expects {}x{}",
            w.rows(),
            w.cols(),
            m,
            n
        )));
    }
    Ok(())
}

/// Batched forward pass: row k of the result is z^k W + z^k (W o X^k Y^kT).
///
/// The adapter term accumulates rank slices j = 1..r as ((Z o X~^j) W) o Y~^j
/// where X~^j stacks the j-th columns of every user's X. Summation order is
/// fixed (j outer, rows inner, row-major within each GEMM) so repeated calls
/// are bit-identical. No per-user m x n intermediate is formed.
pub fn fastlora_forward(w: &DenseMatrix, batch: &BatchRequest) -> Result<DenseMatrix> {
    let mut counter = OpCounter::new();
    fastlora_forward_counted(w, batch, &mut counter)
}

/// `fastlora_forward` with an operation tally; charges match
/// `fast_flops_model` exactly.
pub fn fastlora_forward_counted(
    w: &DenseMatrix,
    batch: &BatchRequest,
    counter: &mut OpCounter,
) -> Result<DenseMatrix> {
    check_weight(w, batch)?;
    let (m, n, r) = batch.dims();
    let k = batch.users();
    let z = batch.inputs();

    let mut out = z.matmul(w);
    counter.charge((k * m * n) as u64);

    let mut masked = DenseMatrix::zeros(k, m);
    for j in 0..r {
        for (row, (x, _)) in batch.factors().iter().enumerate() {
            for col in 0..m {
                masked[(row, col)] = z[(row, col)] * x[(col, j)];
            }
        }
        let slice = masked.matmul(w);
        counter.charge((2 * k * m * n) as u64);
        for (row, (_, y)) in batch.factors().iter().enumerate() {
            for col in 0..n {
                out[(row, col)] += slice[(row, col)] * y[(col, j)];
            }
        }
    }
    Ok(out)
}

/// Reference semantics: materialize W o (X^k Y^kT) per user and apply it
/// row by row. Quadratic in memory per user; exists to cross-check the
/// batched path.
pub fn naive_forward(w: &DenseMatrix, batch: &BatchRequest) -> Result<DenseMatrix> {
    let mut counter = OpCounter::new();
    naive_forward_counted(w, batch, &mut counter)
}

/// `naive_forward` with an operation tally; charges match
/// `naive_flops_model` exactly.
pub fn naive_forward_counted(
    w: &DenseMatrix,
    batch: &BatchRequest,
    counter: &mut OpCounter,
) -> Result<DenseMatrix> {
    check_weight(w, batch)?;
    let (m, n, r) = batch.dims();
    let z = batch.inputs();
    let mut out = DenseMatrix::zeros(batch.users(), n);
    for (row, (x, y)) in batch.factors().iter().enumerate() {
        let update = x.matmul_nt(y);
        counter.charge((m * n * r) as u64);
        let masked = w.hadamard(&update);
        for col in 0..n {
            let mut acc = 0.0;
            for l in 0..m {
                acc += z[(row, l)] * w[(l, col)];
            }
            for l in 0..m {
                acc += z[(row, l)] * masked[(l, col)];
            }
            out[(row, col)] = acc;
        }
        counter.charge((2 * m * n) as u64);
    }
    Ok(out)
}

/// Per-user additive-adapter loop z^k (W + X^k Y^kT), evaluated as
/// z^k W + ((z^k X^k) Y^kT) so the adapter cost stays O(mr + nr) per user.
/// Serves as the throughput baseline; it computes a different function
/// than the masked paths except where W o (X Y^T) = X Y^T.
pub fn standard_forward(w: &DenseMatrix, batch: &BatchRequest) -> Result<DenseMatrix> {
    let mut counter = OpCounter::new();
    standard_forward_counted(w, batch, &mut counter)
}

/// `standard_forward` with an operation tally; charges match
/// `standard_flops_model` exactly.
pub fn standard_forward_counted(
    w: &DenseMatrix,
    batch: &BatchRequest,
    counter: &mut OpCounter,
) -> Result<DenseMatrix> {
    check_weight(w, batch)?;
    let (m, n, r) = batch.dims();
    let z = batch.inputs();
    let mut out = DenseMatrix::zeros(batch.users(), n);
    for (row, (x, y)) in batch.factors().iter().enumerate() {
        let mut zx = vec![0.0; r];
        for (j, slot) in zx.iter_mut().enumerate() {
            for l in 0..m {
                *slot += z[(row, l)] * x[(l, j)];
            }
        }
        for col in 0..n {
            let mut acc = 0.0;
            for l in 0..m {
                acc += z[(row, l)] * w[(l, col)];
            }
            for (j, zxj) in zx.iter().enumerate() {
                acc += zxj * y[(col, j)];
            }
            out[(row, col)] = acc;
        }
        counter.charge((m * n + m * r + n * r) as u64);
    }
    Ok(out)
}

/// One benchmark measurement: a path at a batch size, with the model's
/// predicted arithmetic alongside the measured median.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub path: &'static str,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub median_ns: u128,
    pub flops_model: u64,
}

/// Measured medians for every (path, batch size) combination.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// CSV with the fixed column order path, K, m, n, r, median_ns,
    /// flops_model.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,K,m,n,r,median_ns,flops_model\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.path, row.k, row.m, row.n, row.r, row.median_ns, row.flops_model
            ));
        }
        out
    }

    /// Measured speedup of the batched path over the per-user masked loop
    /// at batch size k, if both were benchmarked.
    pub fn speedup_at(&self, k: usize) -> Option<f64> {
        let find = |path: &str| {
            self.rows
                .iter()
                .find(|r| r.path == path && r.k == k)
                .map(|r| r.median_ns)
        };
        let fast = find("fastlora")?;
        let naive = find("naive")?;
        if fast == 0 {
            return None;
        }
        Some(naive as f64 / fast as f64)
    }
}

fn median_ns(samples: &mut [u128]) -> u128 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Times all three paths on random batches at each requested batch size.
///
/// Each path runs `reps` times on the same batch; the row records the
/// median wall time. Timings are machine-dependent; the flops_model column
/// carries the machine-free prediction.
pub fn bench_serving(
    w: &DenseMatrix,
    batch_sizes: &[usize],
    r: usize,
    reps: usize,
    rng: &mut RandomSource,
) -> Result<BenchReport> {
    if reps < 3 {
        return Err(Error::Config(format!(
            "need at least 3 repetitions for a stable median, got {reps}"
        )));
    }
    if batch_sizes.is_empty() {
        return Err(Error::Config("no batch sizes requested".into()));
    }
    let (m, n) = (w.rows(), w.cols());
    let mut rows = Vec::new();
    for &k in batch_sizes {
        if k == 0 {
            return Err(Error::Config("batch size 0 requested".into()));
        }
        let z = rng.gaussian_matrix(k, m, 1.0);
        let factors = (0..k)
            .map(|_| {
                (
                    rng.gaussian_matrix(m, r, 1.0),
                    rng.gaussian_matrix(n, r, 1.0),
                )
            })
            .collect();
        let batch = BatchRequest::new(z, factors)?;

        type Path = (
            &'static str,
            fn(&DenseMatrix, &BatchRequest) -> Result<DenseMatrix>,
            fn(usize, usize, usize, usize) -> u64,
        );
        let paths: [Path; 3] = [
            ("fastlora", fastlora_forward, fast_flops_model),
            ("naive", naive_forward, naive_flops_model),
            ("standard", standard_forward, standard_flops_model),
        ];
        for (path, forward, model) in paths {
            let mut samples = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                let out = forward(w, &batch)?;
                samples.push(start.elapsed().as_nanos());
                // Fold the output into a checksum so the timed call cannot
                // be optimized away.
                std::hint::black_box(out.frob_norm_sq());
            }
            rows.push(BenchRow {
                path,
                k,
                m,
                n,
                r,
                median_ns: median_ns(&mut samples),
                flops_model: model(k, m, n, r),
            });
        }
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> RandomSource {
        RandomSource::named(31, "serving-tests")
    }

    fn random_batch(
        rng: &mut RandomSource,
        k: usize,
        m: usize,
        n: usize,
        r: usize,
    ) -> BatchRequest {
        let z = rng.gaussian_matrix(k, m, 1.0);
        let factors = (0..k)
            .map(|_| (rng.gaussian_matrix(m, r, 0.5), rng.gaussian_matrix(n, r, 0.5)))
            .collect();
        BatchRequest::new(z, factors).unwrap()
    }

    fn assert_close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) {
        assert_eq!(a.dims(), b.dims());
        let scale = 1.0 + b.max_abs();
        let gap = a.sub(b).max_abs();
        assert!(gap <= tol * scale, "entrywise gap {gap} beyond {tol}");
    }

    #[test]
    fn single_user_matches_direct_evaluation() {
        let mut rng = rng();
        let w = rng.gaussian_matrix(5, 4, 1.0);
        let batch = random_batch(&mut rng, 1, 5, 4, 2);
        let (x, y) = &batch.factors()[0];
        let masked = w.hadamard(&x.matmul_nt(y));
        let direct = batch.inputs().matmul(&w.add(&masked));
        let fast = fastlora_forward(&w, &batch).unwrap();
        let naive = naive_forward(&w, &batch).unwrap();
        assert_close(&fast, &direct, 1e-12);
        assert_close(&naive, &direct, 1e-12);
    }

    #[test]
    fn all_ones_update_doubles_the_base_term() {
        let mut rng = rng();
        let w = rng.gaussian_matrix(6, 5, 1.0);
        let z = rng.gaussian_matrix(3, 6, 1.0);
        // First columns all ones, later columns zero: X Y^T is the all-ones
        // matrix, so the mask passes W through unchanged.
        let factors = (0..3)
            .map(|_| {
                (
                    DenseMatrix::from_fn(6, 2, |_, j| if j == 0 { 1.0 } else { 0.0 }),
                    DenseMatrix::from_fn(5, 2, |_, j| if j == 0 { 1.0 } else { 0.0 }),
                )
            })
            .collect();
        let batch = BatchRequest::new(z.clone(), factors).unwrap();
        let base = z.matmul(&w);
        let fast = fastlora_forward(&w, &batch).unwrap();
        assert_close(&fast, &base.scale(2.0), 1e-12);
    }

    #[test]
    fn zero_factors_leave_only_the_base_term() {
        let mut rng = rng();
        let w = rng.gaussian_matrix(4, 7, 1.0);
        let z = rng.gaussian_matrix(2, 4, 1.0);
        let factors = (0..2)
            .map(|_| (DenseMatrix::zeros(4, 3), DenseMatrix::zeros(7, 3)))
            .collect();
        let batch = BatchRequest::new(z.clone(), factors).unwrap();
        let base = z.matmul(&w);
        // Zero slices contribute exact zeros, so equality is bitwise.
        assert_eq!(fastlora_forward(&w, &batch).unwrap().data(), base.data());
        assert_eq!(naive_forward(&w, &batch).unwrap().data(), base.data());
    }

    #[test]
    fn identical_users_get_identical_rows() {
        let mut rng = rng();
        let w = rng.gaussian_matrix(5, 6, 1.0);
        let x = rng.gaussian_matrix(5, 2, 0.7);
        let y = rng.gaussian_matrix(6, 2, 0.7);
        let row = rng.gaussian_vec(5, 1.0);
        let z = DenseMatrix::from_rows(&[row.clone(), row]).unwrap();
        let batch =
            BatchRequest::new(z, vec![(x.clone(), y.clone()), (x, y)]).unwrap();
        for out in [naive_forward(&w, &batch).unwrap(), fastlora_forward(&w, &batch).unwrap()] {
            assert_eq!(out.row(0), out.row(1));
        }
    }

    #[test]
    fn fast_matches_naive_on_random_instances() {
        let mut rng = rng();
        for _ in 0..100 {
            let w = rng.gaussian_matrix(8, 6, 1.0);
            let batch = random_batch(&mut rng, 3, 8, 6, 2);
            let fast = fastlora_forward(&w, &batch).unwrap();
            let naive = naive_forward(&w, &batch).unwrap();
            assert_close(&fast, &naive, 1e-10);
        }
    }

    #[test]
    fn equivalence_holds_across_batch_sizes() {
        let mut rng = rng();
        for k in [1usize, 2, 8, 64] {
            let w = rng.gaussian_matrix(10, 7, 1.0);
            let batch = random_batch(&mut rng, k, 10, 7, 3);
            let fast = fastlora_forward(&w, &batch).unwrap();
            let naive = naive_forward(&w, &batch).unwrap();
            assert_close(&fast, &naive, 1e-10);
        }
    }

    #[test]
    fn all_three_paths_agree_when_the_weight_is_all_ones() {
        // With W = all-ones the masked update equals the additive one, so
        // the baseline path computes the same function as the other two.
        let mut rng = rng();
        let w = DenseMatrix::from_fn(6, 5, |_, _| 1.0);
        let batch = random_batch(&mut rng, 4, 6, 5, 2);
        let fast = fastlora_forward(&w, &batch).unwrap();
        let naive = naive_forward(&w, &batch).unwrap();
        let standard = standard_forward(&w, &batch).unwrap();
        assert_close(&fast, &naive, 1e-10);
        assert_close(&standard, &naive, 1e-10);
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let mut rng = rng();
        let w = rng.gaussian_matrix(9, 8, 1.0);
        let batch = random_batch(&mut rng, 5, 9, 8, 3);
        for forward in [fastlora_forward, naive_forward, standard_forward] {
            let a = forward(&w, &batch).unwrap();
            let b = forward(&w, &batch).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn counters_match_the_cost_model_exactly() {
        let mut rng = rng();
        for (k, m, n, r) in [(1, 4, 3, 1), (3, 8, 6, 2), (7, 5, 9, 4)] {
            let w = rng.gaussian_matrix(m, n, 1.0);
            let batch = random_batch(&mut rng, k, m, n, r);
            let mut fast = OpCounter::new();
            let mut naive = OpCounter::new();
            let mut standard = OpCounter::new();
            fastlora_forward_counted(&w, &batch, &mut fast).unwrap();
            naive_forward_counted(&w, &batch, &mut naive).unwrap();
            standard_forward_counted(&w, &batch, &mut standard).unwrap();
            assert_eq!(fast.flops(), fast_flops_model(k, m, n, r));
            assert_eq!(naive.flops(), naive_flops_model(k, m, n, r));
            assert_eq!(standard.flops(), standard_flops_model(k, m, n, r));
        }
    }

    #[test]
    fn rank_one_costs_coincide_and_higher_ranks_favor_naive_per_flop() {
        // At r = 1 both masked paths do the same model work; the batched
        // path then grows at 2mn per rank against mn for the loop, so the
        // model never predicts a per-flop win. The win is architectural.
        assert_eq!(fast_flops_model(4, 10, 8, 1), naive_flops_model(4, 10, 8, 1));
        for r in [2usize, 5, 16] {
            assert!(fast_flops_model(4, 10, 8, r) > naive_flops_model(4, 10, 8, r));
        }
    }

    #[test]
    fn shape_errors_cover_every_mismatch() {
        let mut rng = rng();
        let z = rng.gaussian_matrix(2, 5, 1.0);
        let good = |rng: &mut RandomSource| {
            (rng.gaussian_matrix(5, 2, 1.0), rng.gaussian_matrix(4, 2, 1.0))
        };
        let pair_a = good(&mut rng);
        let pair_b = good(&mut rng);

        let empty = BatchRequest::new(DenseMatrix::zeros(0, 5), vec![]);
        assert!(matches!(empty, Err(Error::Shape(_))));

        let missing = BatchRequest::new(z.clone(), vec![pair_a.clone()]);
        assert!(matches!(missing, Err(Error::Shape(_))));

        let bad_x = BatchRequest::new(
            z.clone(),
            vec![pair_a.clone(), (rng.gaussian_matrix(6, 2, 1.0), pair_b.1.clone())],
        );
        assert!(matches!(bad_x, Err(Error::Shape(_))));

        let bad_rank = BatchRequest::new(
            z.clone(),
            vec![pair_a.clone(), (rng.gaussian_matrix(5, 3, 1.0), rng.gaussian_matrix(4, 3, 1.0))],
        );
        assert!(matches!(bad_rank, Err(Error::Shape(_))));

        let batch = BatchRequest::new(z, vec![pair_a, pair_b]).unwrap();
        let wrong_w = rng.gaussian_matrix(5, 3, 1.0);
        assert!(matches!(fastlora_forward(&wrong_w, &batch), Err(Error::Shape(_))));
        assert!(matches!(naive_forward(&wrong_w, &batch), Err(Error::Shape(_))));
        assert!(matches!(standard_forward(&wrong_w, &batch), Err(Error::Shape(_))));
    }

    #[test]
    fn bench_produces_a_row_per_path_and_size() {
        let mut rng = rng();
        let w = rng.gaussian_matrix(12, 10, 1.0);
        let report = bench_serving(&w, &[1, 4], 2, 3, &mut rng).unwrap();
        assert_eq!(report.rows.len(), 6);
        for row in &report.rows {
            assert!(row.median_ns > 0);
            assert_eq!(row.m, 12);
            assert_eq!(row.n, 10);
            assert_eq!(row.r, 2);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("path,K,m,n,r,median_ns,flops_model\n"));
        assert_eq!(csv.lines().count(), 7);
        assert!(report.speedup_at(4).is_some());
    }

    #[test]
    fn bench_rejects_unstable_repetition_counts() {
        let mut rng = rng();
        let w = rng.gaussian_matrix(4, 4, 1.0);
        assert!(matches!(
            bench_serving(&w, &[2], 1, 2, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            bench_serving(&w, &[], 1, 3, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            bench_serving(&w, &[0], 1, 3, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
