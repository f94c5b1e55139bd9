//! Entropy-regularized optimal transport via Sinkhorn-Knopp normalization.
//!
//! The solver applies the exponential kernel `C' = exp(-λC)` and then
//! alternates row and column normalization `m` times:
//!
//! ```text
//! S⁰ = C'
//! Sᵐ = Nᶜ(Nʳ(Sᵐ⁻¹))
//! ```
//!
//! Marginals are uniform, so the limit is a doubly stochastic matrix. The
//! reverse pass in [`SinkhornTrace::vjp`] unrolls every recorded step exactly;
//! it is not an implicit fixed-point gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to `-λC` before exponentiation.
pub const EXP_CLAMP: f64 = -700.0;
/// Row or column sums at or below this are degenerate.
pub const MIN_MASS: f64 = 1e-300;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Transport cost between source cell `i` and target cell `j`.
pub type CostMatrix = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("matrix dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", &[rows, cols], &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("matrix entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::filled(n, n, 0.0);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("frobenius product", &self.shape(), &other.shape()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Largest deviation of any row sum and any column sum from 1.
    pub fn marginal_residuals(&self) -> (f64, f64) {
        let dev = |sums: Vec<f64>| sums.iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
        (dev(self.row_sums()), dev(self.col_sums()))
    }
}

/// Elementwise `exp(-λC)` with the exponent clamped at [`EXP_CLAMP`].
pub fn exp_kernel(cost: &CostMatrix, lambda: f64) -> Result<Matrix> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let data = cost
        .data
        .iter()
        .map(|c| (-lambda * c).max(EXP_CLAMP).exp())
        .collect();
    Ok(Matrix { data, ..*cost })
}

/// Gradient of [`exp_kernel`] w.r.t. the cost, given the kernel output.
/// Entries whose exponent was clamped receive zero gradient.
pub fn exp_kernel_vjp(cost: &CostMatrix, kernel: &Matrix, lambda: f64, upstream: &[f64]) -> Vec<f64> {
    cost.data
        .iter()
        .zip(&kernel.data)
        .zip(upstream)
        .map(|((c, k), g)| if -lambda * c < EXP_CLAMP { 0.0 } else { -lambda * k * g })
        .collect()
}

/// Divides each row by its sum. Returns the normalized matrix and the sums.
pub fn row_normalize(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let sums = m.row_sums();
    if let Some(i) = sums.iter().position(|&s| s <= MIN_MASS) {
        return Err(Error::DegenerateRow(i));
    }
    let mut data = m.data.clone();
    for (i, s) in sums.iter().enumerate() {
        for v in &mut data[i * m.cols..(i + 1) * m.cols] {
            *v /= s;
        }
    }
    Ok((Matrix { data, ..*m }, sums))
}

/// Divides each column by its sum. Returns the normalized matrix and the sums.
pub fn col_normalize(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let sums = m.col_sums();
    if let Some(j) = sums.iter().position(|&s| s <= MIN_MASS) {
        return Err(Error::DegenerateColumn(j));
    }
    let mut data = m.data.clone();
    for row in data.chunks_mut(m.cols) {
        for (v, s) in row.iter_mut().zip(&sums) {
            *v /= s;
        }
    }
    Ok((Matrix { data, ..*m }, sums))
}

/// VJP of row normalization: `∂L/∂M_ij = (G_ij - Σ_k G_ik N_ik) / S_i`.
pub fn row_normalize_vjp(output: &Matrix, sums: &[f64], upstream: &[f64]) -> Vec<f64> {
    let cols = output.cols;
    let mut grad = vec![0.0; upstream.len()];
    for (i, s) in sums.iter().enumerate() {
        let span = i * cols..(i + 1) * cols;
        let g = &upstream[span.clone()];
        let n = &output.data[span.clone()];
        let dot: f64 = g.iter().zip(n).map(|(a, b)| a * b).sum();
        for (out, gv) in grad[span].iter_mut().zip(g) {
            *out = (gv - dot) / s;
        }
    }
    grad
}

/// VJP of column normalization: `∂L/∂M_ij = (G_ij - Σ_k G_kj N_kj) / S_j`.
pub fn col_normalize_vjp(output: &Matrix, sums: &[f64], upstream: &[f64]) -> Vec<f64> {
    let cols = output.cols;
    let mut dots = vec![0.0; cols];
    for (g_row, n_row) in upstream.chunks(cols).zip(output.data.chunks(cols)) {
        for ((d, g), n) in dots.iter_mut().zip(g_row).zip(n_row) {
            *d += g * n;
        }
    }
    let mut grad = vec![0.0; upstream.len()];
    for (out_row, g_row) in grad.chunks_mut(cols).zip(upstream.chunks(cols)) {
        for j in 0..cols {
            out_row[j] = (g_row[j] - dots[j]) / sums[j];
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinkhornMode {
    /// Exactly `max_iterations` normalization rounds.
    FixedIterations,
    /// Stop once both marginal residuals are within `tolerance`.
    RunToTolerance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub mode: SinkhornMode,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            max_iterations: 10,
            tolerance: 1e-6,
            mode: SinkhornMode::FixedIterations,
        }
    }
}

impl SinkhornConfig {
    pub fn fixed(lambda: f64, iterations: usize) -> Self {
        Self {
            lambda,
            max_iterations: iterations,
            ..Self::default()
        }
    }

    /// Settings for one-off solves outside of training.
    pub fn standalone(lambda: f64) -> Self {
        Self {
            lambda,
            max_iterations: 500,
            tolerance: 1e-6,
            mode: SinkhornMode::RunToTolerance,
        }
    }

    pub fn to_tolerance(lambda: f64, tolerance: f64, cap: usize) -> Self {
        Self {
            lambda,
            max_iterations: cap,
            tolerance,
            mode: SinkhornMode::RunToTolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be ≥ 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be nonnegative, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Output of a Sinkhorn solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    matrix: Matrix,
    row_residual: f64,
    col_residual: f64,
    iterations_run: usize,
    converged: bool,
}

impl TransportPlan {
    /// Wraps an externally constructed square plan (e.g. an oracle permutation).
    pub fn from_matrix(matrix: Matrix, tolerance: f64) -> Result<Self> {
        if matrix.rows != matrix.cols {
            return Err(Error::shape("transport plan", &[matrix.rows, matrix.rows], &matrix.shape()));
        }
        let (row_residual, col_residual) = matrix.marginal_residuals();
        Ok(Self {
            converged: row_residual.max(col_residual) <= tolerance,
            matrix,
            row_residual,
            col_residual,
            iterations_run: 0,
        })
    }

    pub fn with_iterations(mut self, iterations_run: usize) -> Self {
        self.iterations_run = iterations_run;
        self
    }

    pub fn n(&self) -> usize {
        self.matrix.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn data(&self) -> &[f64] {
        &self.matrix.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn row_residual(&self) -> f64 {
        self.row_residual
    }

    pub fn col_residual(&self) -> f64 {
        self.col_residual
    }

    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }

    pub fn iterations_run(&self) -> usize {
        self.iterations_run
    }

    pub fn converged(&self) -> bool {
        self.converged
    }
}

#[derive(Debug, Clone)]
struct Step {
    after_row: Matrix,
    row_sums: Vec<f64>,
    after_col: Matrix,
    col_sums: Vec<f64>,
}

/// Every intermediate of a forward solve, enough to replay it backwards.
#[derive(Debug, Clone)]
pub struct SinkhornTrace {
    cost: CostMatrix,
    lambda: f64,
    kernel: Matrix,
    steps: Vec<Step>,
}

impl SinkhornTrace {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    /// Output of the recorded computation (the kernel itself when m = 0).
    pub fn output(&self) -> &Matrix {
        self.steps.last().map_or(&self.kernel, |s| &s.after_col)
    }

    /// Exact gradient w.r.t. the cost matrix of the unrolled computation.
    pub fn vjp(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.cost.data.len() {
            return Err(Error::shape("sinkhorn upstream", &self.cost.shape(), &[upstream.len()]));
        }
        let mut grad = upstream.to_vec();
        for step in self.steps.iter().rev() {
            grad = col_normalize_vjp(&step.after_col, &step.col_sums, &grad);
            grad = row_normalize_vjp(&step.after_row, &step.row_sums, &grad);
        }
        Ok(exp_kernel_vjp(&self.cost, &self.kernel, self.lambda, &grad))
    }
}

fn check_square(cost: &CostMatrix) -> Result<()> {
    if cost.rows != cost.cols {
        return Err(Error::shape("sinkhorn cost", &[cost.rows, cost.rows], &cost.shape()));
    }
    Ok(())
}

fn run(cost: &CostMatrix, cfg: &SinkhornConfig, keep: bool) -> Result<(TransportPlan, Option<SinkhornTrace>)> {
    cfg.validate()?;
    check_square(cost)?;
    let kernel = exp_kernel(cost, cfg.lambda)?;
    let mut current = kernel.clone();
    let mut steps = Vec::new();
    let mut residuals = current.marginal_residuals();
    let mut iterations_run = 0;
    while iterations_run < cfg.max_iterations {
        let (after_row, row_sums) = row_normalize(&current)?;
        let (after_col, col_sums) = col_normalize(&after_row)?;
        iterations_run += 1;
        residuals = after_col.marginal_residuals();
        current = after_col;
        if keep {
            steps.push(Step {
                after_row,
                row_sums,
                after_col: current.clone(),
                col_sums,
            });
        }
        if cfg.mode == SinkhornMode::RunToTolerance && residuals.0.max(residuals.1) <= cfg.tolerance {
            break;
        }
    }
    let plan = TransportPlan {
        converged: residuals.0.max(residuals.1) <= cfg.tolerance,
        matrix: current,
        row_residual: residuals.0,
        col_residual: residuals.1,
        iterations_run,
    };
    let trace = keep.then(|| SinkhornTrace {
        cost: cost.clone(),
        lambda: cfg.lambda,
        kernel,
        steps,
    });
    Ok((plan, trace))
}

/// Solves for the doubly stochastic plan `Sᵐ(exp(-λC))`.
pub fn sinkhorn_solve(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    run(cost, cfg, false).map(|(plan, _)| plan)
}

/// Like [`sinkhorn_solve`] but records the trace needed for [`SinkhornTrace::vjp`].
pub fn sinkhorn_forward(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<(TransportPlan, SinkhornTrace)> {
    run(cost, cfg, true).map(|(plan, trace)| (plan, trace.expect("trace requested")))
}

/// Records an exact `m`-step unroll, including `m = 0` (kernel only).
pub fn sinkhorn_unrolled(cost: &CostMatrix, lambda: f64, iterations: usize) -> Result<SinkhornTrace> {
    check_square(cost)?;
    let kernel = exp_kernel(cost, lambda)?;
    let mut current = kernel.clone();
    let mut steps = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (after_row, row_sums) = row_normalize(&current)?;
        let (after_col, col_sums) = col_normalize(&after_row)?;
        current = after_col.clone();
        steps.push(Step {
            after_row,
            row_sums,
            after_col,
            col_sums,
        });
    }
    Ok(SinkhornTrace {
        cost: cost.clone(),
        lambda,
        kernel,
        steps,
    })
}

/// `⟨P, C⟩_F - λ h(P)` with `h(P) = -Σ P_ij (log P_ij - 1)`.
pub fn ot_objective(plan: &Matrix, cost: &CostMatrix, lambda: f64) -> Result<f64> {
    let transport = plan.frobenius_dot(cost)?;
    if let Some(pos) = plan.data.iter().position(|&p| p <= 0.0) {
        return Err(Error::Domain(format!("plan entry {pos} is not strictly positive")));
    }
    let entropy: f64 = -plan.data.iter().map(|p| p * (p.ln() - 1.0)).sum::<f64>();
    Ok(transport - lambda * entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cost(n: usize, seed: u64) -> CostMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(n, n, (0..n * n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn exp_kernel_examples() {
        let k = exp_kernel(&Matrix::from_rows(&[&[0.0]]).unwrap(), 10.0).unwrap();
        assert_eq!(k.data(), &[1.0]);

        let c = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let k = exp_kernel(&c, 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert_close(k.data(), &[1.0, e, e, 1.0], 1e-15);
        assert!((k.get(0, 1) - 0.367879).abs() < 1e-6);

        let k = exp_kernel(&Matrix::filled(3, 3, 0.4), 2.5).unwrap();
        assert!(k.data().iter().all(|&v| v == (-1.0f64).exp()));
    }

    #[test]
    fn exp_kernel_clamps_instead_of_hitting_zero() {
        let k = exp_kernel(&Matrix::from_rows(&[&[1e6]]).unwrap(), 10.0).unwrap();
        assert!(k.get(0, 0) > 0.0);
        assert_eq!(k.get(0, 0), EXP_CLAMP.exp());
    }

    #[test]
    fn normalization_examples() {
        let m = Matrix::from_rows(&[&[2.0, 2.0], &[1.0, 3.0]]).unwrap();
        let (r, _) = row_normalize(&m).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5, 0.25, 0.75]);
        let (again, _) = row_normalize(&r).unwrap();
        assert_close(again.data(), r.data(), 1e-15);

        let p = Matrix::from_rows(&[&[0.7311, 0.2689], &[0.2689, 0.7311]]).unwrap();
        let (c, _) = col_normalize(&p).unwrap();
        assert_close(c.data(), p.data(), 1e-15);
    }

    #[test]
    fn degenerate_rows_and_columns() {
        let m = Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]).unwrap();
        assert!(matches!(row_normalize(&m), Err(Error::DegenerateRow(0))));
        let m = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        assert!(matches!(col_normalize(&m), Err(Error::DegenerateColumn(1))));
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        for &(value, lambda) in &[(0.0, 1.0), (3.7, 10.0), (-2.0, 0.5)] {
            let plan = sinkhorn_solve(&Matrix::filled(5, 5, value), &SinkhornConfig::fixed(lambda, 3)).unwrap();
            assert_close(plan.data(), &[0.2; 25], 1e-15);
        }
    }

    #[test]
    fn two_by_two_single_iteration_is_logistic() {
        let c = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let plan = sinkhorn_solve(&c, &SinkhornConfig::fixed(1.0, 1)).unwrap();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert_close(plan.data(), &[s, 1.0 - s, 1.0 - s, s], 1e-15);
        assert!((plan.get(0, 0) - 0.7311).abs() < 1e-4);
        let more = sinkhorn_solve(&c, &SinkhornConfig::fixed(1.0, 5)).unwrap();
        assert_close(more.data(), plan.data(), 1e-15);
    }

    #[test]
    fn run_to_tolerance_records_iterations() {
        let c = random_cost(16, 3);
        let plan = sinkhorn_solve(&c, &SinkhornConfig::standalone(5.0)).unwrap();
        assert!(plan.converged());
        assert!(plan.max_residual() <= 1e-6);
        assert!(plan.iterations_run() < 500);
        let capped = sinkhorn_solve(&c, &SinkhornConfig::to_tolerance(5.0, 0.0, 2)).unwrap();
        assert_eq!(capped.iterations_run(), 2);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let c = random_cost(3, 0);
        assert!(sinkhorn_solve(&c, &SinkhornConfig::fixed(0.0, 3)).is_err());
        assert!(sinkhorn_solve(&c, &SinkhornConfig::fixed(1.0, 0)).is_err());
        let rect = Matrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            sinkhorn_solve(&rect, &SinkhornConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn converges_on_64x64() {
        for seed in 0..3 {
            let plan = sinkhorn_solve(&random_cost(64, seed), &SinkhornConfig::fixed(10.0, 20)).unwrap();
            assert!(plan.max_residual() <= 1e-6, "{}", plan.max_residual());
            assert!(plan.data().iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn shift_invariance() {
        let c = random_cost(8, 11);
        let shifted = Matrix::new(8, 8, c.data().iter().map(|v| v + 0.75).collect()).unwrap();
        let cfg = SinkhornConfig::fixed(10.0, 10);
        let a = sinkhorn_solve(&c, &cfg).unwrap();
        let b = sinkhorn_solve(&shifted, &cfg).unwrap();
        assert_close(a.data(), b.data(), 1e-10);
    }

    #[test]
    fn larger_lambda_lowers_transport_cost() {
        for seed in 0..5 {
            let c = random_cost(8, 100 + seed);
            let costs: Vec<f64> = [1.0, 10.0, 100.0]
                .iter()
                .map(|&l| {
                    let p = sinkhorn_solve(&c, &SinkhornConfig::to_tolerance(l, 1e-9, 20_000)).unwrap();
                    p.matrix().frobenius_dot(&c).unwrap()
                })
                .collect();
            assert!(costs[0] > costs[1] && costs[1] > costs[2], "{costs:?}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let n = 6;
        let c = random_cost(n, 21);
        let rows = [3, 0, 5, 1, 4, 2];
        let cols = [1, 2, 0, 5, 3, 4];
        let permuted = Matrix::new(
            n,
            n,
            (0..n * n).map(|k| c.get(rows[k / n], cols[k % n])).collect(),
        )
        .unwrap();
        let cfg = SinkhornConfig::fixed(4.0, 15);
        let p = sinkhorn_solve(&c, &cfg).unwrap();
        let q = sinkhorn_solve(&permuted, &cfg).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((q.get(i, j) - p.get(rows[i], cols[j])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn objective_examples() {
        let p = Matrix::from_rows(&[&[1.0]]).unwrap();
        let c = Matrix::from_rows(&[&[3.0]]).unwrap();
        assert_eq!(ot_objective(&p, &c, 0.0).unwrap(), 3.0);

        // Σ P(log P - 1) over four entries of 0.5.
        let p = Matrix::filled(2, 2, 0.5);
        let expected = 4.0 * 0.5 * (0.5f64.ln() - 1.0);
        let got = ot_objective(&p, &Matrix::filled(2, 2, 0.0), 1.0).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - (-3.386294361119891)).abs() < 1e-12);

        let c = random_cost(4, 5);
        let p = sinkhorn_solve(&c, &SinkhornConfig::fixed(2.0, 5)).unwrap();
        let plain = p.matrix().frobenius_dot(&c).unwrap();
        assert_eq!(ot_objective(p.matrix(), &c, 0.0).unwrap(), plain);

        let bad = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        assert!(matches!(ot_objective(&bad, &Matrix::filled(2, 2, 0.0), 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_iterations_backward_is_kernel_only() {
        let c = random_cost(3, 9);
        let lambda = 2.0;
        let trace = sinkhorn_unrolled(&c, lambda, 0).unwrap();
        let upstream = vec![1.0; 9];
        let grad = trace.vjp(&upstream).unwrap();
        let k = exp_kernel(&c, lambda).unwrap();
        let expected: Vec<f64> = k.data().iter().map(|v| -lambda * v).collect();
        assert_close(&grad, &expected, 1e-15);
    }

    /// Full Jacobian of one round on a 2×2 input written out by hand from
    /// the row-normalization derivative `[j=t]/S_s - c'_{s,j}/S_s²` and the
    /// analogous column term.
    #[test]
    fn one_round_matches_hand_expanded_jacobian() {
        let c = Matrix::from_rows(&[&[0.3, 0.9], &[0.2, 0.5]]).unwrap();
        let lambda = 1.5;
        let k = exp_kernel(&c, lambda).unwrap();
        let kv = |i: usize, j: usize| k.get(i, j);
        let s = |i: usize| kv(i, 0) + kv(i, 1);
        let r = |i: usize, j: usize| kv(i, j) / s(i);
        // ∂R_{i,j}/∂C'_{s,t}
        let dr = |i: usize, j: usize, s_: usize, t: usize| {
            if i != s_ {
                0.0
            } else {
                (if j == t { 1.0 } else { 0.0 }) / s(i) - kv(i, j) / (s(i) * s(i))
            }
        };
        let t_col = |j: usize| r(0, j) + r(1, j);
        // ∂P_{i,j}/∂R_{p,q}
        let dp = |i: usize, j: usize, p: usize, q: usize| {
            if q != j {
                0.0
            } else {
                (if i == p { 1.0 } else { 0.0 }) / t_col(j) - r(i, j) / (t_col(j) * t_col(j))
            }
        };
        let upstream = [0.7, -1.1, 0.4, 2.0];
        let mut expected = [0.0; 4];
        for s_ in 0..2 {
            for t in 0..2 {
                let mut acc = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        let mut dpdk = 0.0;
                        for p in 0..2 {
                            for q in 0..2 {
                                dpdk += dp(i, j, p, q) * dr(p, q, s_, t);
                            }
                        }
                        acc += upstream[i * 2 + j] * dpdk;
                    }
                }
                expected[s_ * 2 + t] = acc * (-lambda * kv(s_, t));
            }
        }
        let trace = sinkhorn_unrolled(&c, lambda, 1).unwrap();
        let grad = trace.vjp(&upstream).unwrap();
        assert_close(&grad, &expected, 1e-14);
    }

    #[test]
    fn solve_and_unrolled_agree() {
        let c = random_cost(5, 13);
        let (plan, trace) = sinkhorn_forward(&c, &SinkhornConfig::fixed(3.0, 7)).unwrap();
        let unrolled = sinkhorn_unrolled(&c, 3.0, 7).unwrap();
        assert_eq!(plan.matrix(), unrolled.output());
        assert_eq!(trace.iterations(), 7);
    }
}
