//! Kernel sum rule, Nadaraya-Watson conditioning and kernel Bayes rule,
//! in operator (primal) and Gram-matrix (dual) form.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::features::QuantumMeanMap;
use crate::quantum::{square_side, vec_identity};

/// Normalisers at or below this are treated as zero-probability events.
pub const DENOMINATOR_TOL: f64 = 1e-12;

/// Weights over the columns of some training embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefWeights {
    alpha: DVector<f64>,
}

impl BeliefWeights {
    pub fn new(alpha: DVector<f64>) -> Result<Self> {
        if let Some(bad) = alpha.iter().find(|a| !a.is_finite()) {
            return Err(Error::InvalidInput(format!("belief weight {bad} is not finite")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            alpha: DVector::from_element(n, 1.0 / n.max(1) as f64),
        }
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn into_alpha(self) -> DVector<f64> {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.alpha.sum()
    }

    /// `Υα` for a basis whose columns are vectorized densities.
    pub fn embed(&self, basis: &DMatrix<f64>) -> Result<QuantumMeanMap> {
        check_dim("belief basis columns", basis.ncols(), self.len())?;
        QuantumMeanMap::from_vec(basis * &self.alpha)
    }
}

/// A linear map between embedding spaces, `C_{Y|X}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalOperator {
    matrix: DMatrix<f64>,
    lambda: f64,
}

impl ConditionalOperator {
    pub fn new(matrix: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidInput(format!("ridge must be >= 0, got {lambda}")));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("conditional operator has non-finite entries".into()));
        }
        Ok(Self { matrix, lambda })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("conditional operator input", self.input_dim(), v.len())?;
        Ok(&self.matrix * v)
    }
}

/// Three-mode tensor stored as an `(out·obs) × in` matrix: entry
/// `T[a, b, c]` lives at row `a·obs + b`, column `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTensor {
    matrix: DMatrix<f64>,
    out_dim: usize,
    obs_dim: usize,
}

impl ConditionalTensor {
    pub fn new(matrix: DMatrix<f64>, out_dim: usize, obs_dim: usize) -> Result<Self> {
        check_dim("tensor rows", out_dim * obs_dim, matrix.nrows())?;
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("tensor has non-finite entries".into()));
        }
        Ok(Self {
            matrix,
            out_dim,
            obs_dim,
        })
    }

    pub fn from_operator(op: ConditionalOperator, out_dim: usize, obs_dim: usize) -> Result<Self> {
        Self::new(op.into_matrix(), out_dim, obs_dim)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.matrix[(a * self.obs_dim + b, c)]
    }

    /// `T ×₃ s`, an `out × obs` matrix.
    pub fn contract(&self, state: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("mode-3 contraction", self.in_dim(), state.len())?;
        let flat = &self.matrix * state;
        // flat is indexed a·obs + b, i.e. row-major out × obs.
        Ok(DMatrix::from_row_slice(self.out_dim, self.obs_dim, flat.as_slice()))
    }
}

/// `C_XY^{π} = C_{XY|X} ×₃ μ⃗_X`.
pub fn contract_mode3(tensor: &ConditionalTensor, state: &QuantumMeanMap) -> Result<DMatrix<f64>> {
    tensor.contract(state.as_vector())
}

/// Solves `(K + λI) X = B` for symmetric PSD `K` by Cholesky.
pub fn ridge_solve(k: &DMatrix<f64>, lambda: f64, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("ridge system", k.nrows(), b.nrows())?;
    let n = k.nrows();
    let mut reg = k.clone();
    for i in 0..n {
        reg[(i, i)] += lambda;
    }
    match Cholesky::new(reg) {
        Some(chol) => Ok(chol.solve(b)),
        None => {
            let min = SymmetricEigen::new(k.clone()).eigenvalues.min();
            let scale = k.amax().max(1.0);
            if min < -1e-8 * scale {
                Err(Error::NotPsdGram(format!("smallest eigenvalue {min:e}")))
            } else {
                Err(Error::Singular(format!(
                    "ridge system of size {n} is singular at lambda = {lambda}; use lambda > 0"
                )))
            }
        }
    }
}

fn check_gram(k: &DMatrix<f64>) -> Result<()> {
    if !k.is_square() {
        return Err(Error::NotPsdGram(format!("{}x{} is not square", k.nrows(), k.ncols())));
    }
    let scale = k.amax().max(1.0);
    if (k - k.transpose()).amax() > 1e-9 * scale {
        return Err(Error::NotPsdGram("not symmetric".into()));
    }
    Ok(())
}

/// `C = Φ Υᵀ (Υ Υᵀ + λI)⁻¹`, solved in the input embedding dimension.
pub fn fit_conditional(phi: &DMatrix<f64>, ups: &DMatrix<f64>, lambda: f64) -> Result<ConditionalOperator> {
    check_dim("fit_conditional sample count", ups.ncols(), phi.ncols())?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge must be >= 0, got {lambda}")));
    }
    let cov = ups * ups.transpose();
    let cross = ups * phi.transpose();
    // (ΥΥᵀ + λI) Cᵀ = Υ Φᵀ
    let ct = ridge_solve(&cov, lambda, &cross)?;
    ConditionalOperator::new(ct.transpose(), lambda)
}

/// Same operator via the Gram matrix: `C = Φ (ΥᵀΥ + λI)⁻¹ Υᵀ`, solved in
/// the sample dimension.
pub fn fit_conditional_dual(phi: &DMatrix<f64>, ups: &DMatrix<f64>, lambda: f64) -> Result<ConditionalOperator> {
    check_dim("fit_conditional sample count", ups.ncols(), phi.ncols())?;
    let gram = ups.tr_mul(ups);
    let weights = ridge_solve(&gram, lambda, &ups.transpose())?;
    ConditionalOperator::new(phi * weights, lambda)
}

/// `α_Y = (K_xx + λI)⁻¹ K_cross α_X`.
pub fn kernel_sum_rule(
    alpha_x: &BeliefWeights,
    k_xx: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    lambda: f64,
) -> Result<BeliefWeights> {
    check_gram(k_xx)?;
    check_dim("sum rule cross gram rows", k_xx.nrows(), k_cross.nrows())?;
    check_dim("sum rule weights", k_cross.ncols(), alpha_x.len())?;
    let rhs = k_cross * alpha_x.alpha();
    let rhs = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
    let out = ridge_solve(k_xx, lambda, &rhs)?;
    BeliefWeights::new(out.column(0).into_owned())
}

/// `α_i ← α_i k_i / Σ_j α_j k_j`.
pub fn nw_condition(alpha_x: &BeliefWeights, kernel_col: &DVector<f64>) -> Result<BeliefWeights> {
    check_dim("nw kernel column", alpha_x.len(), kernel_col.len())?;
    if let Some(bad) = kernel_col.iter().find(|k| !(**k >= 0.0)) {
        return Err(Error::InvalidInput(format!("kernel value {bad} is negative or NaN")));
    }
    let weighted = alpha_x.alpha().component_mul(kernel_col);
    let denom = weighted.sum();
    if !(denom > DENOMINATOR_TOL) {
        return Err(Error::ZeroProbability(denom));
    }
    BeliefWeights::new(weighted.unscale(denom))
}

/// `μ⃗_{X|y} = C ρ⃗_y / (I⃗ᵀ C ρ⃗_y)` for a contracted joint operator `C`
/// (`n² × s²`).
pub fn nw_condition_primal(c_xy_pi: &DMatrix<f64>, rho_y: &DVector<f64>) -> Result<QuantumMeanMap> {
    check_dim("nw primal observation", c_xy_pi.ncols(), rho_y.len())?;
    let n = square_side(c_xy_pi.nrows())?;
    let unnorm = c_xy_pi * rho_y;
    let denom = vec_identity(n).dot(&unnorm);
    if !(denom > DENOMINATOR_TOL) {
        return Err(Error::ZeroProbability(denom));
    }
    QuantumMeanMap::from_vec(unnorm.unscale(denom))
}

/// Coefficients `w` of the kernel Bayes rule posterior `Υw`, with
/// `w = D K_yy ((D K_yy)² + λI)⁻¹ D k_y` and
/// `D = diag((K_xx + λI)⁻¹ K_xx α_X)`.
pub fn kernel_bayes_weights(
    k_xx: &DMatrix<f64>,
    k_yy: &DMatrix<f64>,
    k_col: &DVector<f64>,
    alpha_x: &BeliefWeights,
    lambda: f64,
) -> Result<DVector<f64>> {
    check_gram(k_xx)?;
    check_gram(k_yy)?;
    let n = k_xx.nrows();
    check_dim("kbr K_yy", n, k_yy.nrows())?;
    check_dim("kbr kernel column", n, k_col.len())?;
    check_dim("kbr weights", n, alpha_x.len())?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("kernel Bayes rule needs lambda > 0, got {lambda}")));
    }
    let prior = kernel_sum_rule(alpha_x, k_xx, k_xx, lambda)?.into_alpha();
    // D K_yy: scale row i by prior_i.
    let mut dk = k_yy.clone();
    for (i, mut row) in dk.row_iter_mut().enumerate() {
        row *= prior[i];
    }
    let mut system = &dk * &dk;
    for i in 0..n {
        system[(i, i)] += lambda;
    }
    let rhs = prior.component_mul(k_col);
    // The squared system is not symmetric, so LU rather than Cholesky.
    let solved = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("kernel Bayes rule system".into()))?;
    let w = dk * solved;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular("kernel Bayes rule produced non-finite weights".into()));
    }
    Ok(w)
}

/// Kernel Bayes rule posterior embedding `Υw`.
pub fn kernel_bayes_rule(
    ups: &DMatrix<f64>,
    k_xx: &DMatrix<f64>,
    k_yy: &DMatrix<f64>,
    k_col: &DVector<f64>,
    alpha_x: &BeliefWeights,
    lambda: f64,
) -> Result<QuantumMeanMap> {
    check_dim("kbr basis columns", k_xx.nrows(), ups.ncols())?;
    let w = kernel_bayes_weights(k_xx, k_yy, k_col, alpha_x, lambda)?;
    QuantumMeanMap::from_vec(ups * w)
}
