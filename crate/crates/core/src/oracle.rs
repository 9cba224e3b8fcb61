//! Brute-force quantum circuits and classical probability rules.
//!
//! Everything here favours transparency over speed; these routines are the
//! ground truth that the Hilbert-space implementations are checked against.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::inference::ConditionalTensor;
use crate::quantum::{
    kron, max_abs_diff, partial_trace, random, realign, CMatrix, DensityMatrix, SubsystemShape, UnitaryMatrix,
    UnnormalizedDensity, EQUIVALENCE_TOL, VALIDATION_TOL,
};

/// Traces below this are zero-probability observations.
pub const ZERO_PROB_TOL: f64 = 1e-12;

fn check_probability(p: &DVector<f64>, what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= -1e-12)) {
        return Err(Error::InvalidInput(format!("{what} has negative or NaN entries")));
    }
    if (p.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{what} sums to {}, not 1", p.sum())));
    }
    Ok(())
}

/// Column-stochastic `m × n` matrix; column `x` is `P(Y | X = x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    entries: DMatrix<f64>,
}

impl StochasticMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidInput("stochastic matrix has negative or NaN entries".into()));
        }
        for (j, col) in entries.column_iter().enumerate() {
            if (col.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("column {j} sums to {}", col.sum())));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    /// Columns drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut m = DMatrix::from_fn(rows, cols, |_, _| -rng.random_range(f64::EPSILON..1.0).ln());
        for mut col in m.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        for mut col in m.column_iter_mut() {
            // Push the rounding residue into the largest entry.
            let residue = 1.0 - col.sum();
            let imax = col.imax();
            col[imax] += residue;
        }
        Self { entries: m }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Number of outcomes `m`.
    pub fn outcomes(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of conditioning states `n`.
    pub fn states(&self) -> usize {
        self.entries.ncols()
    }
}

/// Orthogonal projector, `P² = P = P†`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOperator {
    entries: CMatrix,
}

impl ProjectionOperator {
    pub fn new(entries: CMatrix) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::InvalidState("projector must be square".into()));
        }
        if max_abs_diff(&(&entries * &entries), &entries) > VALIDATION_TOL
            || max_abs_diff(&entries.adjoint(), &entries) > VALIDATION_TOL
        {
            return Err(Error::InvalidState("not an orthogonal projector".into()));
        }
        Ok(Self { entries })
    }

    /// `|i⟩⟨i|` on an `n`-dimensional space.
    pub fn basis(n: usize, i: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        m[(i, i)] = Complex64::new(1.0, 0.0);
        Self { entries: m }
    }

    /// `I_a ⊗ P`.
    pub fn lift(&self, a: usize) -> Self {
        Self {
            entries: kron(&CMatrix::identity(a, a), &self.entries),
        }
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }
}

/// `A π`.
pub fn classical_sum_rule(a: &StochasticMatrix, pi: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("sum rule prior", a.states(), pi.len())?;
    check_probability(pi, "prior")?;
    Ok(a.entries() * pi)
}

/// `diag(A[y, :]) π`, normalized.
pub fn classical_bayes(a: &StochasticMatrix, pi: &DVector<f64>, y: usize) -> Result<DVector<f64>> {
    check_dim("bayes prior", a.states(), pi.len())?;
    check_probability(pi, "prior")?;
    if y >= a.outcomes() {
        return Err(Error::InvalidInput(format!("observation {y} out of range {}", a.outcomes())));
    }
    let joint = a.entries().row(y).transpose().component_mul(pi);
    let z = joint.sum();
    if !(z > ZERO_PROB_TOL) {
        return Err(Error::ZeroProbability(z));
    }
    Ok(joint / z)
}

/// `(A diag(π))ᵀ diag(Aπ)⁻¹ e_y`.
pub fn linear_bayes_form(a: &StochasticMatrix, pi: &DVector<f64>, y: usize) -> Result<DVector<f64>> {
    let marginal = classical_sum_rule(a, pi)?;
    if y >= a.outcomes() {
        return Err(Error::InvalidInput(format!("observation {y} out of range {}", a.outcomes())));
    }
    if !(marginal[y] > ZERO_PROB_TOL) {
        return Err(Error::ZeroProbability(marginal[y]));
    }
    let joint = a.entries() * DMatrix::from_diagonal(pi);
    let mut inv = DVector::zeros(a.outcomes());
    inv[y] = 1.0 / marginal[y];
    Ok(joint.tr_mul(&inv))
}

/// Unitary on `X ⊗ env` (`n·m` dims, `X` slow) mapping `|x⟩|0⟩` to
/// `|x⟩ Σ_y √A[y,x] |y⟩`; the remaining columns are a random completion.
pub fn build_sum_rule_unitary(a: &StochasticMatrix) -> UnitaryMatrix {
    build_sum_rule_unitary_with_seed(a, 0)
}

pub fn build_sum_rule_unitary_with_seed(a: &StochasticMatrix, seed: u64) -> UnitaryMatrix {
    let (m, n) = (a.outcomes(), a.states());
    let dim = n * m;
    let mut cols: Vec<Option<DVector<Complex64>>> = vec![None; dim];
    for x in 0..n {
        let mut v = DVector::zeros(dim);
        for y in 0..m {
            v[x * m + y] = Complex64::new(a.entries()[(y, x)].sqrt(), 0.0);
        }
        cols[x * m] = Some(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<DVector<Complex64>> = cols.iter().flatten().cloned().collect();
    for slot in cols.iter_mut().filter(|c| c.is_none()) {
        loop {
            let mut v = random::complex_gaussian(dim, 1, &mut rng).column(0).into_owned();
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dotc(&v);
                    v -= b * proj;
                }
            }
            let norm = v.norm();
            if norm > 1e-6 {
                let v = v.unscale(norm);
                basis.push(v.clone());
                *slot = Some(v);
                break;
            }
        }
    }
    let columns: Vec<DVector<Complex64>> = cols.into_iter().map(|c| c.expect("filled")).collect();
    UnitaryMatrix::new(DMatrix::from_columns(&columns)).expect("Gram-Schmidt completion is unitary")
}

/// `|0⟩⟨0|` on the environment.
pub fn env_state(s: usize) -> DensityMatrix {
    DensityMatrix::basis(s, 0)
}

fn env_dim(u: &UnitaryMatrix, n: usize) -> Result<usize> {
    if n == 0 || u.dim() % n != 0 {
        return Err(Error::DimensionMismatch {
            context: "unitary vs system dimension",
            expected: n,
            found: u.dim(),
        });
    }
    Ok(u.dim() / n)
}

/// `U (ρ_X ⊗ |0⟩⟨0|) U†` on `X ⊗ env`.
pub fn joint_after_unitary(rho_x: &DensityMatrix, u: &UnitaryMatrix) -> Result<DensityMatrix> {
    let s = env_dim(u, rho_x.dim())?;
    rho_x.tensor(&env_state(s)).evolve(u)
}

/// `tr_X(U (ρ_X ⊗ ρ_env) U†)`.
pub fn quantum_sum_rule_circuit(rho_x: &DensityMatrix, u: &UnitaryMatrix) -> Result<DensityMatrix> {
    let n = rho_x.dim();
    let s = env_dim(u, n)?;
    joint_after_unitary(rho_x, u)?.partial_trace(&SubsystemShape::bipartite(n, s)?, &[1])
}

/// `W = I_n ⊗ |0⟩`, an `n·s × n` map.
pub fn env_embedding(n: usize, s: usize) -> CMatrix {
    let mut ket = CMatrix::zeros(s, 1);
    ket[(0, 0)] = Complex64::new(1.0, 0.0);
    kron(&CMatrix::identity(n, n), &ket)
}

/// `V_i = ⟨i| ⊗ I_s` for `i < n`, each `s × n·s`.
pub fn trace_slices(n: usize, s: usize) -> Vec<CMatrix> {
    (0..n)
        .map(|i| {
            let mut bra = CMatrix::zeros(1, n);
            bra[(0, i)] = Complex64::new(1.0, 0.0);
            kron(&bra, &CMatrix::identity(s, s))
        })
        .collect()
}

/// `Σ_i conj(V_i U W) ⊗ (V_i U W)`, the sum-rule circuit as a linear map on
/// vectorized densities.
pub fn sum_rule_linear_operator(u: &UnitaryMatrix, w: &CMatrix, v_list: &[CMatrix]) -> Result<CMatrix> {
    check_dim("W rows", u.dim(), w.nrows())?;
    let first = v_list
        .first()
        .ok_or_else(|| Error::InvalidInput("empty trace slice list".into()))?;
    let s = first.nrows();
    let n = w.ncols();
    let mut a = CMatrix::zeros(s * s, n * n);
    for v in v_list {
        check_dim("V_i columns", u.dim(), v.ncols())?;
        check_dim("V_i rows", s, v.nrows())?;
        let m = v * u.entries() * w;
        a += kron(&m.map(|z| z.conj()), &m);
    }
    Ok(a)
}

/// Measuring the environment in the computational basis with `P_y`:
/// `tr_env((I⊗P_y) U (ρ_X⊗ρ_env) U† (I⊗P_y))`, normalized.
pub fn measurement_bayes_circuit(rho_x: &DensityMatrix, u: &UnitaryMatrix, y: usize) -> Result<DensityMatrix> {
    let n = rho_x.dim();
    let s = env_dim(u, n)?;
    if y >= s {
        return Err(Error::InvalidInput(format!("observation {y} out of range {s}")));
    }
    let p = ProjectionOperator::basis(s, y).lift(n);
    collapse(rho_x, u, p.entries(), s)
}

fn collapse(rho_x: &DensityMatrix, u: &UnitaryMatrix, op: &CMatrix, s: usize) -> Result<DensityMatrix> {
    let n = rho_x.dim();
    let joint = joint_after_unitary(rho_x, u)?;
    let post = op * joint.entries() * op.adjoint();
    let reduced = partial_trace(&post, &SubsystemShape::bipartite(n, s)?, &[0])?;
    UnnormalizedDensity::new(reduced)?.normalize(ZERO_PROB_TOL)
}

fn rank_one_check(rho_y: &DensityMatrix) -> Result<()> {
    let eig = rho_y.eigenvalues();
    let rest: f64 = eig[..eig.len() - 1].iter().map(|l| l.abs()).sum();
    if rest > VALIDATION_TOL {
        return Err(Error::InvalidState(format!(
            "observation density is not rank 1 (residual spectrum {rest:e})"
        )));
    }
    Ok(())
}

/// Rank-one measurement written directly with `I ⊗ ρ_y`.
pub fn bayes_rank_one(rho_x: &DensityMatrix, u: &UnitaryMatrix, rho_y: &DensityMatrix) -> Result<DensityMatrix> {
    let n = rho_x.dim();
    let s = env_dim(u, n)?;
    check_dim("observation density", s, rho_y.dim())?;
    rank_one_check(rho_y)?;
    let op = kron(&CMatrix::identity(n, n), rho_y.entries());
    collapse(rho_x, u, &op, s)
}

/// Rotate into the eigenbasis `û` of `ρ_y`, project onto its leading
/// eigenvector with `P = I ⊗ Λ`, rotate back.
pub fn bayes_rotated(rho_x: &DensityMatrix, u: &UnitaryMatrix, rho_y: &DensityMatrix) -> Result<DensityMatrix> {
    let n = rho_x.dim();
    let s = env_dim(u, n)?;
    check_dim("observation density", s, rho_y.dim())?;
    rank_one_check(rho_y)?;
    let eig = nalgebra::SymmetricEigen::new(rho_y.entries().clone());
    let lead = eig.eigenvalues.imax();
    // Eigenvalue-1 vector first, the rest in their original order.
    let mut order = vec![lead];
    order.extend((0..s).filter(|&k| k != lead));
    let u_hat = CMatrix::from_columns(&order.iter().map(|&k| eig.eigenvectors.column(k)).collect::<Vec<_>>());
    let lambda = ProjectionOperator::basis(s, 0);
    let rotate = kron(&CMatrix::identity(n, n), &u_hat);
    let p = lambda.lift(n);
    let op = &rotate * p.entries() * rotate.adjoint();
    let target = kron(&CMatrix::identity(n, n), rho_y.entries());
    let dev = max_abs_diff(&op, &target);
    if dev > EQUIVALENCE_TOL {
        return Err(Error::InvalidState(format!(
            "rotated projector differs from I⊗ρ_y by {dev:e}"
        )));
    }
    collapse(rho_x, u, &op, s)
}

/// Conditioning on a rank-one observation density, computed both through
/// the basis-rotated projection and directly; the two must agree.
pub fn quantum_bayes_circuit(rho_x: &DensityMatrix, u: &UnitaryMatrix, rho_y: &DensityMatrix) -> Result<DensityMatrix> {
    let rotated = bayes_rotated(rho_x, u, rho_y)?;
    let direct = bayes_rank_one(rho_x, u, rho_y)?;
    let dev = max_abs_diff(rotated.entries(), direct.entries());
    if dev > EQUIVALENCE_TOL {
        return Err(Error::InvalidState(format!("measurement paths disagree by {dev:e}")));
    }
    Ok(direct)
}

/// The `(n²·s²) × n²` tensor mapping `vec(ρ_X)` to the realigned joint
/// state `realign(U (ρ_X ⊗ ρ_env) U†)`, as used by the primal
/// conditioning path. Fails if the result has imaginary parts.
pub fn conditional_tensor_from_unitary(u: &UnitaryMatrix, n: usize) -> Result<ConditionalTensor> {
    let s = env_dim(u, n)?;
    let env = env_state(s);
    let mut out = DMatrix::zeros(n * n * s * s, n * n);
    for c in 0..n {
        for cp in 0..n {
            let mut e = CMatrix::zeros(n, n);
            e[(c, cp)] = Complex64::new(1.0, 0.0);
            let joint = u.entries() * kron(&e, env.entries()) * u.entries().adjoint();
            let r = realign(&joint, n, s)?;
            let col = c + n * cp;
            for a in 0..n * n {
                for b in 0..s * s {
                    let z = r[(a, b)];
                    if z.im.abs() > 1e-12 {
                        return Err(Error::InvalidState(format!(
                            "unitary produces complex joint entries ({:e})",
                            z.im
                        )));
                    }
                    out[(a * s * s + b, col)] = z.re;
                }
            }
        }
    }
    ConditionalTensor::new(out, n * n, s * s)
}

/// Discrete hidden Markov model with column-stochastic transition
/// `T[x', x]`, emission `O[y, x]` and initial distribution `π`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hmm {
    transition: StochasticMatrix,
    emission: StochasticMatrix,
    initial: DVector<f64>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `P(y_t | y_<t)` over symbols, one vector per step.
    pub predictive: Vec<DVector<f64>>,
    /// `P(x_t | y_≤t)` after each observation.
    pub filtered: Vec<DVector<f64>>,
    pub log_likelihood: f64,
}

impl Hmm {
    pub fn new(transition: StochasticMatrix, emission: StochasticMatrix, initial: DVector<f64>) -> Result<Self> {
        check_dim("transition square", transition.states(), transition.outcomes())?;
        check_dim("emission states", transition.states(), emission.states())?;
        check_dim("initial distribution", transition.states(), initial.len())?;
        check_probability(&initial, "initial distribution")?;
        Ok(Self {
            transition,
            emission,
            initial,
        })
    }

    /// Random HMM started from its stationary distribution.
    pub fn random<R: Rng + ?Sized>(states: usize, symbols: usize, rng: &mut R) -> Self {
        let transition = StochasticMatrix::random(states, states, rng);
        let emission = StochasticMatrix::random(symbols, states, rng);
        let initial = stationary(&transition);
        Self {
            transition,
            emission,
            initial,
        }
    }

    pub fn transition(&self) -> &StochasticMatrix {
        &self.transition
    }

    pub fn emission(&self) -> &StochasticMatrix {
        &self.emission
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn states(&self) -> usize {
        self.transition.states()
    }

    pub fn symbols(&self) -> usize {
        self.emission.outcomes()
    }

    pub fn stationary(&self) -> DVector<f64> {
        stationary(&self.transition)
    }

    /// Long-run symbol frequencies.
    pub fn stationary_emission(&self) -> DVector<f64> {
        self.emission.entries() * self.stationary()
    }

    /// Samples hidden states and symbols.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let mut states = Vec::with_capacity(len);
        let mut symbols = Vec::with_capacity(len);
        let mut x = draw(self.initial.as_slice(), rng);
        for t in 0..len {
            if t > 0 {
                x = draw(self.transition.entries().column(x).as_slice(), rng);
            }
            states.push(x);
            symbols.push(draw(self.emission.entries().column(x).as_slice(), rng));
        }
        (states, symbols)
    }

    /// Forward algorithm.
    pub fn forward(&self, symbols: &[usize]) -> Result<ForwardPass> {
        let mut prior = self.initial.clone();
        let mut predictive = Vec::with_capacity(symbols.len());
        let mut filtered = Vec::with_capacity(symbols.len());
        let mut log_likelihood = 0.0;
        for &y in symbols {
            predictive.push(self.emission.entries() * &prior);
            let post = classical_bayes(&self.emission, &prior, y)?;
            log_likelihood += predictive.last().expect("pushed")[y].ln();
            prior = self.transition.entries() * &post;
            filtered.push(post);
        }
        Ok(ForwardPass {
            predictive,
            filtered,
            log_likelihood,
        })
    }
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn stationary(t: &StochasticMatrix) -> DVector<f64> {
    let n = t.states();
    let mut p = DVector::from_element(n, 1.0 / n as f64);
    // Lazy chain avoids oscillation on periodic transitions.
    let lazy = (t.entries() + DMatrix::identity(n, n)) * 0.5;
    for _ in 0..10_000 {
        let next = &lazy * &p;
        let done = (&next - &p).amax() < 1e-15;
        p = next;
        if done {
            break;
        }
    }
    p.unscale(p.sum())
}
