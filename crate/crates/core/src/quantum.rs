//! Dense linear algebra for quantum states.
//!
//! Density matrices, pure states and unitaries are thin validated wrappers
//! around `nalgebra` matrices. All free functions are generic over the
//! scalar so the same code serves real feature-space densities (`f64`) and
//! genuinely complex circuit states (`Complex64`).
//!
//! Conventions used throughout the crate:
//!
//! * Kronecker products put the left operand on the slow (outer) index, so a
//!   composite basis index for subsystems `[d0, d1, ..]` is mixed-radix with
//!   `d0` most significant.
//! * Vectorization stacks columns, which gives
//!   `vec(U ρ U†) = (conj(U) ⊗ U) vec(ρ)`.

use nalgebra::{ComplexField, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{check_dim, Error, Result};

/// Default tolerance for validating quantum objects.
pub const VALIDATION_TOL: f64 = 1e-9;
/// Default tolerance when asserting that two computational paths agree.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

/// Scalars the quantum primitives work over (`f64` and `Complex64`).
pub trait Scalar: ComplexField<RealField = f64> + Copy {}
impl<T: ComplexField<RealField = f64> + Copy> Scalar for T {}

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Largest entry modulus.
pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> f64 {
    m.iter().map(|z| z.modulus()).fold(0.0, f64::max)
}

/// Largest entrywise distance between two equally shaped matrices.
pub fn max_abs_diff<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).modulus())
        .fold(0.0, f64::max)
}

pub fn trace<T: Scalar>(m: &DMatrix<T>) -> T {
    m.diagonal().iter().fold(T::zero(), |acc, &z| acc + z)
}

/// `(m + m†) / 2`.
pub fn hermitian_part<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.adjoint()) * T::from_real(0.5)
}

pub fn is_hermitian<T: Scalar>(m: &DMatrix<T>, tol: f64) -> bool {
    m.is_square() && max_abs_diff(m, &m.adjoint()) <= tol
}

/// Eigenvalues (ascending) of the Hermitian part of `m`.
pub fn hermitian_eigenvalues<T: Scalar>(m: &DMatrix<T>) -> Vec<f64> {
    let mut values: Vec<f64> = SymmetricEigen::new(hermitian_part(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    values.sort_by(|a, b| a.total_cmp(b));
    values
}

/// Kronecker product with `a` on the outer index.
pub fn kron<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// Kronecker product of two vectors, `a` outer.
pub fn kron_vec<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    let mut out = DVector::zeros(a.len() * b.len());
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i * b.len() + j] = ai * bj;
        }
    }
    out
}

/// Column-stacking vectorization.
pub fn vectorize<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    // nalgebra storage is column-major already.
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vectorize`]; the length must be a perfect square.
pub fn unvectorize<T: Scalar>(v: &DVector<T>) -> Result<DMatrix<T>> {
    let n = square_side(v.len())?;
    Ok(DMatrix::from_column_slice(n, n, v.as_slice()))
}

pub(crate) fn square_side(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len || len == 0 {
        return Err(Error::InvalidInput(format!(
            "vector of length {len} is not a vectorized square matrix"
        )));
    }
    Ok(n)
}

/// The vectorized identity `vec(I_n)`, whose inner product with a
/// vectorized matrix is that matrix's trace.
pub fn vec_identity<T: Scalar>(n: usize) -> DVector<T> {
    vectorize(&DMatrix::<T>::identity(n, n))
}

/// Ordered subsystem dimensions of a composite system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsystemShape {
    dims: Vec<usize>,
}

impl SubsystemShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "subsystem dimensions must be non-empty and >= 1, got {dims:?}"
            )));
        }
        Ok(Self { dims })
    }

    /// Two-party shape `[a, b]`.
    pub fn bipartite(a: usize, b: usize) -> Result<Self> {
        Self::new(vec![a, b])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total(&self) -> usize {
        self.dims.iter().product()
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }
}

/// Decompose `index` in mixed radix over `dims` (first most significant).
fn digits(mut index: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for k in (0..dims.len()).rev() {
        out[k] = index % dims[k];
        index /= dims[k];
    }
    out
}

/// Partial trace keeping the subsystems listed in `keep` (strictly
/// increasing). An empty `keep` traces everything and returns `[[tr m]]`.
pub fn partial_trace<T: Scalar>(
    m: &DMatrix<T>,
    shape: &SubsystemShape,
    keep: &[usize],
) -> Result<DMatrix<T>> {
    let n = shape.total();
    check_dim("partial_trace rows", n, m.nrows())?;
    check_dim("partial_trace cols", n, m.ncols())?;
    if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&k| k >= shape.dims.len()) {
        return Err(Error::InvalidInput(format!(
            "keep list {keep:?} must be strictly increasing subsystem indices below {}",
            shape.dims.len()
        )));
    }
    let traced: Vec<usize> = (0..shape.dims.len()).filter(|k| !keep.contains(k)).collect();
    let kept_dims: Vec<usize> = keep.iter().map(|&k| shape.dims[k]).collect();
    let traced_dims: Vec<usize> = traced.iter().map(|&k| shape.dims[k]).collect();
    let nk: usize = kept_dims.iter().product();
    let nt: usize = traced_dims.iter().product();
    let strides = shape.strides();

    // composite[i][t]: full index for kept multi-index i and traced multi-index t.
    let composite: Vec<Vec<usize>> = (0..nk)
        .map(|i| {
            let kd = digits(i, &kept_dims);
            let base: usize = keep.iter().zip(&kd).map(|(&k, &d)| d * strides[k]).sum();
            (0..nt)
                .map(|t| {
                    let td = digits(t, &traced_dims);
                    base + traced
                        .iter()
                        .zip(&td)
                        .map(|(&k, &d)| d * strides[k])
                        .sum::<usize>()
                })
                .collect()
        })
        .collect();

    let mut out = DMatrix::zeros(nk, nk);
    for i in 0..nk {
        for j in 0..nk {
            let mut acc = T::zero();
            for t in 0..nt {
                acc += m[(composite[i][t], composite[j][t])];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Rearranges a joint operator on `X ⊗ Y` (`n·s × n·s`) into the
/// `n² × s²` matrix whose entry `[vec-index(x,x'), vec-index(y,y')]` is
/// `ρ[(x,y),(x',y')]`. A product state `ρ_X ⊗ ρ_Y` maps to
/// `vec(ρ_X) vec(ρ_Y)ᵀ`.
pub fn realign<T: Scalar>(joint: &DMatrix<T>, n: usize, s: usize) -> Result<DMatrix<T>> {
    check_dim("realign rows", n * s, joint.nrows())?;
    check_dim("realign cols", n * s, joint.ncols())?;
    let mut out = DMatrix::zeros(n * n, s * s);
    for x in 0..n {
        for xp in 0..n {
            for y in 0..s {
                for yp in 0..s {
                    out[(x + n * xp, y + s * yp)] = joint[(x * s + y, xp * s + yp)];
                }
            }
        }
    }
    Ok(out)
}

/// `U ρ U†`.
pub fn conjugate_by<T: Scalar>(u: &DMatrix<T>, rho: &DMatrix<T>) -> DMatrix<T> {
    u * rho * u.adjoint()
}

/// Projects `v` onto the probability simplex (Euclidean nearest point).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Nearest (Frobenius) density matrix to `m`: Hermitize, eigendecompose,
/// project the spectrum onto the simplex and rebuild.
pub fn project_to_density<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "cannot project a {}x{} matrix to a density",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|z| !z.modulus().is_finite()) {
        return Err(Error::DegenerateState("matrix has non-finite entries".into()));
    }
    if max_abs(m) == 0.0 {
        return Err(Error::DegenerateState("cannot project the zero matrix".into()));
    }
    let eig = SymmetricEigen::new(hermitian_part(m));
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let projected = project_to_simplex(&values);
    let diag = DMatrix::from_diagonal(&DVector::from_iterator(
        projected.len(),
        projected.iter().map(|&p| T::from_real(p)),
    ));
    let rebuilt = &eig.eigenvectors * diag * eig.eigenvectors.adjoint();
    Ok(hermitian_part(&rebuilt))
}

/// Checks the density-matrix invariants; `normalized` controls the trace check.
pub fn validate_density<T: Scalar>(m: &DMatrix<T>, tol: f64, normalized: bool) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidState(format!(
            "density matrix must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = max_abs_diff(m, &m.adjoint());
    if asym > tol {
        return Err(Error::InvalidState(format!("not Hermitian (deviation {asym:e})")));
    }
    let min_eig = hermitian_eigenvalues(m).first().copied().unwrap_or(0.0);
    if min_eig < -tol {
        return Err(Error::InvalidState(format!(
            "not positive semidefinite (min eigenvalue {min_eig:e})"
        )));
    }
    if normalized {
        let tr = trace(m);
        if (tr.real() - 1.0).abs() > tol || tr.imaginary().abs() > tol {
            return Err(Error::InvalidState(format!("trace is {tr:?}, expected 1")));
        }
    }
    Ok(())
}

/// A unit-norm amplitude vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState<T: Scalar = Complex64> {
    amplitudes: DVector<T>,
}

impl<T: Scalar> PureState<T> {
    pub fn new(amplitudes: DVector<T>) -> Result<Self> {
        let norm2 = amplitudes.norm_squared();
        if (norm2 - 1.0).abs() > VALIDATION_TOL {
            return Err(Error::InvalidState(format!(
                "pure state has squared norm {norm2}, expected 1"
            )));
        }
        Ok(Self { amplitudes })
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(v: DVector<T>) -> Result<Self> {
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateState("cannot normalize a zero vector".into()));
        }
        Ok(Self {
            amplitudes: v.unscale(norm),
        })
    }

    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = DVector::zeros(n);
        v[i] = T::one();
        Self { amplitudes: v }
    }

    pub fn amplitudes(&self) -> &DVector<T> {
        &self.amplitudes
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    /// `|ψ⟩⟨ψ|`.
    pub fn density(&self) -> DensityMatrix<T> {
        DensityMatrix {
            entries: &self.amplitudes * self.amplitudes.adjoint(),
        }
    }
}

/// Hermitian, PSD, trace-one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Scalar = Complex64> {
    entries: DMatrix<T>,
}

impl<T: Scalar> DensityMatrix<T> {
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        Self::with_tolerance(entries, VALIDATION_TOL)
    }

    pub fn with_tolerance(entries: DMatrix<T>, tol: f64) -> Result<Self> {
        validate_density(&entries, tol, true)?;
        Ok(Self { entries })
    }

    /// Nearest valid density matrix to an arbitrary square matrix.
    pub fn project(m: &DMatrix<T>) -> Result<Self> {
        Ok(Self {
            entries: project_to_density(m)?,
        })
    }

    pub fn maximally_mixed(n: usize) -> Self {
        Self {
            entries: DMatrix::identity(n, n) * T::from_real(1.0 / n as f64),
        }
    }

    /// `|i⟩⟨i|`.
    pub fn basis(n: usize, i: usize) -> Self {
        PureState::<T>::basis(n, i).density()
    }

    /// Classical distribution on the diagonal.
    pub fn diagonal(probabilities: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_iterator(
            probabilities.len(),
            probabilities.iter().map(|&p| T::from_real(p)),
        )))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<T> {
        self.entries
    }

    /// Real parts of the diagonal (the basis-state probabilities).
    pub fn probabilities(&self) -> Vec<f64> {
        self.entries.diagonal().iter().map(|z| z.real()).collect()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.entries)
    }

    /// Number of eigenvalues above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.eigenvalues().iter().filter(|&&l| l > tol).count()
    }

    pub fn tensor(&self, other: &Self) -> Self {
        Self {
            entries: kron(&self.entries, &other.entries),
        }
    }

    pub fn partial_trace(&self, shape: &SubsystemShape, keep: &[usize]) -> Result<Self> {
        Ok(Self {
            entries: partial_trace(&self.entries, shape, keep)?,
        })
    }

    pub fn vectorize(&self) -> DVector<T> {
        vectorize(&self.entries)
    }

    pub fn unvectorize(v: &DVector<T>) -> Result<Self> {
        Self::new(unvectorize(v)?)
    }

    pub fn evolve(&self, u: &UnitaryMatrix<T>) -> Result<Self> {
        check_dim("evolve", u.dim(), self.dim())?;
        Ok(Self {
            entries: hermitian_part(&conjugate_by(u.entries(), &self.entries)),
        })
    }
}

impl DensityMatrix<f64> {
    pub fn to_complex(&self) -> DensityMatrix<Complex64> {
        DensityMatrix {
            entries: self.entries.map(|x| Complex64::new(x, 0.0)),
        }
    }
}

/// Hermitian PSD matrix whose trace is not pinned to one, such as the
/// output of a measurement before renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct UnnormalizedDensity<T: Scalar = Complex64> {
    entries: DMatrix<T>,
}

impl<T: Scalar> UnnormalizedDensity<T> {
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        validate_density(&entries, VALIDATION_TOL, false)?;
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        trace(&self.entries).real()
    }

    /// Divides by the trace; fails when the trace is below `min_trace`.
    pub fn normalize(&self, min_trace: f64) -> Result<DensityMatrix<T>> {
        let tr = self.trace();
        if tr <= min_trace {
            return Err(Error::ZeroProbability(tr));
        }
        Ok(DensityMatrix {
            entries: hermitian_part(&self.entries.unscale(tr)),
        })
    }
}

/// Square matrix with `U†U = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryMatrix<T: Scalar = Complex64> {
    entries: DMatrix<T>,
}

impl<T: Scalar> UnitaryMatrix<T> {
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        Self::with_tolerance(entries, VALIDATION_TOL)
    }

    pub fn with_tolerance(entries: DMatrix<T>, tol: f64) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::InvalidState("unitary must be square".into()));
        }
        let n = entries.nrows();
        let dev = max_abs_diff(&(entries.adjoint() * &entries), &DMatrix::identity(n, n));
        if dev > tol {
            return Err(Error::InvalidState(format!("not unitary (|U†U - I| = {dev:e})")));
        }
        Ok(Self { entries })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn adjoint(&self) -> Self {
        Self {
            entries: self.entries.adjoint(),
        }
    }
}

/// `vec(U ρ U†)` computed as `(conj(U) ⊗ U) vec(ρ)`.
pub fn apply_unitary_linearized<T: Scalar>(
    u: &UnitaryMatrix<T>,
    v: &DVector<T>,
) -> Result<DVector<T>> {
    let n = u.dim();
    check_dim("apply_unitary_linearized", n * n, v.len())?;
    let op = kron(&u.entries().map(|z| z.conjugate()), u.entries());
    Ok(op * v)
}

/// Random states and unitaries for tests, oracles and examples.
pub mod random {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
        DMatrix::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        })
    }

    pub fn real_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    /// Haar-distributed unitary (QR of a complex Ginibre matrix with the
    /// diagonal phases of R divided out).
    pub fn unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> UnitaryMatrix<Complex64> {
        let qr = complex_gaussian(n, n, rng).qr();
        let (mut q, r) = (qr.q(), qr.r());
        for j in 0..n {
            let d = r[(j, j)];
            let phase = if d.norm() > 0.0 { d / d.norm() } else { Complex64::new(1.0, 0.0) };
            let mut col = q.column_mut(j);
            col *= phase;
        }
        UnitaryMatrix { entries: q }
    }

    /// Haar-distributed real orthogonal matrix.
    pub fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> UnitaryMatrix<f64> {
        let qr = real_gaussian(n, n, rng).qr();
        let (mut q, r) = (qr.q(), qr.r());
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                let mut col = q.column_mut(j);
                col *= -1.0;
            }
        }
        UnitaryMatrix { entries: q }
    }

    pub fn pure_state<R: Rng + ?Sized>(n: usize, rng: &mut R) -> PureState<Complex64> {
        let v = complex_gaussian(n, 1, rng).column(0).into_owned();
        PureState::normalized(v).expect("gaussian vector is nonzero")
    }

    pub fn real_pure_state<R: Rng + ?Sized>(n: usize, rng: &mut R) -> PureState<f64> {
        let v = real_gaussian(n, 1, rng).column(0).into_owned();
        PureState::normalized(v).expect("gaussian vector is nonzero")
    }

    /// Random density matrix of the given rank (`G G† / tr`).
    pub fn density<R: Rng + ?Sized>(n: usize, rank: usize, rng: &mut R) -> DensityMatrix<Complex64> {
        let g = complex_gaussian(n, rank.max(1), rng);
        let m = &g * g.adjoint();
        let tr = trace(&m).re;
        DensityMatrix {
            entries: hermitian_part(&m.unscale(tr)),
        }
    }

    pub fn real_density<R: Rng + ?Sized>(n: usize, rank: usize, rng: &mut R) -> DensityMatrix<f64> {
        let g = real_gaussian(n, rank.max(1), rng);
        let m = &g * g.transpose();
        let tr = m.trace();
        DensityMatrix {
            entries: hermitian_part(&m.unscale(tr)),
        }
    }
}
