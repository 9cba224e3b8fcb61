//! Feature maps into the Hilbert space where states live.
//!
//! Continuous data goes through random Fourier features approximating the
//! Gaussian kernel; each feature vector is renormalized to unit length so
//! that its outer product is a valid pure-state density matrix. Discrete
//! symbol windows use a normalized concatenated one-hot encoding.
//!
//! Either map may be followed by a learned linear projection onto the top
//! principal directions of the training features (the model's state size),
//! after which the vector is renormalized again.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::quantum::{square_side, unvectorize, vectorize};

/// Frozen random-Fourier-feature parameters for a Gaussian kernel of
/// bandwidth `sigma`: `z(x) = √(2/D) cos(Wx + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RffMap {
    frequencies: DMatrix<f64>,
    phases: DVector<f64>,
    bandwidth: f64,
    seed: u64,
}

impl RffMap {
    /// Draws `feature_count` frequencies from `N(0, σ⁻² I)` and phases
    /// from `U[0, 2π)`, deterministically from `seed`.
    pub fn sample(input_dim: usize, feature_count: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if feature_count == 0 || input_dim == 0 {
            return Err(Error::InvalidInput("feature count and input dimension must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / bandwidth).expect("positive std");
        let uniform = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        let mut frequencies = DMatrix::zeros(feature_count, input_dim);
        for i in 0..feature_count {
            for j in 0..input_dim {
                frequencies[(i, j)] = normal.sample(&mut rng);
            }
        }
        let phases = DVector::from_fn(feature_count, |_, _| uniform.sample(&mut rng));
        Ok(Self {
            frequencies,
            phases,
            bandwidth,
            seed,
        })
    }

    pub fn from_parts(
        frequencies: DMatrix<f64>,
        phases: DVector<f64>,
        bandwidth: f64,
        seed: u64,
    ) -> Result<Self> {
        check_dim("rff phases", frequencies.nrows(), phases.len())?;
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self {
            frequencies,
            phases,
            bandwidth,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn feature_count(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    pub fn phases(&self) -> &DVector<f64> {
        &self.phases
    }

    /// Unnormalized features `√(2/D) cos(Wx + b)`.
    pub fn embed_raw(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim("rff input", self.input_dim(), x.len())?;
        let d = self.feature_count();
        let scale = (2.0 / d as f64).sqrt();
        Ok(DVector::from_fn(d, |i, _| {
            let mut arg = self.phases[i];
            for (j, &xj) in x.iter().enumerate() {
                arg += self.frequencies[(i, j)] * xj;
            }
            scale * arg.cos()
        }))
    }

    /// Unit-norm feature vector.
    pub fn embed(&self, x: &[f64]) -> Result<DVector<f64>> {
        normalize(self.embed_raw(x)?)
    }
}

fn normalize(v: DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if !(norm > 1e-300) || !norm.is_finite() {
        return Err(Error::DegenerateState("feature vector has zero norm".into()));
    }
    Ok(v.unscale(norm))
}

/// Exact Gaussian kernel `exp(−‖x−x′‖²/(2σ²))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

/// Concatenated one-hot encoding of a window of `width` symbols drawn from
/// `symbols` values, scaled by `1/√width` to unit norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotMap {
    pub symbols: usize,
    pub width: usize,
}

impl OneHotMap {
    pub fn embed(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim("one-hot window", self.width, x.len())?;
        let mut v = DVector::zeros(self.symbols * self.width);
        let scale = 1.0 / (self.width as f64).sqrt();
        for (slot, &value) in x.iter().enumerate() {
            let symbol = value.round();
            if (value - symbol).abs() > 1e-9 || symbol < 0.0 || symbol as usize >= self.symbols {
                return Err(Error::InvalidInput(format!(
                    "{value} is not a symbol index below {}",
                    self.symbols
                )));
            }
            v[slot * self.symbols + symbol as usize] = scale;
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    Rff(RffMap),
    OneHot(OneHotMap),
}

/// A base map plus an optional projection onto principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    kind: FeatureKind,
    projection: Option<DMatrix<f64>>,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind) -> Self {
        Self { kind, projection: None }
    }

    pub fn rff(map: RffMap) -> Self {
        Self::new(FeatureKind::Rff(map))
    }

    pub fn one_hot(symbols: usize, width: usize) -> Self {
        Self::new(FeatureKind::OneHot(OneHotMap { symbols, width }))
    }

    pub fn with_projection(mut self, projection: DMatrix<f64>) -> Result<Self> {
        check_dim("projection columns", self.base_dim(), projection.ncols())?;
        self.projection = Some(projection);
        Ok(self)
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn projection(&self) -> Option<&DMatrix<f64>> {
        self.projection.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            FeatureKind::Rff(m) => m.input_dim(),
            FeatureKind::OneHot(m) => m.width,
        }
    }

    fn base_dim(&self) -> usize {
        match &self.kind {
            FeatureKind::Rff(m) => m.feature_count(),
            FeatureKind::OneHot(m) => m.symbols * m.width,
        }
    }

    /// Output dimension.
    pub fn dim(&self) -> usize {
        self.projection.as_ref().map_or(self.base_dim(), |p| p.nrows())
    }

    fn embed_base(&self, x: &[f64]) -> Result<DVector<f64>> {
        match &self.kind {
            FeatureKind::Rff(m) => m.embed(x),
            FeatureKind::OneHot(m) => m.embed(x),
        }
    }

    /// Unit-norm feature vector `φ(x)`.
    pub fn embed(&self, x: &[f64]) -> Result<DVector<f64>> {
        let base = self.embed_base(x)?;
        match &self.projection {
            None => Ok(base),
            Some(p) => normalize(p * base),
        }
    }

    /// Embeds every row of `inputs` (in parallel, order preserved).
    pub fn embed_rows(&self, inputs: &DMatrix<f64>) -> Result<EmbeddedSample> {
        check_dim("embed_rows input", self.input_dim(), inputs.ncols())?;
        let columns: Vec<DVector<f64>> = (0..inputs.nrows())
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = inputs.row(i).iter().copied().collect();
                self.embed(&row)
            })
            .collect::<Result<_>>()?;
        if columns.is_empty() {
            return Ok(EmbeddedSample {
                features: DMatrix::zeros(self.dim(), 0),
            });
        }
        Ok(EmbeddedSample {
            features: DMatrix::from_columns(&columns),
        })
    }

    /// Replaces any existing projection with the top `dim` eigenvectors of
    /// the uncentered second moment of the base features of `inputs`.
    /// A `dim` at or above the base dimension removes the projection.
    pub fn fit_projection(mut self, inputs: &DMatrix<f64>, dim: usize) -> Result<Self> {
        self.projection = None;
        if dim >= self.base_dim() {
            return Ok(self);
        }
        if dim == 0 {
            return Err(Error::InvalidInput("projection dimension must be >= 1".into()));
        }
        let sample = self.embed_rows(inputs)?;
        let f = sample.features();
        let moment = (f * f.transpose()).unscale(f.ncols().max(1) as f64);
        let eig = SymmetricEigen::new(moment);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut projection = DMatrix::zeros(dim, self.base_dim());
        for (row, &k) in order.iter().take(dim).enumerate() {
            let mut v = eig.eigenvectors.column(k).into_owned();
            // Fix the sign so the projection is reproducible.
            let pivot = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.neg_mut();
            }
            projection.set_row(row, &v.transpose());
        }
        self.projection = Some(projection);
        Ok(self)
    }
}

/// Columns are unit feature vectors `φ(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSample {
    features: DMatrix<f64>,
}

impl EmbeddedSample {
    pub fn new(features: DMatrix<f64>) -> Result<Self> {
        for (i, col) in features.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("feature column {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn into_features(self) -> DMatrix<f64> {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    /// Columns replaced by the vectorized rank-1 densities `vec(φφᵀ)`
    /// (still unit norm).
    pub fn to_densities(&self) -> EmbeddedSample {
        let d = self.dim();
        let mut out = DMatrix::zeros(d * d, self.len());
        for (i, col) in self.features.column_iter().enumerate() {
            let rho = &col * col.transpose();
            out.set_column(i, &vectorize(&rho));
        }
        EmbeddedSample { features: out }
    }

    /// Gram matrix `ΥᵀΥ'` against another sample.
    pub fn gram(&self, other: &EmbeddedSample) -> DMatrix<f64> {
        gram(&self.features, &other.features)
    }
}

/// `AᵀB`, parallel across output columns.
pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "gram: feature dimensions differ");
    let columns: Vec<DVector<f64>> = (0..b.ncols())
        .into_par_iter()
        .map(|j| a.tr_mul(&b.column(j)))
        .collect();
    if columns.is_empty() {
        return DMatrix::zeros(a.ncols(), 0);
    }
    DMatrix::from_columns(&columns)
}

/// A vectorized (possibly unnormalized) density matrix in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumMeanMap {
    vec_density: DVector<f64>,
}

impl QuantumMeanMap {
    pub fn from_vec(vec_density: DVector<f64>) -> Result<Self> {
        square_side(vec_density.len())?;
        Ok(Self { vec_density })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidInput("mean map matrix must be square".into()));
        }
        Ok(Self { vec_density: vectorize(m) })
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.vec_density
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.vec_density
    }

    /// Side length `n` of the `n × n` density.
    pub fn dim(&self) -> usize {
        square_side(self.vec_density.len()).expect("validated at construction")
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        unvectorize(&self.vec_density).expect("validated at construction")
    }

    pub fn trace(&self) -> f64 {
        let n = self.dim();
        (0..n).map(|i| self.vec_density[i * n + i]).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| self.vec_density[i * n + i]).collect()
    }

    /// Nearest valid density matrix.
    pub fn project(&self) -> Result<Self> {
        Self::from_matrix(&crate::quantum::project_to_density(&self.matrix())?)
    }
}

/// Median distance between consecutive rows over all sequences (each
/// sequence is a `T × d` matrix, one observation per row).
pub fn median_bandwidth(sequences: &[DMatrix<f64>]) -> Result<f64> {
    let mut distances: Vec<f64> = Vec::new();
    for seq in sequences {
        for t in 1..seq.nrows() {
            distances.push((seq.row(t) - seq.row(t - 1)).norm());
        }
    }
    if distances.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "median bandwidth needs at least 2 consecutive pairs, got {}",
            distances.len()
        )));
    }
    distances.sort_by(|a, b| a.total_cmp(b));
    let n = distances.len();
    let median = if n % 2 == 1 {
        distances[n / 2]
    } else {
        0.5 * (distances[n / 2 - 1] + distances[n / 2])
    };
    if median <= 0.0 {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(median)
}

/// `vec(φ(x)φ(x)ᵀ)`.
pub fn density_feature(map: &FeatureMap, x: &[f64]) -> Result<QuantumMeanMap> {
    let phi = map.embed(x)?;
    QuantumMeanMap::from_matrix(&(&phi * phi.transpose()))
}

/// Average of the vectorized rank-1 densities of the sample.
pub fn mean_map(embedded: &EmbeddedSample) -> Result<QuantumMeanMap> {
    if embedded.is_empty() {
        return Err(Error::InvalidInput("mean map of an empty sample".into()));
    }
    let f = embedded.features();
    QuantumMeanMap::from_matrix(&(f * f.transpose()).unscale(f.ncols() as f64))
}

/// `C_YX = (1/n) Σ vec(φ_y φ_yᵀ) vec(φ_x φ_xᵀ)ᵀ`, an `m² × n²` matrix.
pub fn cross_covariance(phi_y: &EmbeddedSample, ups_x: &EmbeddedSample) -> Result<DMatrix<f64>> {
    check_dim("cross_covariance sample count", phi_y.len(), ups_x.len())?;
    if phi_y.is_empty() {
        return Err(Error::InvalidInput("cross covariance of an empty sample".into()));
    }
    let y = phi_y.to_densities();
    let x = ups_x.to_densities();
    Ok((y.features() * x.features().transpose()).unscale(phi_y.len() as f64))
}

/// Deterministic RNG used by all seeded components.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random inputs in `[-scale, scale]^d`, handy for kernel checks.
pub fn random_inputs<R: Rng + ?Sized>(count: usize, dim: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(count, dim, |_, _| rng.random_range(-scale..scale))
}
