//! The hidden quantum Markov model in feature space: filtering, densities,
//! point prediction and marginal density grids.
//!
//! Two parameterisations share one type. In pure mode the tensor has shape
//! `(p·Dy) × p` and slices `K_b[a, c] = C[a·Dy + b, c]` act on unit state
//! vectors; an observation with features `φ` applies `K_φ = Σ_b φ_b K_b`.
//! In mixed mode the tensor acts on vectorized `p × p` densities and maps
//! them to realigned joint states of shape `p² × Dy²`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::features::{seeded_rng, FeatureKind, FeatureMap};
use crate::inference::{ConditionalTensor, DENOMINATOR_TOL};
use crate::oracle::Hmm;
use crate::quantum::{hermitian_eigenvalues, project_to_density, square_side, unvectorize, vec_identity, vectorize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pure,
    Mixed,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pure => "pure",
            Mode::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(Mode::Pure),
            "mixed" => Ok(Mode::Mixed),
            _ => Err(Error::InvalidInput(format!("unknown mode '{s}' (expected pure or mixed)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureChoice {
    /// Random Fourier features of the Gaussian kernel.
    Rff,
    /// Concatenated one-hot symbol windows.
    OneHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    CrossEntropy,
}

/// Hyperparameters. Defaults follow the reference experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct HqmmConfig {
    pub feature_count: usize,
    pub lambda: f64,
    pub window: usize,
    pub state_size: usize,
    pub learning_rate: f64,
    pub bptt_horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub prediction_horizon: usize,
    pub n_density_samples: usize,
    pub hull_samples: usize,
    pub mode: Mode,
    pub features: FeatureChoice,
    /// Symbol count for one-hot features; 0 infers it from the data.
    pub symbols: usize,
    /// Kernel bandwidth; `None` uses the median heuristic per stream.
    pub bandwidth: Option<f64>,
    pub loss: Loss,
    /// Open-loop steps scored per state during refinement.
    pub loss_horizon: usize,
    pub seed: u64,
}

impl Default for HqmmConfig {
    fn default() -> Self {
        Self {
            feature_count: 1000,
            lambda: 0.05,
            window: 10,
            state_size: 20,
            learning_rate: 0.1,
            bptt_horizon: 20,
            epochs: 50,
            batch_size: 20,
            grad_clip: 0.25,
            prediction_horizon: 10,
            n_density_samples: 200,
            hull_samples: 0,
            mode: Mode::Pure,
            features: FeatureChoice::Rff,
            symbols: 0,
            bandwidth: None,
            loss: Loss::Mse,
            loss_horizon: 1,
            seed: 0,
        }
    }
}

impl HqmmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_count", self.feature_count),
            ("window", self.window),
            ("state_size", self.state_size),
            ("bptt_horizon", self.bptt_horizon),
            ("batch_size", self.batch_size),
            ("prediction_horizon", self.prediction_horizon),
            ("loss_horizon", self.loss_horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be >= 0 and grad_clip > 0".into()));
        }
        if let Some(b) = self.bandwidth {
            if !(b > 0.0) {
                return Err(Error::InvalidInput(format!("bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// How the belief is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    /// Unit vector of length `p` (pure mode only).
    Pure,
    /// Column-stacked `p × p` density matrix.
    Density,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mu: DVector<f64>,
    pub kind: StateKind,
    /// Number of observations consumed.
    pub t: usize,
    /// Unnormalized density of the most recent observation.
    pub last_density: f64,
}

impl FilterState {
    pub fn pure(psi: DVector<f64>) -> Self {
        Self {
            mu: psi,
            kind: StateKind::Pure,
            t: 0,
            last_density: f64::NAN,
        }
    }

    pub fn density(rho: &DMatrix<f64>) -> Self {
        Self {
            mu: vectorize(rho),
            kind: StateKind::Density,
            t: 0,
            last_density: f64::NAN,
        }
    }

    /// The state as a `p × p` density matrix.
    pub fn density_matrix(&self) -> DMatrix<f64> {
        match self.kind {
            StateKind::Pure => &self.mu * self.mu.transpose(),
            StateKind::Density => unvectorize(&self.mu).expect("square by construction"),
        }
    }

    /// Checks unit norm (pure) or trace-1 PSD (density) within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        match self.kind {
            StateKind::Pure => {
                let n = self.mu.norm();
                if (n - 1.0).abs() > tol {
                    return Err(Error::InvalidState(format!("pure state norm {n}")));
                }
                Ok(())
            }
            StateKind::Density => crate::quantum::validate_density(&self.density_matrix(), tol, true),
        }
    }
}

/// Densities at the prediction samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDensities {
    pub raw: Vec<f64>,
    pub clamped: Vec<f64>,
    /// Raw values outside `[0, 1]`.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub value: DVector<f64>,
    pub violations: usize,
}

/// Everything needed to assemble a model.
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub config: HqmmConfig,
    pub mode: Mode,
    pub tensor: ConditionalTensor,
    pub obs_map: FeatureMap,
    pub history_map: Option<FeatureMap>,
    pub future_map: Option<FeatureMap>,
    pub initial_state: DVector<f64>,
    /// One sample observation per row.
    pub density_samples: DMatrix<f64>,
    pub obs_mean: DVector<f64>,
    /// Pure mode only: coefficients `c` with `⟨φ(y), c⟩ ≈ 1` over the
    /// training observations. Open-loop steps contract the observation mode
    /// with `c`; without it the observation is traced out in feature space.
    pub marginalizer: Option<DVector<f64>>,
    pub refined: bool,
}

#[derive(Debug, Clone)]
pub struct HqmmModel {
    parts: ModelParts,
    state_dim: usize,
    obs_feature_dim: usize,
    /// `φ(sample_i)` as columns.
    sample_features: DMatrix<f64>,
}

impl PartialEq for HqmmModel {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (&self.parts, &other.parts);
        a.config == b.config
            && a.mode == b.mode
            && a.tensor == b.tensor
            && a.obs_map == b.obs_map
            && a.history_map == b.history_map
            && a.future_map == b.future_map
            && a.initial_state == b.initial_state
            && a.density_samples == b.density_samples
            && a.obs_mean == b.obs_mean
            && a.marginalizer == b.marginalizer
            && a.refined == b.refined
    }
}

impl HqmmModel {
    pub fn new(parts: ModelParts) -> Result<Self> {
        let dy = parts.obs_map.dim();
        let (p, expected_obs) = match parts.mode {
            Mode::Pure => (parts.tensor.in_dim(), dy),
            Mode::Mixed => (square_side(parts.tensor.in_dim())?, dy * dy),
        };
        check_dim("tensor observation mode", expected_obs, parts.tensor.obs_dim())?;
        check_dim("tensor output mode", parts.tensor.in_dim(), parts.tensor.out_dim())?;
        check_dim("initial state", parts.tensor.in_dim(), parts.initial_state.len())?;
        check_dim("density sample dimension", parts.obs_map.input_dim(), parts.density_samples.ncols())?;
        check_dim("observation mean", parts.obs_map.input_dim(), parts.obs_mean.len())?;
        if parts.density_samples.nrows() == 0 {
            return Err(Error::InvalidInput("model needs at least one density sample".into()));
        }
        if let Some(c) = &parts.marginalizer {
            if parts.mode != Mode::Pure {
                return Err(Error::InvalidInput("a marginalizer applies to pure-mode models only".into()));
            }
            check_dim("marginalizer", dy, c.len())?;
        }
        let sample_features = parts.obs_map.embed_rows(&parts.density_samples)?.into_features();
        let model = Self {
            parts,
            state_dim: p,
            obs_feature_dim: dy,
            sample_features,
        };
        let init = model.initial_filter_state();
        init.validate(1e-6)?;
        Ok(model)
    }

    /// An HMM written as a mixed-mode model over one-hot symbols. The state
    /// is the predictive distribution of the current hidden state, stored
    /// as a diagonal density.
    pub fn from_hmm(hmm: &Hmm) -> Result<Self> {
        let (n, m) = (hmm.states(), hmm.symbols());
        let t = hmm.transition().entries();
        let o = hmm.emission().entries();
        let mut c = DMatrix::zeros(n * n * m * m, n * n);
        for a in 0..n {
            for b in 0..m {
                for cc in 0..n {
                    c[((a + n * a) * m * m + (b + m * b), cc + n * cc)] = t[(a, cc)] * o[(b, cc)];
                }
            }
        }
        let symbols = DMatrix::from_fn(m, 1, |i, _| i as f64);
        let mean = hmm.stationary_emission().iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        Self::new(ModelParts {
            config: HqmmConfig {
                mode: Mode::Mixed,
                features: FeatureChoice::OneHot,
                symbols: m,
                ..HqmmConfig::default()
            },
            mode: Mode::Mixed,
            tensor: ConditionalTensor::new(c, n * n, m * m)?,
            obs_map: FeatureMap::one_hot(m, 1),
            history_map: None,
            future_map: None,
            initial_state: vectorize(&DMatrix::from_diagonal(hmm.initial())),
            density_samples: symbols,
            obs_mean: DVector::from_element(1, mean),
            marginalizer: None,
            refined: false,
        })
    }

    /// A pure-mode model from an explicit tensor, e.g. an isometry built
    /// for testing.
    pub fn from_tensor(
        tensor: ConditionalTensor,
        initial: DVector<f64>,
        obs_map: FeatureMap,
        density_samples: DMatrix<f64>,
    ) -> Result<Self> {
        let obs_mean = mean_row(&density_samples);
        Self::new(ModelParts {
            config: HqmmConfig::default(),
            mode: Mode::Pure,
            tensor,
            obs_map,
            history_map: None,
            future_map: None,
            initial_state: initial,
            density_samples,
            obs_mean,
            marginalizer: None,
            refined: false,
        })
    }

    pub fn parts(&self) -> &ModelParts {
        &self.parts
    }

    pub fn into_parts(self) -> ModelParts {
        self.parts
    }

    pub fn config(&self) -> &HqmmConfig {
        &self.parts.config
    }

    pub fn mode(&self) -> Mode {
        self.parts.mode
    }

    pub fn tensor(&self) -> &ConditionalTensor {
        &self.parts.tensor
    }

    pub fn obs_map(&self) -> &FeatureMap {
        &self.parts.obs_map
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.parts.initial_state
    }

    pub fn density_samples(&self) -> &DMatrix<f64> {
        &self.parts.density_samples
    }

    pub fn sample_features(&self) -> &DMatrix<f64> {
        &self.sample_features
    }

    pub fn obs_mean(&self) -> &DVector<f64> {
        &self.parts.obs_mean
    }

    pub fn is_refined(&self) -> bool {
        self.parts.refined
    }

    /// Side length `p` of the state density.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Observation feature dimension `Dy`.
    pub fn obs_feature_dim(&self) -> usize {
        self.obs_feature_dim
    }

    /// Raw observation dimension `d`.
    pub fn obs_dim(&self) -> usize {
        self.parts.obs_map.input_dim()
    }

    /// Number of symbols when observations are single one-hot symbols.
    pub fn symbols(&self) -> Option<usize> {
        match self.parts.obs_map.kind() {
            FeatureKind::OneHot(m) if m.width == 1 && self.parts.obs_map.projection().is_none() => Some(m.symbols),
            _ => None,
        }
    }

    /// Same model with a different tensor (used by refinement).
    pub fn with_tensor(&self, tensor: ConditionalTensor, refined: bool) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.tensor = tensor;
        parts.refined = refined;
        Self::new(parts)
    }

    pub fn initial_filter_state(&self) -> FilterState {
        match self.parts.mode {
            Mode::Pure => FilterState::pure(self.parts.initial_state.clone()),
            Mode::Mixed => FilterState {
                mu: self.parts.initial_state.clone(),
                kind: StateKind::Density,
                t: 0,
                last_density: f64::NAN,
            },
        }
    }

    pub fn embed_obs(&self, y: &[f64]) -> Result<DVector<f64>> {
        self.parts.obs_map.embed(y)
    }

    fn check_state(&self, state: &FilterState) -> Result<()> {
        let expected = match (self.parts.mode, state.kind) {
            (Mode::Pure, StateKind::Pure) => self.state_dim,
            (_, StateKind::Density) => self.state_dim * self.state_dim,
            (Mode::Mixed, StateKind::Pure) => {
                return Err(Error::InvalidInput("mixed-mode model needs a density state".into()))
            }
        };
        check_dim("filter state", expected, state.mu.len())
    }

    /// `K_b[a, c] = C[a·Dy + b, c]` (pure mode).
    fn kraus(&self, b: usize) -> DMatrix<f64> {
        let (p, dy) = (self.state_dim, self.obs_feature_dim);
        let c = self.parts.tensor.matrix();
        DMatrix::from_fn(p, p, |a, cc| c[(a * dy + b, cc)])
    }

    /// `K_φ = Σ_b φ_b K_b` (pure mode).
    fn kraus_for(&self, phi: &DVector<f64>) -> DMatrix<f64> {
        let (p, dy) = (self.state_dim, self.obs_feature_dim);
        let c = self.parts.tensor.matrix();
        let mut k = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in 0..dy {
                let w = phi[b];
                if w != 0.0 {
                    for cc in 0..p {
                        k[(a, cc)] += w * c[(a * dy + b, cc)];
                    }
                }
            }
        }
        k
    }

    /// Reduced observation density `ρ_Y` (`Dy × Dy`), so that the
    /// unnormalized density of features `φ` is `φᵀ ρ_Y φ`.
    pub fn reduced_obs_density(&self, state: &FilterState) -> Result<DMatrix<f64>> {
        self.check_state(state)?;
        let (p, dy) = (self.state_dim, self.obs_feature_dim);
        match (self.parts.mode, state.kind) {
            (Mode::Pure, StateKind::Pure) => {
                let m = self.parts.tensor.contract(&state.mu)?;
                Ok(m.tr_mul(&m))
            }
            (Mode::Pure, StateKind::Density) => {
                let rho = state.density_matrix();
                let c = self.parts.tensor.matrix();
                let mut out = DMatrix::zeros(dy, dy);
                for a in 0..p {
                    let ca = c.rows(a * dy, dy);
                    out += &ca * &rho * ca.transpose();
                }
                Ok(out)
            }
            (Mode::Mixed, _) => {
                let joint = self.parts.tensor.contract(&state.mu)?;
                let v = joint.tr_mul(&vec_identity::<f64>(p));
                let r = unvectorize(&v)?;
                Ok((&r + r.transpose()) * 0.5)
            }
        }
    }

    /// Unnormalized density for observation features `φ`.
    pub fn density_of_features(&self, state: &FilterState, phi: &DVector<f64>) -> Result<f64> {
        check_dim("observation features", self.obs_feature_dim, phi.len())?;
        if self.parts.mode == Mode::Pure && state.kind == StateKind::Pure {
            self.check_state(state)?;
            let m = self.parts.tensor.contract(&state.mu)?;
            return Ok((m * phi).norm_squared());
        }
        let r = self.reduced_obs_density(state)?;
        Ok(phi.dot(&(r * phi)))
    }

    /// Unnormalized (raw) observation density `f_Y(y)`.
    pub fn observation_density(&self, state: &FilterState, y: &[f64]) -> Result<f64> {
        self.density_of_features(state, &self.embed_obs(y)?)
    }

    /// Observation density clamped to `[0, 1]`, with a flag for clamping.
    pub fn observation_density_clamped(&self, state: &FilterState, y: &[f64]) -> Result<(f64, bool)> {
        let raw = self.observation_density(state, y)?;
        Ok(clamp_density(raw))
    }

    /// Extreme eigenvalues of the reduced observation density.
    pub fn density_bounds(&self, state: &FilterState) -> Result<(f64, f64)> {
        let eig = hermitian_eigenvalues(&self.reduced_obs_density(state)?);
        Ok((eig[0], eig[eig.len() - 1]))
    }

    /// Conditions on observation features.
    pub fn filter_features_step(&self, state: &FilterState, phi: &DVector<f64>) -> Result<FilterState> {
        self.check_state(state)?;
        check_dim("observation features", self.obs_feature_dim, phi.len())?;
        let (mu, kind, density) = match (self.parts.mode, state.kind) {
            (Mode::Pure, StateKind::Pure) => {
                let u = self.kraus_for(phi) * &state.mu;
                let f = u.norm_squared();
                if !(f > DENOMINATOR_TOL) {
                    return Err(Error::ZeroProbability(f));
                }
                (u.unscale(f.sqrt()), StateKind::Pure, f)
            }
            (Mode::Pure, StateKind::Density) => {
                let k = self.kraus_for(phi);
                let next = &k * state.density_matrix() * k.transpose();
                let f = next.trace();
                (vectorize(&normalize_or_project(next, f)?), StateKind::Density, f)
            }
            (Mode::Mixed, _) => {
                let joint = self.parts.tensor.contract(&state.mu)?;
                let unnorm = joint * vectorize(&(phi * phi.transpose()));
                let f = vec_identity::<f64>(self.state_dim).dot(&unnorm);
                (vectorize(&normalize_or_project(unvectorize(&unnorm)?, f)?), StateKind::Density, f)
            }
        };
        Ok(FilterState {
            mu,
            kind,
            t: state.t + 1,
            last_density: density,
        })
    }

    /// Conditions on a raw observation.
    pub fn filter_step(&self, state: &FilterState, y: &[f64]) -> Result<FilterState> {
        self.filter_features_step(state, &self.embed_obs(y)?)
    }

    /// Filters a whole sequence (one observation per row) from the initial
    /// state; returns the state after each observation.
    pub fn filter(&self, seq: &DMatrix<f64>) -> Result<Vec<FilterState>> {
        check_dim("sequence dimension", self.obs_dim(), seq.ncols())?;
        let mut state = self.initial_filter_state();
        let mut out = Vec::with_capacity(seq.nrows());
        for t in 0..seq.nrows() {
            let y: Vec<f64> = seq.row(t).iter().copied().collect();
            state = self.filter_step(&state, &y)?;
            out.push(state.clone());
        }
        Ok(out)
    }

    /// Transition without conditioning: the observation is traced out.
    pub fn transition_step(&self, state: &FilterState) -> Result<FilterState> {
        self.check_state(state)?;
        if let Some(c) = &self.parts.marginalizer {
            let k = self.kraus_for(c);
            if state.kind == StateKind::Pure {
                let u = k * &state.mu;
                let n = u.norm();
                if !(n * n > DENOMINATOR_TOL) {
                    return Err(Error::DegenerateState(format!("transition produced norm {n:e}")));
                }
                return Ok(FilterState {
                    mu: u.unscale(n),
                    ..state.clone()
                });
            }
            let next = &k * state.density_matrix() * k.transpose();
            let tr = next.trace();
            return Ok(FilterState {
                mu: vectorize(&normalize_or_project(next, tr)?),
                ..state.clone()
            });
        }
        let rho = match self.parts.mode {
            Mode::Pure => {
                let rho = state.density_matrix();
                let mut out = DMatrix::zeros(self.state_dim, self.state_dim);
                for b in 0..self.obs_feature_dim {
                    let k = self.kraus(b);
                    out += &k * &rho * k.transpose();
                }
                out
            }
            Mode::Mixed => {
                let joint = self.parts.tensor.contract(&state.mu)?;
                unvectorize(&(joint * vec_identity::<f64>(self.obs_feature_dim)))?
            }
        };
        let tr = rho.trace();
        if !(tr > DENOMINATOR_TOL) {
            return Err(Error::DegenerateState(format!("transition produced trace {tr:e}")));
        }
        Ok(FilterState {
            mu: vectorize(&project_to_density(&rho.unscale(tr))?),
            kind: StateKind::Density,
            t: state.t,
            last_density: state.last_density,
        })
    }

    /// Raw and clamped densities at the stored prediction samples.
    pub fn sample_densities(&self, state: &FilterState) -> Result<SampleDensities> {
        self.densities_at(state, &self.sample_features)
    }

    fn densities_at(&self, state: &FilterState, features: &DMatrix<f64>) -> Result<SampleDensities> {
        let raw: Vec<f64> = if self.parts.mode == Mode::Pure && state.kind == StateKind::Pure {
            self.check_state(state)?;
            let m = self.parts.tensor.contract(&state.mu)?;
            let v = m * features;
            v.column_iter().map(|c| c.norm_squared()).collect()
        } else {
            let r = self.reduced_obs_density(state)?;
            let rf = r * features;
            features.column_iter().zip(rf.column_iter()).map(|(a, b)| a.dot(&b)).collect()
        };
        let mut violations = 0;
        let clamped = raw
            .iter()
            .map(|&f| {
                let (c, v) = clamp_density(f);
                violations += v as usize;
                c
            })
            .collect();
        Ok(SampleDensities {
            raw,
            clamped,
            violations,
        })
    }

    /// Density-weighted mean of the stored samples.
    pub fn point_predict(&self, state: &FilterState) -> Result<Prediction> {
        let d = self.sample_densities(state)?;
        weighted_mean(&self.parts.density_samples, &d)
    }

    /// Density-weighted mean of caller-supplied samples (one per row).
    pub fn point_predict_with(&self, state: &FilterState, samples: &DMatrix<f64>) -> Result<Prediction> {
        if samples.nrows() == 0 {
            return Err(Error::InvalidInput("point prediction needs at least one sample".into()));
        }
        let feats = self.parts.obs_map.embed_rows(samples)?.into_features();
        let d = self.densities_at(state, &feats)?;
        weighted_mean(samples, &d)
    }

    /// `horizon − 1` transition-only steps, then a point prediction.
    pub fn predict_horizon(&self, state: &FilterState, horizon: usize) -> Result<Prediction> {
        Ok(self.predict_curve(state, horizon)?.pop().expect("horizon >= 1"))
    }

    /// Point predictions for every step `1..=horizon` of an open-loop rollout.
    pub fn predict_curve(&self, state: &FilterState, horizon: usize) -> Result<Vec<Prediction>> {
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be >= 1".into()));
        }
        let mut out = Vec::with_capacity(horizon);
        let mut s = state.clone();
        for step in 0..horizon {
            if step > 0 {
                s = self.transition_step(&s)?;
            }
            out.push(self.point_predict(&s)?);
        }
        Ok(out)
    }

    /// Normalized predictive distribution over symbols (discrete models).
    pub fn symbol_distribution(&self, state: &FilterState) -> Result<DVector<f64>> {
        let m = self
            .symbols()
            .ok_or_else(|| Error::InvalidInput("symbol distribution needs a one-hot observation map".into()))?;
        let feats = DMatrix::identity(m, m);
        let d = self.densities_at(state, &feats)?;
        let total: f64 = d.clamped.iter().sum();
        if !(total > DENOMINATOR_TOL) {
            return Err(Error::ZeroProbability(total));
        }
        Ok(DVector::from_iterator(m, d.clamped.iter().map(|f| f / total)))
    }

    /// Row `t`, column `g`: marginal density of feature `feature` at
    /// `grid[g]` under `states[t]`, normalized per row. Other features are
    /// averaged over `draws` rows of `background`.
    pub fn marginal_density_grid(
        &self,
        states: &[FilterState],
        feature: usize,
        grid: &[f64],
        background: &DMatrix<f64>,
        draws: usize,
        seed: u64,
    ) -> Result<DMatrix<f64>> {
        let d = self.obs_dim();
        if feature >= d {
            return Err(Error::InvalidInput(format!("feature index {feature} out of range {d}")));
        }
        if grid.is_empty() {
            return Err(Error::InvalidInput("grid is empty".into()));
        }
        check_dim("background dimension", d, background.ncols())?;
        let fillers: Vec<DVector<f64>> = if d == 1 {
            vec![DVector::zeros(1)]
        } else {
            if background.nrows() == 0 {
                return Err(Error::InvalidInput("marginalization needs background samples".into()));
            }
            let mut rng = seeded_rng(seed);
            (0..draws.max(1))
                .map(|_| background.row(rng.random_range(0..background.nrows())).transpose())
                .collect()
        };
        let points: Vec<Vec<f64>> = grid
            .iter()
            .flat_map(|&v| {
                fillers.iter().map(move |f| {
                    let mut y: Vec<f64> = f.iter().copied().collect();
                    y[feature] = v;
                    y
                })
            })
            .collect();
        let cols: Vec<DVector<f64>> = points
            .par_iter()
            .map(|y| self.embed_obs(y))
            .collect::<Result<_>>()?;
        let feats = DMatrix::from_columns(&cols);
        let per = fillers.len();
        let rows: Vec<Vec<f64>> = states
            .par_iter()
            .map(|s| {
                let dens = self.densities_at(s, &feats)?;
                let mut row: Vec<f64> = dens.clamped.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|x| *x /= total);
                } else {
                    let u = 1.0 / row.len() as f64;
                    row.iter_mut().for_each(|x| *x = u);
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(states.len(), grid.len(), |t, g| rows[t][g]))
    }

    /// Mixed-mode copy of a pure-mode model:
    /// `C'[(a + p a')·Dy² + (b + Dy b'), c + p c'] = C[a·Dy + b, c] · C[a'·Dy + b', c']`.
    pub fn lift_to_mixed(&self) -> Result<Self> {
        if self.parts.mode != Mode::Pure {
            return Err(Error::InvalidInput("model is already mixed".into()));
        }
        let (p, dy) = (self.state_dim, self.obs_feature_dim);
        let c = self.parts.tensor.matrix();
        let mut out = DMatrix::zeros(p * p * dy * dy, p * p);
        for a in 0..p {
            for ap in 0..p {
                for b in 0..dy {
                    for bp in 0..dy {
                        let row = (a + p * ap) * dy * dy + (b + dy * bp);
                        for cc in 0..p {
                            let x = c[(a * dy + b, cc)];
                            if x == 0.0 {
                                continue;
                            }
                            for cp in 0..p {
                                out[(row, cc + p * cp)] = x * c[(ap * dy + bp, cp)];
                            }
                        }
                    }
                }
            }
        }
        let psi = &self.parts.initial_state;
        let mut parts = self.parts.clone();
        parts.mode = Mode::Mixed;
        parts.config.mode = Mode::Mixed;
        parts.tensor = ConditionalTensor::new(out, p * p, dy * dy)?;
        parts.initial_state = vectorize(&(psi * psi.transpose()));
        parts.marginalizer = None;
        Self::new(parts)
    }
}

/// Two-step update: transition `A` on vectorized states, then an
/// observation tensor `B` producing the joint state to condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub transition: DMatrix<f64>,
    pub observation: ConditionalTensor,
}

impl SplitModel {
    /// `μ' ∝ (B ×₃ (A μ)) ρ⃗_y`.
    pub fn filter_step(&self, mu: &DVector<f64>, rho_y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        check_dim("split transition", self.transition.ncols(), mu.len())?;
        let predicted = &self.transition * mu;
        let joint = self.observation.contract(&predicted)?;
        let unnorm = joint * rho_y;
        let n = square_side(unnorm.len())?;
        let f = vec_identity::<f64>(n).dot(&unnorm);
        if !(f > DENOMINATOR_TOL) {
            return Err(Error::ZeroProbability(f));
        }
        Ok((unnorm.unscale(f), f))
    }

    /// Single tensor `C = B ∘ A` equivalent to the two-step update.
    pub fn compose(&self) -> Result<ConditionalTensor> {
        check_dim("split composition", self.observation.in_dim(), self.transition.nrows())?;
        ConditionalTensor::new(
            self.observation.matrix() * &self.transition,
            self.observation.out_dim(),
            self.observation.obs_dim(),
        )
    }
}

/// `m / f` projected to a density. A learned operator can produce a
/// non-positive trace; then `m` itself is projected, which fails only if it
/// is numerically zero.
fn normalize_or_project(m: DMatrix<f64>, f: f64) -> Result<DMatrix<f64>> {
    if f > DENOMINATOR_TOL {
        return project_to_density(&m.unscale(f));
    }
    let scale = m.amax();
    if !(scale > DENOMINATOR_TOL) || !scale.is_finite() {
        return Err(Error::ZeroProbability(f));
    }
    project_to_density(&m.unscale(scale))
}

fn clamp_density(raw: f64) -> (f64, bool) {
    if raw < 0.0 || !raw.is_finite() {
        (0.0, true)
    } else if raw > 1.0 {
        (1.0, true)
    } else {
        (raw, false)
    }
}

fn weighted_mean(samples: &DMatrix<f64>, d: &SampleDensities) -> Result<Prediction> {
    let total: f64 = d.clamped.iter().sum();
    if !(total > DENOMINATOR_TOL) {
        return Err(Error::ZeroProbability(total));
    }
    let mut value = DVector::zeros(samples.ncols());
    for (i, w) in d.clamped.iter().enumerate() {
        if *w != 0.0 {
            value += samples.row(i).transpose() * (*w / total);
        }
    }
    Ok(Prediction {
        value,
        violations: d.violations,
    })
}

pub(crate) fn mean_row(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(m.ncols());
    }
    m.row_mean().transpose()
}

/// Picks `count` training rows (all rows when `count` is 0 or larger than
/// the pool) plus `hull` random midpoints-with-random-weight of pairs.
pub fn choose_density_samples(pool: &DMatrix<f64>, count: usize, hull: usize, seed: u64) -> DMatrix<f64> {
    let n = pool.nrows();
    let mut rng = seeded_rng(seed);
    let mut idx: Vec<usize> = if count == 0 || count >= n {
        (0..n).collect()
    } else {
        let mut v = sample(&mut rng, n, count).into_vec();
        v.sort_unstable();
        v
    };
    idx.dedup();
    let mut rows: Vec<DVector<f64>> = idx.iter().map(|&i| pool.row(i).transpose()).collect();
    if n > 0 {
        for _ in 0..hull {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            let w: f64 = rng.random();
            rows.push(pool.row(i).transpose() * w + pool.row(j).transpose() * (1.0 - w));
        }
    }
    if rows.is_empty() {
        return DMatrix::zeros(0, pool.ncols());
    }
    DMatrix::from_fn(rows.len(), pool.ncols(), |i, j| rows[i][j])
}

/// A random pure-mode tensor whose slices satisfy `Σ_b K_bᵀ K_b = I`.
pub fn random_isometry_tensor<R: Rng + ?Sized>(p: usize, dy: usize, rng: &mut R) -> ConditionalTensor {
    let g = crate::quantum::random::real_gaussian(p * dy, p, rng);
    let q = g.qr().q();
    ConditionalTensor::new(q, p, dy).expect("shape matches")
}
