//! Two-stage regression and truncated-BPTT refinement.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::features::{median_bandwidth, FeatureMap, RffMap};
use crate::inference::{fit_conditional, ridge_solve, ConditionalOperator, ConditionalTensor};
use crate::model::{
    choose_density_samples, mean_row, FeatureChoice, HqmmConfig, HqmmModel, Loss, Mode, ModelParts,
};
use crate::quantum::{project_to_density, unvectorize, vectorize};

/// Largest tensor (entries) a mixed-mode model may have.
const MAX_MIXED_ENTRIES: usize = 20_000_000;

/// Raw stacked windows, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedFeatures {
    /// `y_{t−k}, …, y_{t−1}`.
    pub history: DMatrix<f64>,
    /// `y_t, …, y_{t+k}`.
    pub future: DMatrix<f64>,
    /// `y_{t+1}, …, y_{t+k+1}`.
    pub shifted: DMatrix<f64>,
    /// `y_t`.
    pub obs: DMatrix<f64>,
    pub window: usize,
    /// Rows belonging to each input sequence (sequences too short for a
    /// single window contribute nothing).
    pub segments: Vec<Range<usize>>,
}

impl WindowedFeatures {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stack(seq: &DMatrix<f64>, start: usize, count: usize) -> Vec<f64> {
    (start..start + count).flat_map(|r| seq.row(r).iter().copied().collect::<Vec<_>>()).collect()
}

/// Windows for every `t` in `[k, T − k − 2]` of every sequence.
pub fn build_windows(sequences: &[DMatrix<f64>], k: usize) -> Result<WindowedFeatures> {
    if k == 0 {
        return Err(Error::InvalidInput("window must be >= 1".into()));
    }
    let d = sequences.first().map_or(0, |s| s.ncols());
    let (mut h, mut f, mut s, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut segments = Vec::new();
    let mut count = 0;
    let mut longest = 0;
    for seq in sequences {
        check_dim("sequence dimension", d, seq.ncols())?;
        longest = longest.max(seq.nrows());
        let start = count;
        if seq.nrows() >= 2 * k + 2 {
            for t in k..=seq.nrows() - k - 2 {
                h.push(stack(seq, t - k, k));
                f.push(stack(seq, t, k + 1));
                s.push(stack(seq, t + 1, k + 1));
                y.push(stack(seq, t, 1));
                count += 1;
            }
        }
        segments.push(start..count);
    }
    if count == 0 {
        return Err(Error::SequenceTooShort {
            len: longest,
            needed: 2 * k + 1,
        });
    }
    let to_matrix = |rows: Vec<Vec<f64>>, width: usize| {
        DMatrix::from_row_iterator(rows.len(), width, rows.into_iter().flatten())
    };
    Ok(WindowedFeatures {
        history: to_matrix(h, k * d),
        future: to_matrix(f, (k + 1) * d),
        shifted: to_matrix(s, (k + 1) * d),
        obs: to_matrix(y, d),
        window: k,
        segments,
    })
}

/// Feature maps for the three streams; future and shifted future share one.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMaps {
    pub history: FeatureMap,
    pub future: FeatureMap,
    pub obs: FeatureMap,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn segment_rows(m: &DMatrix<f64>, segments: &[Range<usize>]) -> Vec<DMatrix<f64>> {
    segments
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| m.rows(r.start, r.len()).into_owned())
        .collect()
}

/// Number of symbols in integer-coded data.
pub fn infer_symbols(sequences: &[DMatrix<f64>]) -> Result<usize> {
    let mut max = 0usize;
    for seq in sequences {
        for &v in seq.iter() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidInput(format!("{v} is not a symbol index")));
            }
            max = max.max(v as usize);
        }
    }
    Ok(max + 1)
}

/// Samples the random features (bandwidths by the median heuristic unless
/// configured) and fits the principal-direction projections.
pub fn fit_stream_maps(wf: &WindowedFeatures, config: &HqmmConfig, symbols: usize) -> Result<StreamMaps> {
    let k = wf.window;
    let d = wf.obs.ncols();
    let (history, future, obs) = match config.features {
        FeatureChoice::OneHot => (
            FeatureMap::one_hot(symbols, k),
            FeatureMap::one_hot(symbols, k + 1),
            FeatureMap::one_hot(symbols, 1),
        ),
        FeatureChoice::Rff => {
            let bw = |m: &DMatrix<f64>| -> Result<f64> {
                match config.bandwidth {
                    Some(b) => Ok(b),
                    None => median_bandwidth(&segment_rows(m, &wf.segments)),
                }
            };
            let d_count = config.feature_count;
            (
                FeatureMap::rff(RffMap::sample(k * d, d_count, bw(&wf.history)?, stream_seed(config.seed, 1))?),
                FeatureMap::rff(RffMap::sample((k + 1) * d, d_count, bw(&wf.future)?, stream_seed(config.seed, 2))?),
                FeatureMap::rff(RffMap::sample(d, d_count, bw(&wf.obs)?, stream_seed(config.seed, 3))?),
            )
        }
    };
    Ok(StreamMaps {
        history: history.fit_projection(&wf.history, config.state_size)?,
        future: future.fit_projection(&wf.future, config.state_size)?,
        obs: obs.fit_projection(&wf.obs, config.state_size)?,
    })
}

/// Embedded windows, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedWindows {
    pub mode: Mode,
    pub history: DMatrix<f64>,
    pub future: DMatrix<f64>,
    pub shifted: DMatrix<f64>,
    pub obs: DMatrix<f64>,
}

/// Unit feature columns (pure) or vectorized rank-one densities (mixed).
pub fn embed_windows(wf: &WindowedFeatures, maps: &StreamMaps, mode: Mode) -> Result<EmbeddedWindows> {
    let embed = |map: &FeatureMap, rows: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let e = map.embed_rows(rows)?;
        Ok(match mode {
            Mode::Pure => e.into_features(),
            Mode::Mixed => e.to_densities().into_features(),
        })
    };
    Ok(EmbeddedWindows {
        mode,
        history: embed(&maps.history, &wf.history)?,
        future: embed(&maps.future, &wf.future)?,
        shifted: embed(&maps.future, &wf.shifted)?,
        obs: embed(&maps.obs, &wf.obs)?,
    })
}

/// Columns `s_t ⊗ y_t`.
pub fn extended_future(s: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("extended future sample count", s.ncols(), y.ncols())?;
    let (ps, py) = (s.nrows(), y.nrows());
    let mut out = DMatrix::zeros(ps * py, s.ncols());
    for t in 0..s.ncols() {
        for a in 0..ps {
            let sa = s[(a, t)];
            for b in 0..py {
                out[(a * py + b, t)] = sa * y[(b, t)];
            }
        }
    }
    Ok(out)
}

/// `Σ_t (s_t ⊗ y_t) q_t` without forming the extended-future matrix;
/// `q` has one row per sample.
pub fn extended_future_product(s: &DMatrix<f64>, y: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("extended future sample count", s.ncols(), y.ncols())?;
    check_dim("extended future weights", s.ncols(), q.nrows())?;
    let (ps, py) = (s.nrows(), y.nrows());
    let blocks: Vec<DMatrix<f64>> = (0..ps)
        .into_par_iter()
        .map(|a| {
            // Y diag(s[a, :]) Q
            let mut weighted = q.clone();
            for (t, mut row) in weighted.row_iter_mut().enumerate() {
                row *= s[(a, t)];
            }
            y * weighted
        })
        .collect();
    let mut out = DMatrix::zeros(ps * py, q.ncols());
    for (a, block) in blocks.into_iter().enumerate() {
        out.rows_mut(a * py, py).copy_from(&block);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1 {
    pub future_given_history: ConditionalOperator,
    pub extended_given_history: ConditionalOperator,
    /// `C_{f|h} Υ_h`.
    pub denoised_future: DMatrix<f64>,
    /// `C_{s,y|h} Υ_h`.
    pub denoised_extended: DMatrix<f64>,
}

/// Ridge-regresses future and extended future on history.
pub fn stage1(emb: &EmbeddedWindows, lambda: f64) -> Result<Stage1> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("stage 1 needs lambda > 0, got {lambda}")));
    }
    let h = &emb.history;
    let c_f = fit_conditional(&emb.future, h, lambda)?;
    // C_{sy|h} = Γ Hᵀ (H Hᵀ + λI)⁻¹ with Γ Hᵀ accumulated directly.
    let cross = extended_future_product(&emb.shifted, &emb.obs, &h.transpose())?;
    let cov = h * h.transpose();
    let c_sy = ridge_solve(&cov, lambda, &cross.transpose())?.transpose();
    let denoised_future = c_f.matrix() * h;
    let denoised_extended = &c_sy * h;
    Ok(Stage1 {
        future_given_history: c_f,
        extended_given_history: ConditionalOperator::new(c_sy, lambda)?,
        denoised_future,
        denoised_extended,
    })
}

/// `C = Γ̃ Ũᵀ (Ũ Ũᵀ + λI)⁻¹`, reshaped to a tensor with output mode of
/// the future dimension and observation mode of the `obs_dim`.
pub fn stage2(s1: &Stage1, obs_dim: usize, lambda: f64) -> Result<ConditionalTensor> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("stage 2 needs lambda > 0, got {lambda}")));
    }
    let u = &s1.denoised_future;
    let g = &s1.denoised_extended;
    let ct = ridge_solve(&(u * u.transpose()), lambda, &(u * g.transpose()))?;
    let p = u.nrows();
    ConditionalTensor::new(ct.transpose(), p, obs_dim)
}

/// Ridge coefficients `c` fitting `⟨φ_t, c⟩ = 1` over feature columns.
pub fn fit_marginalizer(phi: &DMatrix<f64>, lambda: f64) -> Result<DVector<f64>> {
    let ones = DMatrix::from_element(phi.ncols(), 1, 1.0);
    let c = ridge_solve(&(phi * phi.transpose()), lambda, &(phi * ones))?;
    Ok(c.column(0).into_owned())
}

/// Pure: normalized mean of the denoised states. Mixed: nearest density to
/// the mean.
fn initial_state(denoised: &DMatrix<f64>, mode: Mode) -> Result<DVector<f64>> {
    let mean = denoised.column_mean();
    match mode {
        Mode::Pure => {
            let n = mean.norm();
            if !(n > 1e-300) {
                return Err(Error::DegenerateState("mean denoised state is zero".into()));
            }
            Ok(mean.unscale(n))
        }
        Mode::Mixed => Ok(vectorize(&project_to_density(&unvectorize(&mean)?)?)),
    }
}

fn training_pool(sequences: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = sequences.first().map_or(0, |s| s.ncols());
    let rows: usize = sequences.iter().map(|s| s.nrows()).sum();
    let mut out = DMatrix::zeros(rows, d);
    let mut r = 0;
    for s in sequences {
        out.rows_mut(r, s.nrows()).copy_from(s);
        r += s.nrows();
    }
    out
}

/// End-to-end two-stage regression.
pub fn train_2sr(sequences: &[DMatrix<f64>], config: &HqmmConfig) -> Result<HqmmModel> {
    config.validate()?;
    let wf = build_windows(sequences, config.window)?;
    let symbols = match config.features {
        FeatureChoice::OneHot if config.symbols > 0 => config.symbols,
        FeatureChoice::OneHot => infer_symbols(sequences)?,
        FeatureChoice::Rff => 0,
    };
    let maps = fit_stream_maps(&wf, config, symbols)?;
    if config.mode == Mode::Mixed {
        let (p, dy) = (maps.future.dim(), maps.obs.dim());
        let entries = p.pow(4) * dy * dy;
        if entries > MAX_MIXED_ENTRIES {
            return Err(Error::InvalidInput(format!(
                "mixed-mode tensor would have {entries} entries; lower state_size"
            )));
        }
    }
    let emb = embed_windows(&wf, &maps, config.mode)?;
    let s1 = stage1(&emb, config.lambda)?;
    let tensor = stage2(&s1, emb.obs.nrows(), config.lambda)?;
    let init = initial_state(&s1.denoised_future, config.mode)?;
    let pool = training_pool(sequences);
    let density_samples = match config.features {
        FeatureChoice::OneHot => DMatrix::from_fn(symbols, 1, |i, _| i as f64),
        FeatureChoice::Rff => {
            choose_density_samples(&pool, config.n_density_samples, config.hull_samples, stream_seed(config.seed, 4))
        }
    };
    let mut cfg = config.clone();
    cfg.symbols = symbols;
    HqmmModel::new(ModelParts {
        config: cfg,
        mode: config.mode,
        tensor,
        obs_map: maps.obs,
        history_map: Some(maps.history),
        future_map: Some(maps.future),
        initial_state: init,
        density_samples,
        obs_mean: mean_row(&pool),
        marginalizer: match config.mode {
            Mode::Pure => Some(fit_marginalizer(&emb.obs, config.lambda)?),
            Mode::Mixed => None,
        },
        refined: false,
    })
}

/// Per-chunk loss, gradient with respect to the tensor matrix, and the
/// state after the chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkGradient {
    pub loss: f64,
    pub gradient: DMatrix<f64>,
    pub final_state: DVector<f64>,
}

fn contract_pure(c: &DMatrix<f64>, psi: &DVector<f64>, p: usize, dy: usize) -> DMatrix<f64> {
    let flat = c * psi;
    DMatrix::from_row_slice(p, dy, flat.as_slice())
}

/// Row-major flattening, matching the tensor's row index `a·Dy + b`.
fn flatten_rows(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.transpose().as_slice())
}

/// Loss term of one point prediction from `m = C ×₃ ψ` and its gradient
/// with respect to `m`, scaled by `weight`.
fn prediction_term(
    m: &DMatrix<f64>,
    feats: &DMatrix<f64>,
    samples: &DMatrix<f64>,
    target: &[f64],
    loss: Loss,
    weight: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let mut v = m * feats;
    let f: Vec<f64> = v.column_iter().map(|col| col.norm_squared()).collect();
    let clamped: Vec<f64> = f.iter().map(|&x| x.min(1.0)).collect();
    let big_f: f64 = clamped.iter().sum();
    if !(big_f > 0.0) {
        return Err(Error::ZeroProbability(big_f));
    }
    // dloss/df̃_i
    let mut g_ft = vec![0.0; f.len()];
    let value = match loss {
        Loss::Mse => {
            let mut yhat = DVector::zeros(samples.ncols());
            for (i, w) in clamped.iter().enumerate() {
                yhat += samples.row(i).transpose() * (*w / big_f);
            }
            let err = &yhat - DVector::from_column_slice(target);
            let g_yhat = &err * (2.0 * weight);
            for (i, g) in g_ft.iter_mut().enumerate() {
                let diff = samples.row(i).transpose() - &yhat;
                *g = g_yhat.dot(&diff) / big_f;
            }
            err.norm_squared() * weight
        }
        Loss::CrossEntropy => {
            let y = target[0].round() as usize;
            if y >= clamped.len() || !(clamped[y] > 0.0) {
                return Err(Error::ZeroProbability(clamped.get(y).copied().unwrap_or(0.0)));
            }
            for g in g_ft.iter_mut() {
                *g = weight / big_f;
            }
            g_ft[y] -= weight / clamped[y];
            -(clamped[y] / big_f).ln() * weight
        }
    };
    // Clamped densities pass no gradient; df_i/dV_i = 2 V_i.
    for (i, mut col) in v.column_iter_mut().enumerate() {
        col *= if f[i] < 1.0 { 2.0 * g_ft[i] } else { 0.0 };
    }
    Ok((value, v * feats.transpose()))
}

struct RolloutTape {
    /// States `r_1 = ψ_j, r_2, …` of the open-loop rollout.
    states: Vec<DVector<f64>>,
    /// Norm of the unnormalized vector that produced `states[i]` (unused for `i = 0`).
    norms: Vec<f64>,
    pred_grads: Vec<DMatrix<f64>>,
    phi: DVector<f64>,
    next: DVector<f64>,
    next_norm: f64,
}

/// Loss and analytic gradient over one stretch of a stream.
///
/// The filter consumes the first `steps` rows of `rows` starting from the
/// unit state `init`. From the state before row `j`, open-loop predictions
/// for rows `j, …, j + horizon − 1` (those that exist) are scored; rows
/// after `steps` only serve as targets. The loss is the mean over scored
/// predictions (MSE also averages over coordinates).
pub fn rollout_loss_and_grad(
    model: &HqmmModel,
    c: &DMatrix<f64>,
    init: &DVector<f64>,
    rows: &DMatrix<f64>,
    steps: usize,
    horizon: usize,
    loss: Loss,
) -> Result<ChunkGradient> {
    let (p, dy) = (model.state_dim(), model.obs_feature_dim());
    check_dim("tensor rows", p * dy, c.nrows())?;
    check_dim("tensor cols", p, c.ncols())?;
    check_dim("chunk dimension", model.obs_dim(), rows.ncols())?;
    if steps == 0 || steps > rows.nrows() || horizon == 0 {
        return Err(Error::InvalidInput("chunk needs 1 <= steps <= rows and horizon >= 1".into()));
    }
    let marginalizer = match (horizon, model.parts().marginalizer.as_ref()) {
        (1, _) => None,
        (_, Some(m)) => Some(m),
        (_, None) => {
            return Err(Error::InvalidInput("multi-step loss needs a model with a marginalizer".into()))
        }
    };
    let samples = model.density_samples();
    let feats = model.sample_features();
    let terms: usize = (0..steps).map(|j| horizon.min(rows.nrows() - j)).sum();
    let weight = match loss {
        Loss::Mse => 1.0 / (terms * rows.ncols()) as f64,
        Loss::CrossEntropy => 1.0 / terms as f64,
    };
    let row = |r: usize| -> Vec<f64> { rows.row(r).iter().copied().collect() };

    let mut tape = Vec::with_capacity(steps);
    let mut psi = init.clone();
    let mut total = 0.0;
    for j in 0..steps {
        let n = horizon.min(rows.nrows() - j);
        let mut states = vec![psi.clone()];
        let mut norms = vec![1.0];
        let mut pred_grads = Vec::with_capacity(n);
        let mut m = contract_pure(c, &psi, p, dy);
        let m_psi = m.clone();
        for i in 0..n {
            let (value, g) = prediction_term(&m, feats, samples, &row(j + i), loss, weight)?;
            total += value;
            pred_grads.push(g);
            if i + 1 < n {
                let u = &m * marginalizer.expect("horizon > 1");
                let norm = u.norm();
                if !(norm * norm > crate::inference::DENOMINATOR_TOL) {
                    return Err(Error::ZeroProbability(norm * norm));
                }
                let r = u.unscale(norm);
                m = contract_pure(c, &r, p, dy);
                states.push(r);
                norms.push(norm);
            }
        }
        let phi = model.embed_obs(&row(j))?;
        let u = m_psi * &phi;
        let next_norm = u.norm();
        if !(next_norm * next_norm > crate::inference::DENOMINATOR_TOL) {
            return Err(Error::ZeroProbability(next_norm * next_norm));
        }
        let next = u.unscale(next_norm);
        tape.push(RolloutTape {
            states,
            norms,
            pred_grads,
            phi,
            next: next.clone(),
            next_norm,
        });
        psi = next;
    }

    let mut grad = DMatrix::zeros(p * dy, p);
    let mut g_next = DVector::zeros(p);
    for step in tape.iter().rev() {
        // Gradient wrt the unnormalized vector behind the following rollout state.
        let mut g_u: Option<DVector<f64>> = None;
        for i in (0..step.states.len()).rev() {
            let mut g_m = step.pred_grads[i].clone();
            if let (Some(gu), Some(mg)) = (&g_u, marginalizer) {
                g_m += gu * mg.transpose();
            }
            if i == 0 {
                let g_uf = (&g_next - &step.next * step.next.dot(&g_next)).unscale(step.next_norm);
                g_m += g_uf * step.phi.transpose();
            }
            let flat = flatten_rows(&g_m);
            let r = &step.states[i];
            grad.ger(1.0, &flat, r, 1.0);
            let g_r = c.tr_mul(&flat);
            if i == 0 {
                g_next = g_r;
            } else {
                g_u = Some((&g_r - r * r.dot(&g_r)).unscale(step.norms[i]));
            }
        }
    }
    Ok(ChunkGradient {
        loss: total,
        gradient: grad,
        final_state: psi,
    })
}

/// Loss only, for finite-difference checks.
pub fn chunk_loss(model: &HqmmModel, c: &DMatrix<f64>, init: &DVector<f64>, chunk: &DMatrix<f64>, loss: Loss) -> Result<f64> {
    Ok(chunk_loss_and_grad(model, c, init, chunk, loss)?.loss)
}

/// One-step loss over all rows of `chunk`, with its analytic gradient.
pub fn chunk_loss_and_grad(
    model: &HqmmModel,
    c: &DMatrix<f64>,
    init: &DVector<f64>,
    chunk: &DMatrix<f64>,
    loss: Loss,
) -> Result<ChunkGradient> {
    rollout_loss_and_grad(model, c, init, chunk, chunk.nrows(), 1, loss)
}

/// Central finite difference of `f` at one tensor coordinate.
pub fn finite_difference<F>(c: &DMatrix<f64>, coord: (usize, usize), h: f64, f: F) -> Result<f64>
where
    F: Fn(&DMatrix<f64>) -> Result<f64>,
{
    let mut plus = c.clone();
    plus[coord] += h;
    let mut minus = c.clone();
    minus[coord] -= h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

/// Rescales `g` to Frobenius norm at most `max_norm`; returns the norm
/// after clipping.
pub fn clip_gradient(g: &mut DMatrix<f64>, max_norm: f64) -> f64 {
    let n = g.norm();
    if n > max_norm {
        *g *= max_norm / n;
        max_norm
    } else {
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpttReport {
    /// Mean chunk loss per epoch (before each update).
    pub epoch_losses: Vec<f64>,
    /// Largest post-clip gradient norm seen.
    pub max_clipped_norm: f64,
    pub updates: usize,
}

/// Splits sequences into at least `batch` streams of contiguous rows.
fn make_streams(sequences: &[DMatrix<f64>], batch: usize) -> Vec<DMatrix<f64>> {
    let per = batch.div_ceil(sequences.len().max(1)).max(1);
    let mut out = Vec::new();
    for seq in sequences {
        let n = seq.nrows();
        let pieces = per.min(n.max(1));
        let len = n.div_ceil(pieces);
        let mut start = 0;
        while start < n {
            let l = len.min(n - start);
            if l >= 2 {
                out.push(seq.rows(start, l).into_owned());
            }
            start += l;
        }
    }
    out
}

/// Truncated BPTT with SGD on the tensor; feature maps stay frozen.
pub fn bptt_refine(
    model: &HqmmModel,
    sequences: &[DMatrix<f64>],
    config: &HqmmConfig,
) -> Result<(HqmmModel, BpttReport)> {
    if model.mode() != Mode::Pure {
        return Err(Error::InvalidInput("refinement supports pure-mode models only".into()));
    }
    config.validate()?;
    let streams = make_streams(sequences, config.batch_size);
    if streams.is_empty() {
        return Err(Error::InvalidInput("no training data for refinement".into()));
    }
    let horizon = config.bptt_horizon;
    let max_chunks = streams.iter().map(|s| s.nrows().div_ceil(horizon)).max().unwrap_or(0);
    let mut c = model.tensor().matrix().clone();
    let mut report = BpttReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        max_clipped_norm: 0.0,
        updates: 0,
    };
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_chunks = 0usize;
        let mut batch_index = 0;
        for group in streams.chunks(config.batch_size) {
            let mut states: Vec<DVector<f64>> = vec![model.initial_state().clone(); group.len()];
            for chunk_idx in 0..max_chunks {
                // (stream, rows including lookahead targets, filtered steps)
                let jobs: Vec<(usize, DMatrix<f64>, usize)> = group
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| {
                        let start = chunk_idx * horizon;
                        (start < s.nrows()).then(|| {
                            let steps = horizon.min(s.nrows() - start);
                            let len = (steps + config.loss_horizon - 1).min(s.nrows() - start);
                            (i, s.rows(start, len).into_owned(), steps)
                        })
                    })
                    .collect();
                if jobs.is_empty() {
                    break;
                }
                let results: Vec<Result<ChunkGradient>> = jobs
                    .par_iter()
                    .map(|(i, rows, steps)| {
                        rollout_loss_and_grad(model, &c, &states[*i], rows, *steps, config.loss_horizon, config.loss)
                    })
                    .collect();
                let mut grad = DMatrix::zeros(c.nrows(), c.ncols());
                let mut loss_sum = 0.0;
                for ((i, _, _), r) in jobs.iter().zip(results) {
                    let r = r?;
                    grad += &r.gradient;
                    loss_sum += r.loss;
                    states[*i] = r.final_state;
                }
                let n = jobs.len() as f64;
                let mean_loss = loss_sum / n;
                if !mean_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_index,
                        loss: mean_loss,
                    });
                }
                grad /= n;
                let norm = clip_gradient(&mut grad, config.grad_clip);
                report.max_clipped_norm = report.max_clipped_norm.max(norm);
                c -= grad * config.learning_rate;
                report.updates += 1;
                epoch_loss += loss_sum;
                epoch_chunks += jobs.len();
                batch_index += 1;
            }
        }
        report.epoch_losses.push(epoch_loss / epoch_chunks.max(1) as f64);
    }
    let tensor = ConditionalTensor::new(c, model.tensor().out_dim(), model.tensor().obs_dim())?;
    Ok((model.with_tensor(tensor, true)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::seeded_rng;
    use crate::quantum::DensityMatrix;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn seq(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    fn sine(n: usize, phase: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, 1, |t, _| (0.3 * t as f64 + phase).sin())
    }

    fn small_config() -> HqmmConfig {
        HqmmConfig {
            feature_count: 60,
            window: 3,
            state_size: 6,
            n_density_samples: 50,
            epochs: 3,
            ..HqmmConfig::default()
        }
    }

    #[test]
    fn window_boundaries() {
        let k = 2;
        assert!(matches!(
            build_windows(&[seq(&[0.0; 5])], k),
            Err(Error::SequenceTooShort { .. })
        ));
        let w = build_windows(&[seq(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])], k).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.history.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(w.future.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        assert_eq!(w.shifted.row(0).iter().copied().collect::<Vec<_>>(), vec![3.0, 4.0, 5.0]);
        assert_eq!(w.obs[(0, 0)], 2.0);
    }

    #[test]
    fn shifted_future_is_next_future() {
        let data: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let w = build_windows(&[seq(&data), seq(&data[..9])], 3).unwrap();
        assert_eq!(w.segments, vec![0..13, 13..15]);
        for r in w.segments.iter() {
            for t in r.start..r.end - 1 {
                assert_eq!(w.shifted.row(t), w.future.row(t + 1));
            }
        }
    }

    #[test]
    fn embedded_columns() {
        let data = [sine(60, 0.0)];
        let w = build_windows(&data, 3).unwrap();
        let maps = fit_stream_maps(&w, &small_config(), 0).unwrap();
        let pure = embed_windows(&w, &maps, Mode::Pure).unwrap();
        let mixed = embed_windows(&w, &maps, Mode::Mixed).unwrap();
        for t in 0..pure.future.ncols() {
            let v = pure.future.column(t);
            assert_abs_diff_eq!(v.norm(), 1.0, epsilon = 1e-12);
            let outer = vectorize(&(v * v.transpose()));
            assert!((outer - mixed.future.column(t)).amax() < 1e-12);
        }
        let rho = unvectorize(&mixed.history.column(0).into_owned()).unwrap();
        let dm = DensityMatrix::new(rho).unwrap();
        assert_eq!(dm.rank(1e-9), 1);
    }

    #[test]
    fn extended_future_cases() {
        let mut rng = seeded_rng(1);
        let s = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let g = extended_future(&s, &y).unwrap();
        for t in 0..4 {
            assert_abs_diff_eq!(g.column(t).norm(), s.column(t).norm() * y.column(t).norm(), epsilon = 1e-12);
            let outer = s.column(t) * y.column(t).transpose();
            let back = DMatrix::from_row_slice(3, 2, g.column(t).as_slice());
            assert!((outer - back).amax() < 1e-12);
        }
        let q = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        assert!((extended_future_product(&s, &y, &q).unwrap() - &g * &q).amax() < 1e-12);
        let e = |i: usize, n: usize| DMatrix::from_fn(n, 1, |r, _| (r == i) as u8 as f64);
        let g = extended_future(&e(1, 3), &e(0, 2)).unwrap();
        assert_eq!(g[(2, 0)], 1.0);
        assert_eq!(g.sum(), 1.0);
        assert!(extended_future(&s, &e(0, 2)).is_err());
    }

    #[test]
    fn stage1_recovers_linear_futures() {
        let mut rng = seeded_rng(2);
        let h = DMatrix::from_fn(4, 50, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let emb = EmbeddedWindows {
            mode: Mode::Pure,
            future: &a * &h,
            shifted: DMatrix::from_fn(3, 50, |_, _| rng.random_range(-1.0..1.0)),
            obs: DMatrix::from_fn(2, 50, |_, _| rng.random_range(-1.0..1.0)),
            history: h,
        };
        let s1 = stage1(&emb, 1e-10).unwrap();
        assert!((&s1.denoised_future - &emb.future).amax() < 1e-6);
        let big = stage1(&emb, 1e9).unwrap();
        assert!(big.denoised_future.amax() < 1e-3);
        let mid = stage1(&emb, 0.05).unwrap();
        assert!(mid.extended_given_history.matrix().iter().all(|x| x.is_finite()));
        assert!(stage1(&emb, 0.0).is_err());
    }

    #[test]
    fn stage2_residual_shrinks_with_lambda() {
        let w = build_windows(&[sine(200, 0.0)], 3).unwrap();
        let maps = fit_stream_maps(&w, &small_config(), 0).unwrap();
        let emb = embed_windows(&w, &maps, Mode::Pure).unwrap();
        let s1 = stage1(&emb, 0.05).unwrap();
        let residual = |l: f64| {
            let t = stage2(&s1, emb.obs.nrows(), l).unwrap();
            assert_eq!(t.matrix().shape(), (emb.future.nrows() * emb.obs.nrows(), emb.future.nrows()));
            (t.matrix() * &s1.denoised_future - &s1.denoised_extended).norm()
        };
        let (a, b, c) = (residual(5.0), residual(0.5), residual(0.05));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = [sine(120, 0.0), sine(80, 1.0)];
        let a = train_2sr(&data, &small_config()).unwrap();
        let b = train_2sr(&data, &small_config()).unwrap();
        assert_eq!(a, b);
        let c = train_2sr(&data, &HqmmConfig { seed: 7, ..small_config() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn alternating_sequence_is_learned() {
        let data: Vec<f64> = (0..400).map(|i| (i % 2) as f64).collect();
        let cfg = HqmmConfig {
            features: FeatureChoice::OneHot,
            window: 2,
            lambda: 1e-3,
            ..small_config()
        };
        let model = train_2sr(&[seq(&data)], &cfg).unwrap();
        let states = model.filter(&seq(&data[..100])).unwrap();
        let mut correct = 0;
        for t in 0..99 {
            let dist = model.symbol_distribution(&states[t]).unwrap();
            correct += (dist.imax() as f64 == data[t + 1]) as usize;
        }
        assert!(correct as f64 / 99.0 >= 0.95, "{correct}");
    }

    #[test]
    fn cyclic_hmm_filtering_matches_forward_algorithm() {
        use crate::oracle::{Hmm, StochasticMatrix};
        let t = StochasticMatrix::from_rows(3, 3, &[0., 0., 1., 1., 0., 0., 0., 1., 0.]).unwrap();
        let o = StochasticMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let hmm = Hmm::new(t, o, DVector::from_element(3, 1.0 / 3.0)).unwrap();
        let mut rng = seeded_rng(3);
        let (_, ys) = hmm.sample(3000, &mut rng);
        let train: Vec<f64> = ys.iter().map(|&y| y as f64).collect();
        let (_, test) = hmm.sample(200, &mut rng);
        let truth = hmm.forward(&test).unwrap();
        for mode in [Mode::Mixed, Mode::Pure] {
            let cfg = HqmmConfig {
                features: FeatureChoice::OneHot,
                mode,
                window: 1,
                lambda: 1e-8,
                ..HqmmConfig::default()
            };
            let model = train_2sr(&[seq(&train)], &cfg).unwrap();
            let mut state = model.initial_filter_state();
            // The first symbol pins the phase; before it the learned prior is
            // the stationary mix, not the chain's initial distribution.
            for (t, &y) in test.iter().enumerate() {
                if t > 0 {
                    let gap = (model.symbol_distribution(&state).unwrap() - &truth.predictive[t]).amax();
                    assert!(gap <= 1e-3, "{mode:?} step {t}: {gap}");
                }
                state = model.filter_step(&state, &[y as f64]).unwrap();
            }
        }
    }

    fn gradient_fixture() -> (HqmmModel, DMatrix<f64>) {
        let data = [sine(150, 0.2)];
        let model = train_2sr(&data, &small_config()).unwrap();
        (model, data[0].rows(10, 3).into_owned())
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (model, chunk) = gradient_fixture();
        let c = model.tensor().matrix().clone();
        let init = model.initial_state().clone();
        let g = chunk_loss_and_grad(&model, &c, &init, &chunk, Loss::Mse).unwrap();
        let mut rng = seeded_rng(3);
        let scale = g.gradient.amax();
        let mut checked = 0;
        while checked < 8 {
            let coord = (rng.random_range(0..c.nrows()), rng.random_range(0..c.ncols()));
            let a = g.gradient[coord];
            if a.abs() < 1e-3 * scale {
                continue;
            }
            let fd = finite_difference(&c, coord, 1e-5, |m| chunk_loss(&model, m, &init, &chunk, Loss::Mse)).unwrap();
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            assert!(rel <= 1e-4, "coord {coord:?}: analytic {a} vs fd {fd}");
            checked += 1;
        }
    }

    #[test]
    fn rollout_gradient_matches_finite_differences() {
        let data = [sine(150, 0.2)];
        let model = train_2sr(&data, &small_config()).unwrap();
        let c = model.tensor().matrix().clone();
        let init = model.initial_state().clone();
        let rows = data[0].rows(20, 7).into_owned();
        let g = rollout_loss_and_grad(&model, &c, &init, &rows, 4, 4, Loss::Mse).unwrap();
        let f = |m: &DMatrix<f64>| Ok(rollout_loss_and_grad(&model, m, &init, &rows, 4, 4, Loss::Mse)?.loss);
        let scale = g.gradient.amax();
        let mut rng = seeded_rng(9);
        let mut checked = 0;
        while checked < 8 {
            let coord = (rng.random_range(0..c.nrows()), rng.random_range(0..c.ncols()));
            let a = g.gradient[coord];
            if a.abs() < 1e-3 * scale {
                continue;
            }
            let fd = finite_difference(&c, coord, 1e-5, f).unwrap();
            assert!((a - fd).abs() / a.abs().max(fd.abs()) <= 1e-4, "{coord:?}: {a} vs {fd}");
            checked += 1;
        }
        let one = rollout_loss_and_grad(&model, &c, &init, &rows, 7, 1, Loss::Mse).unwrap();
        assert_eq!(one, chunk_loss_and_grad(&model, &c, &init, &rows, Loss::Mse).unwrap());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let data: Vec<f64> = (0..300).map(|i| ((i * 7 + i / 3) % 3) as f64).collect();
        let cfg = HqmmConfig {
            features: FeatureChoice::OneHot,
            window: 2,
            lambda: 0.01,
            loss: Loss::CrossEntropy,
            ..small_config()
        };
        let model = train_2sr(&[seq(&data)], &cfg).unwrap();
        let c = model.tensor().matrix().clone();
        let init = model.initial_state().clone();
        let chunk = seq(&data[5..9]);
        let g = chunk_loss_and_grad(&model, &c, &init, &chunk, Loss::CrossEntropy).unwrap();
        let coord = (0..c.nrows())
            .flat_map(|r| (0..c.ncols()).map(move |k| (r, k)))
            .max_by(|a, b| g.gradient[*a].abs().total_cmp(&g.gradient[*b].abs()))
            .unwrap();
        let fd = finite_difference(&c, coord, 1e-5, |m| chunk_loss(&model, m, &init, &chunk, Loss::CrossEntropy)).unwrap();
        assert!((g.gradient[coord] - fd).abs() / fd.abs() < 1e-4);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = DMatrix::from_element(3, 3, 1.0);
        let n = clip_gradient(&mut g, 0.25);
        assert!(n <= 0.25 + 1e-9 && g.norm() <= 0.25 + 1e-9);
        let mut small = DMatrix::from_element(2, 2, 0.01);
        assert_abs_diff_eq!(clip_gradient(&mut small, 0.25), 0.02, epsilon = 1e-15);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = [sine(100, 0.0)];
        let model = train_2sr(&data, &small_config()).unwrap();
        let cfg = HqmmConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..small_config()
        };
        let (refined, report) = bptt_refine(&model, &data, &cfg).unwrap();
        assert_eq!(refined.tensor(), model.tensor());
        assert!(refined.is_refined());
        assert!(report.max_clipped_norm <= 0.25 + 1e-9);
    }

    #[test]
    fn refinement_lowers_training_loss() {
        let data = [sine(300, 0.0)];
        let base = train_2sr(&data, &HqmmConfig { lambda: 0.5, ..small_config() }).unwrap();
        let cfg = HqmmConfig {
            epochs: 8,
            ..small_config()
        };
        let (_, report) = bptt_refine(&base, &data, &cfg).unwrap();
        let l = &report.epoch_losses;
        assert!(l.last().unwrap() < l.first().unwrap(), "{l:?}");
    }
}
