//! Evaluation, heatmap export and conditioning benchmarks.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::features::seeded_rng;
use crate::inference::{kernel_bayes_weights, nw_condition, BeliefWeights};
use crate::model::{FilterState, HqmmModel};
use crate::oracle::StochasticMatrix;

/// Wall-clock timings, kept apart from the deterministic report text.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub filter_secs: f64,
    pub predict_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub horizon: usize,
    /// Number of `(t, t + horizon)` pairs.
    pub pairs: usize,
    /// Mean per-coordinate squared error at the horizon.
    pub mse_at_horizon: f64,
    /// Same for every step `1..=horizon` over the same pairs.
    pub mse_curve: Vec<f64>,
    /// Error of always predicting the training mean.
    pub baseline_mse: f64,
    /// One-step perplexity for discrete models.
    pub perplexity: Option<f64>,
    /// Fraction of density evaluations that needed clamping.
    pub violation_rate: f64,
    pub violations: usize,
    pub timings: Timings,
}

impl EvalReport {
    /// `key=value` lines; excludes timings so equal inputs give equal text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "horizon={}", self.horizon);
        let _ = writeln!(out, "pairs={}", self.pairs);
        let _ = writeln!(out, "mse_at_horizon={:e}", self.mse_at_horizon);
        let _ = writeln!(out, "baseline_mse={:e}", self.baseline_mse);
        match self.perplexity {
            Some(p) => {
                let _ = writeln!(out, "perplexity={p:e}");
            }
            None => out.push_str("perplexity=none\n"),
        }
        let _ = writeln!(out, "violations={}", self.violations);
        let _ = writeln!(out, "violation_rate={:e}", self.violation_rate);
        out
    }

    pub fn timings_text(&self) -> String {
        format!(
            "filter_secs={:.6}\npredict_secs={:.6}\n",
            self.timings.filter_secs, self.timings.predict_secs
        )
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,mse\n");
        for (i, m) in self.mse_curve.iter().enumerate() {
            let _ = writeln!(out, "{},{m:e}", i + 1);
        }
        out
    }
}

fn sq_err(a: &DVector<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / b.len() as f64
}

/// Filters each sequence and scores open-loop predictions from every state
/// `t` with `t + horizon` inside the sequence.
pub fn evaluate(model: &HqmmModel, sequences: &[DMatrix<f64>], horizon: usize) -> Result<EvalReport> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    if sequences.is_empty() {
        return Err(Error::InvalidInput("no sequences to evaluate".into()));
    }
    let shortest = sequences.iter().map(|s| s.nrows()).min().unwrap_or(0);
    if horizon >= shortest {
        return Err(Error::InvalidInput(format!(
            "horizon {horizon} exceeds shortest test sequence ({shortest} steps)"
        )));
    }
    for s in sequences {
        check_dim("evaluation dimension", model.obs_dim(), s.ncols())?;
    }
    let start = Instant::now();
    let all_states: Vec<Vec<FilterState>> = sequences
        .par_iter()
        .map(|s| model.filter(s))
        .collect::<Result<_>>()?;
    let filter_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut curve = vec![0.0; horizon];
    let mut baseline = 0.0;
    let mut pairs = 0usize;
    let mut violations = 0usize;
    let mean = model.obs_mean();
    for (seq, states) in sequences.iter().zip(&all_states) {
        let per_t: Vec<(Vec<f64>, usize)> = (0..seq.nrows() - horizon)
            .into_par_iter()
            .map(|t| {
                let preds = model.predict_curve(&states[t], horizon)?;
                let mut v = 0;
                let errs = preds
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        v += p.violations;
                        let truth: Vec<f64> = seq.row(t + j + 1).iter().copied().collect();
                        sq_err(&p.value, &truth)
                    })
                    .collect();
                Ok((errs, v))
            })
            .collect::<Result<_>>()?;
        for (t, (errs, v)) in per_t.into_iter().enumerate() {
            for (c, e) in curve.iter_mut().zip(errs) {
                *c += e;
            }
            violations += v;
            let truth: Vec<f64> = seq.row(t + horizon).iter().copied().collect();
            baseline += sq_err(mean, &truth);
            pairs += 1;
        }
    }
    curve.iter_mut().for_each(|c| *c /= pairs as f64);
    let perplexity = match model.symbols() {
        Some(_) => Some(perplexity(model, sequences, &all_states)?),
        None => None,
    };
    let evaluations = pairs * horizon * model.density_samples().nrows();
    Ok(EvalReport {
        horizon,
        pairs,
        mse_at_horizon: curve[horizon - 1],
        mse_curve: curve,
        baseline_mse: baseline / pairs as f64,
        perplexity,
        violation_rate: violations as f64 / evaluations.max(1) as f64,
        violations,
        timings: Timings {
            filter_secs,
            predict_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// `exp` of the mean negative log predictive probability of each symbol,
/// the first one scored under the initial state.
fn perplexity(model: &HqmmModel, sequences: &[DMatrix<f64>], states: &[Vec<FilterState>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for (seq, st) in sequences.iter().zip(states) {
        let init = model.initial_filter_state();
        for t in 0..seq.nrows() {
            let prior = if t == 0 { &init } else { &st[t - 1] };
            let dist = model.symbol_distribution(prior)?;
            let y = seq[(t, 0)].round() as usize;
            let p = dist.get(y).copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
            nll -= p.ln();
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

/// Inclusive evenly spaced grid from `MIN:MAX:STEPS`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidInput(format!("grid '{text}' is not MIN:MAX:STEPS"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let min: f64 = parts[0].parse().map_err(|_| bad())?;
    let max: f64 = parts[1].parse().map_err(|_| bad())?;
    let steps: usize = parts[2].parse().map_err(|_| bad())?;
    if steps == 0 || !(max >= min) {
        return Err(bad());
    }
    if steps == 1 {
        return Ok(vec![min]);
    }
    Ok((0..steps).map(|i| min + (max - min) * i as f64 / (steps - 1) as f64).collect())
}

/// Per-time-step predicted marginal of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: Vec<f64>,
    /// Row `t` is the distribution of `y_t[feature]` given `y_<t`.
    pub rows: DMatrix<f64>,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
}

pub const HEATMAP_DRAWS: usize = 64;

pub fn heatmap(
    model: &HqmmModel,
    seq: &DMatrix<f64>,
    feature: usize,
    grid: &[f64],
    background: &DMatrix<f64>,
    seed: u64,
) -> Result<Heatmap> {
    if feature >= model.obs_dim() {
        return Err(Error::InvalidInput(format!(
            "feature index {feature} out of range {}",
            model.obs_dim()
        )));
    }
    let filtered = model.filter(seq)?;
    let mut states = Vec::with_capacity(seq.nrows());
    states.push(model.initial_filter_state());
    states.extend(filtered.into_iter().take(seq.nrows() - 1));
    let rows = model.marginal_density_grid(&states, feature, grid, background, HEATMAP_DRAWS, seed)?;
    let prediction = states
        .par_iter()
        .map(|s| Ok(model.point_predict(s)?.value[feature]))
        .collect::<Result<_>>()?;
    Ok(Heatmap {
        grid: grid.to_vec(),
        rows,
        truth: seq.column(feature).iter().copied().collect(),
        prediction,
    })
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self.grid.iter().map(|g| format!("{g}")).collect();
        let _ = writeln!(out, "{},truth,prediction", header.join(","));
        for t in 0..self.rows.nrows() {
            let cells: Vec<String> = self.rows.row(t).iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{},{:e},{:e}", cells.join(","), self.truth[t], self.prediction[t]);
        }
        out
    }

    /// Indices of strict local maxima in row `t` (plateaus count once).
    pub fn row_modes(&self, t: usize) -> Vec<usize> {
        local_maxima(&self.rows.row(t).iter().copied().collect::<Vec<_>>())
    }
}

pub fn local_maxima(v: &[f64]) -> Vec<usize> {
    let n = v.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[j + 1] == v[i] {
            j += 1;
        }
        let left = i == 0 || v[i - 1] < v[i];
        let right = j + 1 == n || v[j + 1] < v[i];
        if left && right && n > 1 {
            out.push((i + j) / 2);
        }
        i = j + 1;
    }
    out
}

/// Paired one-hot samples `(x_i, y_i)` of a discrete system, with prior
/// weights constant within each hidden state and the classical posterior
/// for one observed symbol.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    /// One-hot hidden-state columns.
    pub ups_x: DMatrix<f64>,
    pub k_xx: DMatrix<f64>,
    pub k_yy: DMatrix<f64>,
    /// `k(y_i, y)` for the observed symbol.
    pub k_col: DVector<f64>,
    pub alpha: BeliefWeights,
    pub observed: usize,
    /// `P(x | y)` from the empirical likelihood and the prior.
    pub posterior: DVector<f64>,
}

pub fn discrete_system(n: usize, states: usize, symbols: usize, seed: u64) -> Result<DiscreteSystem> {
    if states == 0 || symbols == 0 || n < states {
        return Err(Error::InvalidInput("discrete system needs n >= states >= 1 and symbols >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let lik = StochasticMatrix::random(symbols, states, &mut rng);
    let prior = StochasticMatrix::random(states, 1, &mut rng).entries().column(0).into_owned();
    let xs: Vec<usize> = (0..n).map(|i| i % states).collect();
    let ys: Vec<usize> = xs
        .iter()
        .map(|&x| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for s in 0..symbols {
                acc += lik.entries()[(s, x)];
                if u < acc {
                    return s;
                }
            }
            symbols - 1
        })
        .collect();
    let mut counts = DMatrix::<f64>::zeros(symbols, states);
    for (&x, &y) in xs.iter().zip(&ys) {
        counts[(y, x)] += 1.0;
    }
    let per_state: Vec<f64> = (0..states).map(|x| counts.column(x).sum()).collect();
    let observed = (0..symbols)
        .max_by(|a, b| counts.row(*a).sum().total_cmp(&counts.row(*b).sum()))
        .expect("symbols >= 1");
    let post: Vec<f64> = (0..states).map(|x| prior[x] * counts[(observed, x)] / per_state[x]).collect();
    let z: f64 = post.iter().sum();
    let ups_x = DMatrix::from_fn(states, n, |r, i| (xs[i] == r) as u8 as f64);
    let k_xx = DMatrix::from_fn(n, n, |i, j| (xs[i] == xs[j]) as u8 as f64);
    let k_yy = DMatrix::from_fn(n, n, |i, j| (ys[i] == ys[j]) as u8 as f64);
    let k_col = DVector::from_fn(n, |i, _| (ys[i] == observed) as u8 as f64);
    let alpha = BeliefWeights::new(DVector::from_fn(n, |i, _| prior[xs[i]] / per_state[xs[i]]))?;
    Ok(DiscreteSystem {
        ups_x,
        k_xx,
        k_yy,
        k_col,
        alpha,
        observed,
        posterior: DVector::from_iterator(states, post.into_iter().map(|p| p / z)),
    })
}

impl DiscreteSystem {
    pub fn nw_posterior(&self) -> Result<DVector<f64>> {
        Ok(&self.ups_x * nw_condition(&self.alpha, &self.k_col)?.into_alpha())
    }

    pub fn kbr_posterior(&self, lambda: f64) -> Result<DVector<f64>> {
        Ok(&self.ups_x * kernel_bayes_weights(&self.k_xx, &self.k_yy, &self.k_col, &self.alpha, lambda)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub nw_secs: f64,
    pub kbr_secs: f64,
    /// Max abs difference of the two posteriors over hidden states.
    pub agreement: f64,
}

pub const BENCH_LAMBDA: f64 = 1e-8;

/// Times NW against kernel Bayes rule on a 3-state, 3-symbol system of
/// each size; the two posteriors must agree within 1e-4 first.
pub fn bench_conditioning(ns: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    ns.iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::InvalidInput("bench sizes must be positive".into()));
            }
            let sys = discrete_system(n.max(3), 3, 3, seed)?;
            let t = Instant::now();
            let nw = sys.nw_posterior()?;
            let nw_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let kbr = sys.kbr_posterior(BENCH_LAMBDA)?;
            let kbr_secs = t.elapsed().as_secs_f64();
            let agreement = (&nw - &kbr).amax();
            if agreement > 1e-4 {
                return Err(Error::InvalidInput(format!(
                    "NW and KBR disagree by {agreement:e} at n = {n}"
                )));
            }
            Ok(BenchRow {
                n,
                nw_secs,
                kbr_secs,
                agreement,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,nw_secs,kbr_secs,ratio,agreement\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6e},{:.6e},{:.3},{:e}",
            r.n,
            r.nw_secs,
            r.kbr_secs,
            r.kbr_secs / r.nw_secs.max(1e-12),
            r.agreement
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};
    use crate::learning::train_2sr;
    use crate::model::{FeatureChoice, HqmmConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("2:5:1").unwrap(), vec![2.0]);
        assert!(parse_grid("1:0:3").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn local_maxima_cases() {
        assert_eq!(local_maxima(&[0.0, 1.0, 0.0, 2.0, 0.0]), vec![1, 3]);
        assert_eq!(local_maxima(&[1.0, 1.0, 0.0]), vec![0]);
        assert_eq!(local_maxima(&[0.0, 1.0, 2.0]), vec![2]);
    }

    #[test]
    fn discrete_system_posteriors_agree() {
        for seed in 0..4 {
            let sys = discrete_system(60, 3, 2, seed).unwrap();
            let nw = sys.nw_posterior().unwrap();
            assert!((&nw - &sys.posterior).amax() < 1e-12);
            let kbr = sys.kbr_posterior(1e-8).unwrap();
            assert!((&kbr - &sys.posterior).amax() < 1e-4, "{kbr} vs {}", sys.posterior);
        }
    }

    #[test]
    fn bench_reports_every_size() {
        let rows = bench_conditioning(&[10, 40], 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.agreement <= 1e-4));
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("n,nw_secs,kbr_secs"));
        assert_eq!(csv.lines().count(), 3);
    }

    fn constant_model() -> (HqmmModel, DMatrix<f64>) {
        let seq = DMatrix::from_element(80, 1, 0.7);
        let cfg = HqmmConfig {
            feature_count: 20,
            window: 2,
            state_size: 4,
            n_density_samples: 10,
            bandwidth: Some(1.0),
            ..HqmmConfig::default()
        };
        (train_2sr(std::slice::from_ref(&seq), &cfg).unwrap(), seq)
    }

    #[test]
    fn constant_sequence_is_memorized() {
        let (model, seq) = constant_model();
        let r = evaluate(&model, std::slice::from_ref(&seq), 3).unwrap();
        assert!(r.mse_at_horizon <= 1e-6, "{}", r.mse_at_horizon);
        assert!(r.baseline_mse <= 1e-20);
        assert_eq!(r.mse_curve.len(), 3);
        assert!(r.perplexity.is_none());
        assert!((0.0..=1.0).contains(&r.violation_rate));
        assert!(evaluate(&model, &[seq.rows(0, 3).into_owned()], 3).is_err());
    }

    #[test]
    fn single_cell_grid_is_all_ones() {
        let (model, seq) = constant_model();
        let h = heatmap(&model, &seq, 0, &[0.5], &seq, 0).unwrap();
        assert!(h.rows.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let g = parse_grid("0:1:11").unwrap();
        let h = heatmap(&model, &seq, 0, &g, &seq, 0).unwrap();
        for t in 0..h.rows.nrows() {
            assert_abs_diff_eq!(h.rows.row(t).sum(), 1.0, epsilon = 1e-9);
        }
        assert!(h.to_csv().lines().next().unwrap().ends_with(",truth,prediction"));
        assert!(heatmap(&model, &seq, 1, &g, &seq, 0).is_err());
    }

    #[test]
    fn learned_hmm_beats_mean_predictor() {
        let data = gen_synthetic(&SyntheticKind::hmm(2, 2, 5000), 2).unwrap();
        let ds = data.dataset.with_test_fraction(0.2).unwrap();
        let cfg = HqmmConfig {
            features: FeatureChoice::OneHot,
            mode: crate::model::Mode::Mixed,
            window: 1,
            lambda: 1e-6,
            ..HqmmConfig::default()
        };
        let model = train_2sr(&ds.train(), &cfg).unwrap();
        let r = evaluate(&model, &ds.test(), 1).unwrap();
        assert!(r.mse_at_horizon < r.baseline_mse, "{} vs {}", r.mse_at_horizon, r.baseline_mse);
        assert!(r.perplexity.unwrap() < 2.0);
        assert!(r.to_text().contains("perplexity="));
    }
}
