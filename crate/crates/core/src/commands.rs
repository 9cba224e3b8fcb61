//! The operations behind the `hqmm` verbs, free of argument parsing and
//! file handling.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::harness::{bench_conditioning, evaluate, heatmap, BenchRow, EvalReport, Heatmap};
use crate::learning::{bptt_refine, train_2sr, BpttReport};
use crate::model::{HqmmConfig, HqmmModel, Mode};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub no_bptt: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HqmmModel,
    pub refinement: Option<BpttReport>,
    /// Set when refinement was requested but not run.
    pub skipped: Option<String>,
}

/// Two-stage regression on every sequence of `data`, then refinement
/// unless disabled or the model is mixed-mode.
pub fn cmd_train(data: &SequenceDataset, config: &HqmmConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(m) = opts.mode {
        cfg.mode = m;
    }
    let model = train_2sr(data.sequences(), &cfg)?;
    if opts.no_bptt {
        return Ok(TrainOutcome {
            model,
            refinement: None,
            skipped: None,
        });
    }
    if cfg.mode == Mode::Mixed {
        return Ok(TrainOutcome {
            model,
            refinement: None,
            skipped: Some("refinement supports pure mode only".into()),
        });
    }
    let (model, report) = bptt_refine(&model, data.sequences(), &cfg)?;
    Ok(TrainOutcome {
        model,
        refinement: Some(report),
        skipped: None,
    })
}

/// Evaluates at `horizon`, or the model's configured prediction horizon.
pub fn cmd_evaluate(model: &HqmmModel, data: &SequenceDataset, horizon: Option<usize>) -> Result<EvalReport> {
    let h = horizon.unwrap_or(model.config().prediction_horizon);
    evaluate(model, data.sequences(), h)
}

/// One row per observation: the raw density of `y_t` under the state before
/// it, whether it was clamped, and the one-step point prediction.
pub fn cmd_filter(model: &HqmmModel, data: &SequenceDataset) -> Result<String> {
    let d = model.obs_dim();
    let mut out = String::from("sequence,t,density,clamped");
    for j in 0..d {
        let _ = write!(out, ",prediction_{j}");
    }
    out.push('\n');
    let blocks: Vec<String> = data
        .sequences()
        .par_iter()
        .enumerate()
        .map(|(si, seq)| {
            let states = model.filter(seq)?;
            let mut block = String::new();
            let init = model.initial_filter_state();
            for t in 0..seq.nrows() {
                let prior = if t == 0 { &init } else { &states[t - 1] };
                let y: Vec<f64> = seq.row(t).iter().copied().collect();
                let raw = model.observation_density(prior, &y)?;
                let pred = model.point_predict(prior)?;
                let _ = write!(block, "{si},{t},{raw:e},{}", u8::from(!(0.0..=1.0).contains(&raw)));
                for v in pred.value.iter() {
                    let _ = write!(block, ",{v:e}");
                }
                block.push('\n');
            }
            Ok(block)
        })
        .collect::<Result<_>>()?;
    for b in blocks {
        out.push_str(&b);
    }
    Ok(out)
}

/// Heatmap over the first sequence; the remaining features are averaged
/// over observations drawn from the whole dataset.
pub fn cmd_heatmap(model: &HqmmModel, data: &SequenceDataset, feature: usize, grid: &[f64], seed: u64) -> Result<Heatmap> {
    let seq = data
        .sequences()
        .first()
        .ok_or_else(|| Error::InvalidInput("dataset is empty".into()))?;
    heatmap(model, seq, feature, grid, &data.pooled(), seed)
}

pub fn cmd_bench(sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() {
        return Err(Error::InvalidInput("no bench sizes given".into()));
    }
    bench_conditioning(sizes, seed)
}
