//! Predictive density heatmap on a process that jumps between two levels;
//! each row should show both modes.

use hse_hqmm::data::{gen_synthetic, SyntheticKind};
use hse_hqmm::harness::{heatmap, parse_grid};
use hse_hqmm::learning::train_2sr;
use hse_hqmm::model::HqmmConfig;

fn main() -> hse_hqmm::Result<()> {
    let ds = gen_synthetic(&SyntheticKind::bimodal(1500), 0)?.dataset;
    let cfg = HqmmConfig {
        feature_count: 400,
        ..HqmmConfig::default()
    };
    let model = train_2sr(ds.sequences(), &cfg)?;
    let grid = parse_grid("-2:2:21")?;
    let seq = ds.sequences()[0].rows(0, 15).into_owned();
    let h = heatmap(&model, &seq, 0, &grid, &ds.pooled(), 0)?;
    for t in 0..h.rows.nrows() {
        let bar: String = h
            .rows
            .row(t)
            .iter()
            .map(|&p| match p {
                p if p > 0.12 => '#',
                p if p > 0.06 => '+',
                p if p > 0.02 => '.',
                _ => ' ',
            })
            .collect();
        let modes: Vec<f64> = h.row_modes(t).iter().map(|&i| grid[i]).collect();
        println!("{t:>2} |{bar}| y={:+.2} modes {modes:.1?}", h.truth[t]);
    }
    Ok(())
}
