//! Two-stage regression on noisy oscillators, then BPTT refinement, with
//! multi-step forecast error before and after.

use hse_hqmm::data::{gen_synthetic, SyntheticKind};
use hse_hqmm::harness::evaluate;
use hse_hqmm::learning::{bptt_refine, train_2sr};
use hse_hqmm::model::HqmmConfig;

fn main() -> hse_hqmm::Result<()> {
    let kind = SyntheticKind::oscillator(3, 400, 0.1).with_sequences(5);
    let ds = gen_synthetic(&kind, 0)?.dataset.with_test_fraction(0.2)?;
    let cfg = HqmmConfig {
        feature_count: 50,
        n_density_samples: 100,
        loss_horizon: 10,
        ..HqmmConfig::default()
    };
    let model = train_2sr(&ds.train(), &cfg)?;
    let before = evaluate(&model, &ds.test(), 10)?;
    let (refined, report) = bptt_refine(&model, &ds.train(), &cfg)?;
    let after = evaluate(&refined, &ds.test(), 10)?;
    println!("epoch losses {:.4?}", report.epoch_losses);
    println!("mean predictor  MSE {:.4}", before.baseline_mse);
    println!("2SR             MSE@10 {:.4}", before.mse_at_horizon);
    println!("2SR + BPTT      MSE@10 {:.4}", after.mse_at_horizon);
    Ok(())
}
