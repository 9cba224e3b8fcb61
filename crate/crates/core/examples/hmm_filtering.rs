//! Learns a mixed-mode model with one-hot features from HMM samples and
//! compares its predictive distribution with the forward algorithm.

use hse_hqmm::data::{gen_synthetic, SyntheticKind};
use hse_hqmm::features::seeded_rng;
use hse_hqmm::learning::train_2sr;
use hse_hqmm::model::{FeatureChoice, HqmmConfig, HqmmModel, Mode};

fn main() -> hse_hqmm::Result<()> {
    let generated = gen_synthetic(&SyntheticKind::hmm(2, 2, 5000), 2)?;
    let hmm = generated.hmm.expect("hmm generator returns its parameters");
    let cfg = HqmmConfig {
        features: FeatureChoice::OneHot,
        mode: Mode::Mixed,
        window: 1,
        lambda: 1e-6,
        ..HqmmConfig::default()
    };
    let learned = train_2sr(generated.dataset.sequences(), &cfg)?;
    let exact = HqmmModel::from_hmm(&hmm)?;

    let (_, ys) = hmm.sample(20, &mut seeded_rng(5));
    let truth = hmm.forward(&ys)?;
    let (mut s_learned, mut s_exact) = (learned.initial_filter_state(), exact.initial_filter_state());
    println!(" t  y  forward    exact-model learned");
    for (t, &y) in ys.iter().enumerate() {
        let p_learned = learned.symbol_distribution(&s_learned)?;
        let p_exact = exact.symbol_distribution(&s_exact)?;
        println!(
            "{t:>2}  {y}  {:.4}     {:.4}      {:.4}",
            truth.predictive[t][0], p_exact[0], p_learned[0]
        );
        s_learned = learned.filter_step(&s_learned, &[y as f64])?;
        s_exact = exact.filter_step(&s_exact, &[y as f64])?;
    }
    Ok(())
}
