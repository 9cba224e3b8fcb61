//! Saves a trained model and its config as text and loads them back.

use hse_hqmm::data::{gen_synthetic, SyntheticKind};
use hse_hqmm::io::{config_to_text, model_from_text, model_to_text, parse_config};
use hse_hqmm::learning::train_2sr;
use hse_hqmm::model::HqmmConfig;

fn main() -> hse_hqmm::Result<()> {
    let ds = gen_synthetic(&SyntheticKind::oscillator(2, 200, 0.05), 3)?.dataset;
    let cfg = parse_config("feature_count = 30\nwindow = 3\nstate_size = 4\nn_density_samples = 20\n")?;
    let model = train_2sr(ds.sequences(), &cfg)?;
    let text = model_to_text(&model);
    println!("{} lines, header: {}", text.lines().count(), text.lines().next().unwrap_or(""));
    let back = model_from_text(&text)?;
    println!("identical after reload: {}", back == model);
    let defaults = config_to_text(&HqmmConfig::default());
    println!("default config:\n{defaults}");
    Ok(())
}
