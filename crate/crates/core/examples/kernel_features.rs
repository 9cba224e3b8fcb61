//! How well random Fourier features approximate the Gaussian kernel as the
//! feature count grows.

use hse_hqmm::features::{gaussian_kernel, random_inputs, seeded_rng, RffMap};

fn main() -> hse_hqmm::Result<()> {
    let mut rng = seeded_rng(0);
    let xs = random_inputs(400, 2, 1.0, &mut rng);
    for d in [10, 100, 1000, 10_000] {
        let map = RffMap::sample(2, d, 1.0, 7)?;
        let mut worst: f64 = 0.0;
        let mut mean = 0.0;
        for i in 0..200 {
            let x: Vec<f64> = xs.row(2 * i).iter().copied().collect();
            let y: Vec<f64> = xs.row(2 * i + 1).iter().copied().collect();
            let err = (map.embed_raw(&x)?.dot(&map.embed_raw(&y)?) - gaussian_kernel(&x, &y, 1.0)).abs();
            worst = worst.max(err);
            mean += err / 200.0;
        }
        println!("D={d:>6}: mean |err| {mean:.4}, max |err| {worst:.4}");
    }
    Ok(())
}
