//! Nadaraya-Watson conditioning against kernel Bayes rule on a discrete
//! system: same posterior, very different cost.

use hse_hqmm::harness::{bench_conditioning, bench_csv, discrete_system};

fn main() -> hse_hqmm::Result<()> {
    let sys = discrete_system(300, 3, 3, 1)?;
    println!("observed symbol {}", sys.observed);
    println!("exact posterior {:.6?}", sys.posterior.as_slice());
    println!("NW posterior    {:.6?}", sys.nw_posterior()?.as_slice());
    println!("KBR posterior   {:.6?}", sys.kbr_posterior(1e-8)?.as_slice());
    print!("{}", bench_csv(&bench_conditioning(&[100, 200, 400, 800], 1)?));
    Ok(())
}
