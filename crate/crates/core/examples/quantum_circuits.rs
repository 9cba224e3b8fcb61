//! Classical sum rule and Bayes rule run as quantum circuits on diagonal
//! density matrices.

use nalgebra::DVector;

use hse_hqmm::oracle::{
    build_sum_rule_unitary, classical_bayes, classical_sum_rule, quantum_bayes_circuit, quantum_sum_rule_circuit,
    StochasticMatrix,
};
use hse_hqmm::quantum::DensityMatrix;

fn main() -> hse_hqmm::Result<()> {
    // P(y | x) with two hidden states and three outcomes, columns indexed by x.
    let a = StochasticMatrix::from_rows(3, 2, &[0.6, 0.1, 0.3, 0.3, 0.1, 0.6])?;
    let pi = DVector::from_vec(vec![0.25, 0.75]);
    let u = build_sum_rule_unitary(&a);
    let rho = DensityMatrix::diagonal(pi.as_slice())?;

    let marginal = quantum_sum_rule_circuit(&rho, &u)?;
    println!("circuit marginal   {:.6?}", marginal.probabilities());
    println!("classical marginal {:.6?}", classical_sum_rule(&a, &pi)?.as_slice());

    for y in 0..3 {
        let post = quantum_bayes_circuit(&rho, &u, &DensityMatrix::basis(3, y))?;
        println!(
            "y={y}: circuit posterior {:.6?}, classical {:.6?}",
            post.probabilities(),
            classical_bayes(&a, &pi, y)?.as_slice()
        );
    }
    Ok(())
}
