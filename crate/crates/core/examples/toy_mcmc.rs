//! Folded-normal Metropolis sampler on the contaminated exponential model.

use bayes_emu::mcmc::{autocorrelation, effective_sample_size};
use bayes_emu::targets::{evaluate_target_with_chain, toy_conjugate_posterior, Dataset, Model};

fn main() -> bayes_emu::Result<()> {
    let data = Dataset::toy();
    for x in [[1.0, 0.0], [1.0, 1.0], [0.8, 0.72], [2.0, 0.72]] {
        let cfg = Model::Toy.default_config(&x, &data, None, 7);
        let (s, chain) = evaluate_target_with_chain(Model::Toy, &x, &data, &cfg)?;
        println!(
            "nu={:<4} eps={:<4} E(theta)={:.4} +- {:.4}  SD(theta)={:.4} +- {:.4}  accept={:.3}",
            x[0],
            x[1],
            s.features[0],
            s.mc_se(0),
            s.features[1],
            s.mc_se(1),
            s.accept_rate
        );
        if x[1] == 0.0 {
            let (m, sd) = toy_conjugate_posterior(x[0], &data);
            println!("  conjugate Gamma posterior: mean {m:.4}, sd {sd:.4}");
            let theta = chain.column(0);
            let rho = autocorrelation(&theta);
            println!("  lag-1 autocorrelation {:.3}, ESS {:.0} of {}", rho[1], effective_sample_size(&theta), theta.len());
        }
    }
    Ok(())
}
