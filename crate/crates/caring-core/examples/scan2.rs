//! Full-scale verification of the frozen defaults. Dev-only.
use caring_core::parallel::Exec;
use caring_core::sim::{generate, mu_filter, ols_window_fit, GenerativeSpec};

fn main() {
    for seed in [770u64, 771, 772, 773] {
        let spec = GenerativeSpec::ng_default(seed);
        let batch = generate(&spec, 10_000, 10, Exec::Auto).unwrap();
        let report = mu_filter(&batch, &[0, 1, 2, 3, 4, 5, 6], 0.95, Exec::Auto);
        let w = ols_window_fit(&batch, 0, Exec::Auto);
        println!("ng seed={seed} chosen={:?} witness_z3_mu0={:.3} mu1min={:.3} mu2min={:.3}",
            report.chosen_mu, w.r2[2],
            report.per_mu[1].min_r2(), report.per_mu[2].min_r2());
    }
    for seed in [770u64, 771, 772, 773] {
        let spec = GenerativeSpec::ng_tdmp_default(seed);
        let batch = generate(&spec, 10_000, 10, Exec::Auto).unwrap();
        let report = mu_filter(&batch, &[0, 1, 2, 3, 4, 5, 6], 0.95, Exec::Auto);
        println!("tdmp seed={seed} chosen={:?} mu3min={:.3} mu4min={:.3} mu5min={:.3}",
            report.chosen_mu,
            report.per_mu[3].min_r2(), report.per_mu[4].min_r2(), report.per_mu[5].min_r2());
    }
    for seed in [770u64, 771] {
        let spec = GenerativeSpec::persistence_default(0.5, seed);
        let batch = generate(&spec, 10_000, 10, Exec::Auto).unwrap();
        let report = mu_filter(&batch, &[0, 1, 2], 0.95, Exec::Auto);
        println!("pers seed={seed} chosen={:?} mu1min={:.6}", report.chosen_mu, report.per_mu[1].min_r2());
    }
}
