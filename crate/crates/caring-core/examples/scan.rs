//! Dev-only probe for freezing the default generative specs.
//! Run: cargo run --release -p caring-core --example scan -- ng|tdmp|pers

use caring_core::parallel::Exec;
use caring_core::sim::{generate, mu_filter, GenerativeSpec, MixingSpec, TransitionSpec};
use caring_core::stats::mean_std;

fn describe(spec: &GenerativeSpec, label: &str) {
    let n = 4000;
    let t = 10;
    for seed in [770u64, 771] {
        let mut s = spec.clone();
        s.seed = seed;
        let batch = generate(&s, n, t, Exec::Auto).unwrap();
        let mut stds = vec![];
        for k in 0..s.n_latent {
            let vals: Vec<f64> = (0..n).map(|i| batch.z_at(i, t - 1)[k]).collect();
            let (m, sd) = mean_std(&vals);
            stds.push(format!("{k}:m={m:+.2},sd={sd:.3}"));
        }
        let report = mu_filter(&batch, &[0, 1, 2, 3, 4, 5], 0.95, Exec::Auto);
        let r2s: Vec<String> = report
            .per_mu
            .iter()
            .map(|f| {
                let r2 = f.r2.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/");
                format!("mu{}[{r2}]", f.mu)
            })
            .collect();
        println!(
            "{label} seed={seed} chosen={:?} z[{}] {}",
            report.chosen_mu,
            stds.join(" "),
            r2s.join(" ")
        );
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "ng".into());
    match which.as_str() {
        "ng" => {
            for (rho12, ng12) in [(0.6, 3.6), (0.6, 4.4), (0.55, 4.0)] {
                for tseed in [9101u64, 9301, 9401, 9501] {
                    for mseed in [9002u64, 9202] {
                        let mut spec = GenerativeSpec::ng_default(770);
                        spec.transition = TransitionSpec::PostNonlinearAdditive {
                            weight_seed: tseed,
                            slope: 0.4,
                            rho: vec![rho12, rho12, 0.30],
                            mean_gain: vec![0.6, 0.6, 3.0],
                            mean_bias: vec![0.15, 0.15, 0.1],
                            mean_inputs: 2,
                            noise_gain: vec![ng12, ng12, 0.3],
                            scale_floor: 0.15,
                            scale_span: 0.4,
                        };
                        spec.mixing = MixingSpec::NgDropdim { weight_seed: mseed, slope: 0.4 };
                        describe(
                            &spec,
                            &format!("ng rho12={rho12} ng12={ng12} t={tseed} m={mseed}"),
                        );
                    }
                }
            }
        }
        "tdmp" => {
            for lag_gain in [1.2, 1.4, 1.6] {
                for mseed in [9104u64, 9504, 9604, 9704] {
                    let mut spec = GenerativeSpec::ng_tdmp_default(770);
                    spec.mixing = caring_core::sim::sample_tdmp_mixing(
                        mseed,
                        &spec.transition,
                        spec.noise_sigma,
                        lag_gain,
                    );
                    describe(&spec, &format!("tdmp lg={lag_gain} m={mseed}"));
                }
            }
        }
        "pers" => {
            describe(&GenerativeSpec::persistence_default(0.5, 770), "pers d=0.5");
        }
        other => eprintln!("unknown scan {other}"),
    }
}
