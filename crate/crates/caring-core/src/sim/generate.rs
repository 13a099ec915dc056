//! Trajectory generation.
//!
//! Trajectories are independent given the spec: each draws its RNG stream
//! from (spec.seed, trajectory index), so any scheduling produces the same
//! bytes. The per-kind observation loops live here.

use super::{GenerativeSpec, MixingNets, MixingSpec, SplitTag, TrajectoryBatch};
use crate::error::{CoreError, Result};
use crate::parallel::{for_each_chunk, Exec};
use crate::rng::stream_rng;
use rand::Rng;
use rand_distr::StandardNormal;

/// Generate `n_traj` trajectories of length `t_len` from `spec`.
pub fn generate(spec: &GenerativeSpec, n_traj: usize, t_len: usize, exec: Exec) -> Result<TrajectoryBatch> {
    if n_traj == 0 || t_len == 0 {
        return Err(CoreError::Usage(format!(
            "trajectory counts must be positive, got N={n_traj}, T={t_len}"
        )));
    }
    spec.validate()?;

    let n = spec.n_latent;
    let d = spec.d_obs;
    let transition = spec.transition.build(n);
    let mixing = spec.mixing.build(d);
    let sigma = spec.noise_sigma;

    let mut z = vec![0.0; n_traj * t_len * n];
    let mut x = vec![0.0; n_traj * t_len * d];

    // Latents first: one derived stream per trajectory.
    for_each_chunk(exec, &mut z, t_len * n, |traj, zs| {
        let mut rng = stream_rng(spec.seed, traj as u64);
        for v in zs[..n].iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let mut eps = vec![0.0; n];
        for t in 1..t_len {
            for e in eps.iter_mut() {
                let raw: f64 = rng.sample(StandardNormal);
                *e = sigma * raw;
            }
            let (past, cur) = zs.split_at_mut(t * n);
            let h = &past[(t - 1) * n..t * n];
            transition.step(h, &eps, &mut cur[..n]);
        }
    });

    // Observations from the latents.
    let z_ref = &z;
    for_each_chunk(exec, &mut x, t_len * d, |traj, xs| {
        let zs = &z_ref[traj * t_len * n..(traj + 1) * t_len * n];
        let z_at = |t: usize| &zs[t * n..(t + 1) * n];
        match &mixing {
            MixingNets::Persistence { decay } => {
                // x_0 = z_0; x_t = z_t + decay·x_{t-1}
                xs[..d].copy_from_slice(z_at(0));
                for t in 1..t_len {
                    let (prev, cur) = xs.split_at_mut(t * d);
                    let xp = &prev[(t - 1) * d..t * d];
                    for (k, c) in cur[..d].iter_mut().enumerate() {
                        *c = z_at(t)[k] + decay * xp[k];
                    }
                }
            }
            MixingNets::Tdmp { .. } => {
                for t in 0..t_len {
                    let mut obs = mixing.observe_current(z_at(t));
                    let z_m1 = (t >= 1).then(|| z_at(t - 1));
                    let z_m2 = (t >= 2).then(|| z_at(t - 2));
                    obs[2] += mixing.tdmp_lag_term(z_m1, z_m2);
                    xs[t * d..(t + 1) * d].copy_from_slice(&obs);
                }
            }
            MixingNets::Dropdim { .. } => {
                for t in 0..t_len {
                    let obs = mixing.observe_current(z_at(t));
                    xs[t * d..(t + 1) * d].copy_from_slice(&obs);
                }
            }
        }
    });

    let batch = TrajectoryBatch { z, x, n_traj, t_len, spec: spec.clone(), split: SplitTag::Full };
    verify_regeneration(&batch)?;
    Ok(batch)
}

/// Recompute every x_t from z and the spec and require bit-exact agreement.
pub fn verify_regeneration(batch: &TrajectoryBatch) -> Result<()> {
    let spec = &batch.spec;
    let mixing = spec.mixing.build(spec.d_obs);
    let d = spec.d_obs;
    for traj in 0..batch.n_traj {
        let mut x_prev: Option<Vec<f64>> = None;
        for t in 0..batch.t_len {
            let expected: Vec<f64> = match &mixing {
                MixingNets::Persistence { decay } => {
                    let z_t = batch.z_at(traj, t);
                    match &x_prev {
                        None => z_t.to_vec(),
                        Some(xp) => z_t.iter().zip(xp).map(|(z, x)| z + decay * x).collect(),
                    }
                }
                MixingNets::Tdmp { .. } => {
                    let mut obs = mixing.observe_current(batch.z_at(traj, t));
                    let z_m1 = (t >= 1).then(|| batch.z_at(traj, t - 1));
                    let z_m2 = (t >= 2).then(|| batch.z_at(traj, t - 2));
                    obs[2] += mixing.tdmp_lag_term(z_m1, z_m2);
                    obs
                }
                MixingNets::Dropdim { .. } => mixing.observe_current(batch.z_at(traj, t)),
            };
            let actual = batch.x_at(traj, t);
            if expected != actual {
                return Err(CoreError::Config(format!(
                    "regeneration mismatch at trajectory {traj}, step {t}"
                )));
            }
            x_prev = Some(actual[..d].to_vec());
        }
    }
    Ok(())
}

/// Dimension-dropping regime (d_obs < n_latent, lag-free mixing).
pub fn generate_ng(spec: &GenerativeSpec, n_traj: usize, t_len: usize, exec: Exec) -> Result<TrajectoryBatch> {
    if !matches!(spec.mixing, MixingSpec::NgDropdim { .. }) {
        return Err(CoreError::Config("spec mixing kind is not ng_dropdim".into()));
    }
    if spec.r != 0 || spec.tau != 1 {
        return Err(CoreError::Config(format!(
            "dimension-dropping regime expects tau=1, r=0; got tau={}, r={}",
            spec.tau, spec.r
        )));
    }
    generate(spec, n_traj, t_len, exec)
}

/// Time-delayed mixing regime (r ∈ {1, 2}).
pub fn generate_ng_tdmp(
    spec: &GenerativeSpec,
    n_traj: usize,
    t_len: usize,
    exec: Exec,
) -> Result<TrajectoryBatch> {
    if !matches!(spec.mixing, MixingSpec::NgTdmp { .. }) {
        return Err(CoreError::Config("spec mixing kind is not ng_tdmp".into()));
    }
    if !(1..=2).contains(&spec.r) {
        return Err(CoreError::Config(format!("time-delayed mixing expects r in {{1,2}}, got {}", spec.r)));
    }
    generate(spec, n_traj, t_len, exec)
}

/// Overlaid-observation regime: x_t = z_t + decay·x_{t-1}.
pub fn generate_persistence(decay: f64, seed: u64, n_traj: usize, t_len: usize, exec: Exec) -> Result<TrajectoryBatch> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(CoreError::Usage(format!("decay must lie in (0,1), got {decay}")));
    }
    let spec = GenerativeSpec::persistence_default(decay, seed);
    generate(&spec, n_traj, t_len, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TransitionSpec;
    use crate::stats::{ks_critical, ks_statistic, normal_cdf};

    #[test]
    fn rejects_empty_batches() {
        let spec = GenerativeSpec::ng_default(770);
        assert!(generate(&spec, 0, 10, Exec::Sequential).is_err());
        assert!(generate(&spec, 10, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn shapes_match_request() {
        let spec = GenerativeSpec::ng_default(770);
        let batch = generate_ng(&spec, 100, 10, Exec::Auto).unwrap();
        assert_eq!(batch.z.len(), 100 * 10 * 3);
        assert_eq!(batch.x.len(), 100 * 10 * 2);
    }

    #[test]
    fn identical_specs_are_bit_identical_and_exec_invariant() {
        let spec = GenerativeSpec::ng_tdmp_default(771);
        let a = generate(&spec, 64, 10, Exec::Sequential).unwrap();
        let b = generate(&spec, 64, 10, Exec::Auto).unwrap();
        let c = generate(&spec, 64, 10, Exec::Auto).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn zero_noise_is_deterministic_given_z0() {
        let mut spec = GenerativeSpec::ng_default(5);
        spec.noise_sigma = 0.0;
        let a = generate(&spec, 8, 10, Exec::Sequential).unwrap();
        let b = generate(&spec, 8, 10, Exec::Sequential).unwrap();
        assert_eq!(a.z, b.z);
        // The same trajectory re-run from its own z_0 reproduces itself.
        let nets = spec.transition.build(3);
        let zeros = [0.0; 3];
        let mut state = a.z_at(0, 0).to_vec();
        for t in 1..10 {
            let mut next = vec![0.0; 3];
            nets.step(&state, &zeros, &mut next);
            assert_eq!(next.as_slice(), a.z_at(0, t));
            state = next;
        }
    }

    #[test]
    fn recovered_noise_mean_is_near_zero() {
        // Invert the transition over ≥1e5 draws; the empirical mean must sit
        // within 3·σ/√n of zero.
        let spec = GenerativeSpec::ng_default(901);
        let batch = generate(&spec, 4000, 10, Exec::Auto).unwrap();
        let nets = spec.transition.build(3);
        let mut eps = Vec::with_capacity(4000 * 9 * 3);
        for traj in 0..batch.n_traj {
            for t in 1..batch.t_len {
                let e = nets.invert_noise(batch.z_at(traj, t - 1), batch.z_at(traj, t));
                eps.extend(e);
            }
        }
        assert!(eps.len() >= 100_000);
        let mean = eps.iter().sum::<f64>() / eps.len() as f64;
        let bound = 3.0 * spec.noise_sigma / (eps.len() as f64).sqrt();
        assert!(mean.abs() < bound, "mean {mean} vs bound {bound}");
    }

    #[test]
    fn tdmp_identity_matrices_pass_positive_latents_through() {
        // A=B=C=I, D=E=0 and all-positive z → x_t = z_t.
        let eye = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let mixing = MixingSpec::NgTdmp {
            a: eye.clone(),
            b: eye.clone(),
            c: eye.clone(),
            d: vec![0.0; 3],
            e: vec![0.0; 3],
        };
        let nets = mixing.build(3);
        let z = [0.3, 0.7, 0.2];
        assert_eq!(nets.observe_current(&z), z.to_vec());

        // D=(1,0,0), E=0 adds z_{1,t-1} to the third coordinate.
        let mixing = MixingSpec::NgTdmp {
            a: eye.clone(),
            b: eye.clone(),
            c: eye,
            d: vec![1.0, 0.0, 0.0],
            e: vec![0.0; 3],
        };
        let nets = mixing.build(3);
        let z_m1 = [0.5, 0.1, 0.9];
        let term = nets.tdmp_lag_term(Some(&z_m1), None);
        assert_eq!(term, 0.5);
    }

    #[test]
    fn tdmp_lag_term_separates_from_pure_mixing() {
        // Third coordinate minus the lag term equals the lag-free mixing.
        let spec = GenerativeSpec::ng_tdmp_default(13);
        let batch = generate(&spec, 100, 10, Exec::Auto).unwrap();
        let nets = spec.mixing.build(3);
        let mut checked = 0usize;
        for traj in 0..batch.n_traj {
            for t in 0..batch.t_len {
                let pure = nets.observe_current(batch.z_at(traj, t));
                let z_m1 = (t >= 1).then(|| batch.z_at(traj, t - 1));
                let z_m2 = (t >= 2).then(|| batch.z_at(traj, t - 2));
                let lag = nets.tdmp_lag_term(z_m1, z_m2);
                let x = batch.x_at(traj, t);
                assert!((x[0] - pure[0]).abs() < 1e-12);
                assert!((x[1] - pure[1]).abs() < 1e-12);
                assert!((x[2] - lag - pure[2]).abs() < 1e-12);
                checked += 1;
            }
        }
        assert_eq!(checked, 1000);
    }

    #[test]
    fn persistence_recursion_matches_direct_summation() {
        // x_t = Σ_i decay^i z_{t-i}, truncated at t = 0.
        let batch = generate_persistence(0.5, 44, 32, 12, Exec::Auto).unwrap();
        for traj in 0..batch.n_traj {
            for t in 0..batch.t_len {
                for k in 0..2 {
                    let direct: f64 =
                        (0..=t).map(|i| 0.5f64.powi(i as i32) * batch.z_at(traj, t - i)[k]).sum();
                    assert!((direct - batch.x_at(traj, t)[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn persistence_constant_latent_converges_geometrically() {
        // With constant z = c, x_t → c/(1-decay) = 2c for decay 0.5.
        let decay = 0.5f64;
        let c = 0.8f64;
        let mut x = c;
        for _ in 0..60 {
            x = c + decay * x;
        }
        assert!((x - 2.0 * c).abs() < 1e-12);
    }

    #[test]
    fn persistence_inverts_exactly() {
        // z_t = x_t − decay·x_{t-1} for all t ≥ 1.
        let batch = generate_persistence(0.5, 45, 16, 10, Exec::Auto).unwrap();
        for traj in 0..batch.n_traj {
            for t in 1..batch.t_len {
                for k in 0..2 {
                    let rec = batch.x_at(traj, t)[k] - 0.5 * batch.x_at(traj, t - 1)[k];
                    assert!((rec - batch.z_at(traj, t)[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conditional_sampling_matches_closed_form_density() {
        // Monte-Carlo draws of z_t given a fixed z_{t-1} agree with the
        // closed-form conditional for every density-tractable kind.
        let n_samples = 100_000;
        let tractable: Vec<(&str, TransitionSpec, usize)> = vec![
            ("post_nonlinear", GenerativeSpec::ng_default(0).transition, 3),
            (
                "linear_gaussian",
                TransitionSpec::LinearGaussian {
                    matrix: vec![vec![0.8, 0.1], vec![-0.2, 0.7]],
                },
                2,
            ),
            (
                "visual_persistence",
                GenerativeSpec::persistence_default(0.5, 0).transition,
                2,
            ),
        ];
        for (name, spec, n) in tractable {
            let nets = spec.build(n);
            let sigma = 0.1;
            let h: Vec<f64> = (0..n).map(|i| 0.3 + 0.2 * i as f64).collect();
            let mut rng = stream_rng(555, 0);
            let mut samples = vec![Vec::with_capacity(n_samples); n];
            let mut out = vec![0.0; n];
            let mut eps = vec![0.0; n];
            for _ in 0..n_samples {
                for e in eps.iter_mut() {
                    let raw: f64 = rng.sample(StandardNormal);
                    *e = sigma * raw;
                }
                nets.step(&h, &eps, &mut out);
                for (k, &v) in out.iter().enumerate() {
                    samples[k].push(v);
                }
            }
            for k in 0..n {
                // Recover mean/std from the closed form itself.
                let log_at = |z: f64| nets.log_conditional(k, z, &h, sigma).unwrap();
                // argmax of a Gaussian log density: fit via two probes.
                let mut zs = samples[k].clone();
                zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = zs[zs.len() / 2];
                let lp0 = log_at(med);
                let lp1 = log_at(med + 0.01);
                let lp2 = log_at(med - 0.01);
                // For log N(m,s²): second difference = −(Δz)²/s².
                let second = lp1 + lp2 - 2.0 * lp0;
                let s = (-(0.01f64.powi(2)) / second).sqrt();
                let slope = (lp1 - lp2) / 0.02;
                let m = med + slope * s * s;
                let d = ks_statistic(&samples[k], |v| normal_cdf(v, m, s));
                let crit = ks_critical(0.01, n_samples);
                assert!(d < crit, "{name} coordinate {k}: KS {d} vs {crit}");
            }
        }
    }
}
