//! Identifiability metrics: mean correlation coefficient under optimal
//! assignment, and Jacobian row-dominance between true and estimated
//! latents.

mod hungarian;

pub use hungarian::{brute_force_assignment, hungarian};

use crate::error::{CoreError, Result};
use crate::model::{CaringModel, ElboValue};
use crate::numdiff::central_jacobian;
use crate::parallel::{map_collect, Exec};
use crate::sim::TrajectoryBatch;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Absolute-Pearson correlation structure between true and estimated
/// latents, with the assignment that maximizes the mean matched correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// |Pearson| matrix, rows = true coordinates, cols = estimated.
    pub corr: Vec<Vec<f64>>,
    /// Matched estimated index per true coordinate; `None` when a true
    /// coordinate was matched to padding (rectangular case).
    pub assignment: Vec<Option<usize>>,
    /// Mean matched |correlation| over the min(n_true, n_est) real pairs.
    pub mcc: f64,
    pub warnings: Vec<String>,
}

/// MCC between sample matrices `[S, n_true]` and `[S, n_est]`.
pub fn mcc(z_true: &Tensor, z_est: &Tensor) -> CorrelationReport {
    assert_eq!(z_true.rows(), z_est.rows(), "sample counts must match");
    let s = z_true.rows();
    let (nt, ne) = (z_true.cols(), z_est.cols());
    let mut warnings = Vec::new();

    let stats = |t: &Tensor, c: usize| -> (f64, f64) {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for r in 0..s {
            let v = t.row(r)[c];
            sum += v;
            sq += v * v;
        }
        let mean = sum / s as f64;
        (mean, sq / s as f64 - mean * mean)
    };
    let t_stats: Vec<(f64, f64)> = (0..nt).map(|c| stats(z_true, c)).collect();
    let e_stats: Vec<(f64, f64)> = (0..ne).map(|c| stats(z_est, c)).collect();
    for (c, (_, var)) in t_stats.iter().enumerate() {
        if *var <= 1e-12 {
            warnings.push(format!("true coordinate {c} has (near-)zero variance"));
        }
    }
    for (c, (_, var)) in e_stats.iter().enumerate() {
        if *var <= 1e-12 {
            warnings.push(format!("estimated coordinate {c} has (near-)zero variance"));
        }
    }

    let mut corr = vec![vec![0.0; ne]; nt];
    for (i, row) in corr.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            let (mt, vt) = t_stats[i];
            let (me, ve) = e_stats[j];
            if vt <= 1e-12 || ve <= 1e-12 {
                *out = 0.0;
                continue;
            }
            let mut cov = 0.0;
            for r in 0..s {
                cov += (z_true.row(r)[i] - mt) * (z_est.row(r)[j] - me);
            }
            cov /= s as f64;
            *out = (cov / (vt * ve).sqrt()).abs();
        }
    }

    // Pad to square with cost 1 (correlation 0) and solve the assignment.
    let k = nt.max(ne);
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| if i < nt && j < ne { 1.0 - corr[i][j] } else { 1.0 })
                .collect()
        })
        .collect();
    let assign = hungarian(&cost);
    let assignment: Vec<Option<usize>> = (0..nt)
        .map(|i| {
            let j = assign[i];
            (j < ne).then_some(j)
        })
        .collect();
    let matched: Vec<f64> = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| corr[i][j]))
        .collect();
    let mcc = if matched.is_empty() {
        0.0
    } else {
        matched.iter().sum::<f64>() / matched.len() as f64
    };
    CorrelationReport { corr, assignment, mcc, warnings }
}

/// Row-dominance structure of estimated-vs-true Jacobians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianScore {
    /// One matrix per probe point; rows = estimated components, columns =
    /// ground-truth coordinates.
    pub jacobians: Vec<Vec<Vec<f64>>>,
    /// Mean over rows and samples of max|entry| / row 1-norm. Equals 1
    /// exactly when every row has a single non-zero entry.
    pub dominance: f64,
}

/// Dominance of a set of Jacobian matrices.
pub fn rowwise_dominance(jacobians: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for jac in jacobians {
        for row in jac {
            let norm1: f64 = row.iter().map(|v| v.abs()).sum();
            let max: f64 = row.iter().map(|v| v.abs()).fold(0.0, f64::max);
            count += 1;
            if norm1 > 1e-12 {
                total += max / norm1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Dominance of an arbitrary map's Jacobian at the given points.
pub fn jacobian_dominance_of_map(
    map: impl Fn(&[f64]) -> Vec<f64> + Sync,
    points: &[Vec<f64>],
    steps: &[f64],
    exec: Exec,
) -> JacobianScore {
    let jacobians = map_collect(exec, points.len(), |i| {
        central_jacobian(&map, &points[i], steps)
    });
    let dominance = rowwise_dominance(&jacobians);
    JacobianScore { jacobians, dominance }
}

/// Dominance of the composed map z_t → x-window → ẑ_t for a frozen model on
/// states drawn from the generator, history held fixed per probe point.
pub fn jacobian_dominance(
    model: &CaringModel,
    batch: &TrajectoryBatch,
    n_points: usize,
    exec: Exec,
) -> Result<JacobianScore> {
    let spec = &batch.spec;
    let mu = model.hyper.mu;
    let n = spec.n_latent;
    let t_probe = mu.max(spec.r).max(1);
    if batch.t_len <= t_probe {
        return Err(CoreError::Config(format!(
            "need trajectories longer than {t_probe} steps for probing"
        )));
    }
    if n_points == 0 || n_points > batch.n_traj {
        return Err(CoreError::Usage(format!(
            "n_points must lie in 1..={}, got {n_points}",
            batch.n_traj
        )));
    }

    // Per-coordinate probe steps: relative to the state scale.
    let mut scale = vec![0.0f64; n];
    for traj in 0..batch.n_traj {
        for (k, v) in batch.z_at(traj, t_probe).iter().enumerate() {
            scale[k] += v * v;
        }
    }
    let steps: Vec<f64> = scale
        .iter()
        .map(|sq| 1e-4 * (sq / batch.n_traj as f64).sqrt().max(1e-3))
        .collect();
    if steps.iter().any(|&h| !(h > f64::EPSILON)) {
        return Err(CoreError::Config("finite-difference step underflow".into()));
    }

    let mixing = spec.mixing.build(spec.d_obs);
    let d = spec.d_obs;
    let w = (mu + 1) * d;
    let jacobians = map_collect(exec, n_points, |traj| {
        // Window with slot 0 recomputed from the perturbed z_t; the
        // history (slots 1..=mu and the mixing lags) stays fixed.
        let probe = |z_t: &[f64]| -> Vec<f64> {
            let mut obs = mixing.observe_current(z_t);
            match &mixing {
                crate::sim::MixingNets::Persistence { decay } => {
                    for (o, xp) in obs.iter_mut().zip(batch.x_at(traj, t_probe - 1)) {
                        *o += decay * xp;
                    }
                }
                crate::sim::MixingNets::Tdmp { .. } => {
                    let z_m1 = Some(batch.z_at(traj, t_probe - 1));
                    let z_m2 = (t_probe >= 2).then(|| batch.z_at(traj, t_probe - 2));
                    obs[2] += mixing.tdmp_lag_term(z_m1, z_m2);
                }
                crate::sim::MixingNets::Dropdim { .. } => {}
            }
            let mut window = vec![0.0; w];
            window[..d].copy_from_slice(&obs);
            for k in 1..=mu {
                if t_probe >= k {
                    window[k * d..(k + 1) * d].copy_from_slice(batch.x_at(traj, t_probe - k));
                }
            }
            let wt = Tensor::new(vec![1, w], window);
            model.encode(&wt, None).expect("probe encoding").z.into_data()
        };
        central_jacobian(probe, batch.z_at(traj, t_probe), &steps)
    });
    let dominance = rowwise_dominance(&jacobians);
    Ok(JacobianScore { jacobians, dominance })
}

/// Full evaluation of a frozen model on a batch: MCC on steps with complete
/// windows, loss decomposition, and optional dominance probing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mcc: f64,
    pub corr: Vec<Vec<f64>>,
    pub assignment: Vec<Option<usize>>,
    pub dominance: Option<f64>,
    pub loss: ElboValue,
    /// Split the samples came from ("train" / "val" / "full").
    pub split: String,
    pub samples: usize,
    /// Steps before this index are excluded (padded windows).
    pub steps_from: usize,
    pub warnings: Vec<String>,
}

/// Encoder means on complete-window steps, paired with the true latents.
pub fn encoded_samples(model: &CaringModel, batch: &TrajectoryBatch) -> Result<(Tensor, Tensor)> {
    let mu = model.hyper.mu;
    if batch.t_len <= mu {
        return Err(CoreError::Config("trajectories shorter than the window".into()));
    }
    let windows = batch.windows(mu);
    let post = model.encode(&windows, None)?;
    let keep_per_traj = batch.t_len - mu;
    let rows = batch.n_traj * keep_per_traj;
    let n = batch.n_latent();
    let zd = model.hyper.z_dim;
    let mut z_true = Vec::with_capacity(rows * n);
    let mut z_est = Vec::with_capacity(rows * zd);
    for traj in 0..batch.n_traj {
        for t in mu..batch.t_len {
            z_true.extend_from_slice(batch.z_at(traj, t));
            z_est.extend_from_slice(post.mean.row(traj * batch.t_len + t));
        }
    }
    Ok((Tensor::new(vec![rows, n], z_true), Tensor::new(vec![rows, zd], z_est)))
}

pub fn evaluate_model(
    model: &CaringModel,
    batch: &TrajectoryBatch,
    eval_seed: u64,
    with_dominance: bool,
    exec: Exec,
) -> Result<EvalReport> {
    let (z_true, z_est) = encoded_samples(model, batch)?;
    let report = mcc(&z_true, &z_est);
    let windows = batch.windows(model.hyper.mu);
    let x = Tensor::new(
        vec![batch.n_traj * batch.t_len, batch.d_obs()],
        batch.x.clone(),
    );
    let noise = model.draw_noise(batch.n_traj * batch.t_len, &mut crate::rng::stream_rng(eval_seed, 0));
    let loss = model.elbo_value(&windows, &x, &noise, batch.n_traj, batch.t_len, model.hyper.beta_kl)?;
    let dominance = if with_dominance {
        let points = batch.n_traj.min(64);
        Some(jacobian_dominance(model, batch, points, exec)?.dominance)
    } else {
        None
    };
    Ok(EvalReport {
        mcc: report.mcc,
        corr: report.corr,
        assignment: report.assignment,
        dominance,
        loss,
        split: format!("{:?}", batch.split).to_lowercase(),
        samples: z_true.rows(),
        steps_from: model.hyper.mu,
        warnings: report.warnings,
    })
}
