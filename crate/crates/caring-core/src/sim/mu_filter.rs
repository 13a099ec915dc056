//! Context-length recoverability filter.
//!
//! For each candidate context length μ, fit ordinary least squares from the
//! flattened window x_{t:t-μ} to z_t over all fully observed steps and report
//! per-coordinate R². The chosen μ is the smallest whose worst coordinate
//! meets the threshold; if none passes, the result says so explicitly.

use super::TrajectoryBatch;
use crate::parallel::{map_collect, Exec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const DEFAULT_R2_THRESHOLD: f64 = 0.95;
pub const DEFAULT_MU_CANDIDATES: &[usize] = &[0, 1, 2, 3, 4, 5, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuFit {
    pub mu: usize,
    /// R² per latent coordinate.
    pub r2: Vec<f64>,
}

impl MuFit {
    pub fn min_r2(&self) -> f64 {
        self.r2.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuFilterReport {
    pub per_mu: Vec<MuFit>,
    pub r2_threshold: f64,
    /// Smallest candidate whose minimum R² meets the threshold; `None` means
    /// irrecoverable at every tested μ.
    pub chosen_mu: Option<usize>,
}

impl MuFilterReport {
    pub fn describe(&self) -> String {
        match self.chosen_mu {
            Some(mu) => format!("recoverable at mu={mu} (threshold {})", self.r2_threshold),
            None => {
                let tested: Vec<String> = self.per_mu.iter().map(|f| f.mu.to_string()).collect();
                format!("irrecoverable at tested mu ({})", tested.join(","))
            }
        }
    }
}

/// Per-coordinate R² of the OLS fit from x_{t:t-mu} to z_t.
pub fn ols_window_fit(batch: &TrajectoryBatch, mu: usize, exec: Exec) -> MuFit {
    let d = batch.d_obs();
    let n = batch.n_latent();
    let k = (mu + 1) * d + 1; // window + intercept
    assert!(batch.t_len > mu, "window longer than trajectories");

    // Accumulate XᵀX and XᵀZ per trajectory chunk, then reduce in index
    // order so the result is independent of scheduling.
    let parts = map_collect(exec, batch.n_traj, |traj| {
        let mut xtx = DMatrix::<f64>::zeros(k, k);
        let mut xtz = DMatrix::<f64>::zeros(k, n);
        let mut row = vec![0.0; k];
        for t in mu..batch.t_len {
            for j in 0..=mu {
                let src = batch.x_at(traj, t - j);
                row[j * d..(j + 1) * d].copy_from_slice(src);
            }
            row[k - 1] = 1.0;
            let z = batch.z_at(traj, t);
            for a in 0..k {
                for b in a..k {
                    xtx[(a, b)] += row[a] * row[b];
                }
                for c in 0..n {
                    xtz[(a, c)] += row[a] * z[c];
                }
            }
        }
        (xtx, xtz)
    });
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xtz = DMatrix::<f64>::zeros(k, n);
    for (px, pz) in parts {
        xtx += px;
        xtz += pz;
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }

    // Small ridge keeps the solve well-posed when windows are collinear.
    for a in 0..k {
        xtx[(a, a)] += 1e-9;
    }
    let beta = xtx
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&xtz))
        .unwrap_or_else(|| xtx.lu().solve(&xtz).expect("normal equations solvable"));

    // Residuals per coordinate.
    let samples = (batch.n_traj * (batch.t_len - mu)) as f64;
    let mut z_sum = vec![0.0; n];
    let mut z_sq = vec![0.0; n];
    let sse_parts = map_collect(exec, batch.n_traj, |traj| {
        let mut sse = vec![0.0; n];
        let mut row = vec![0.0; k];
        for t in mu..batch.t_len {
            for j in 0..=mu {
                let src = batch.x_at(traj, t - j);
                row[j * d..(j + 1) * d].copy_from_slice(src);
            }
            row[k - 1] = 1.0;
            let z = batch.z_at(traj, t);
            for c in 0..n {
                let pred: f64 = (0..k).map(|a| row[a] * beta[(a, c)]).sum();
                let e = z[c] - pred;
                sse[c] += e * e;
            }
        }
        sse
    });
    let mut sse = vec![0.0; n];
    for p in sse_parts {
        for (a, b) in sse.iter_mut().zip(p) {
            *a += b;
        }
    }
    for traj in 0..batch.n_traj {
        for t in mu..batch.t_len {
            for (c, &zc) in batch.z_at(traj, t).iter().enumerate() {
                z_sum[c] += zc;
                z_sq[c] += zc * zc;
            }
        }
    }
    let r2 = (0..n)
        .map(|c| {
            let sst = z_sq[c] - z_sum[c] * z_sum[c] / samples;
            if sst <= 1e-12 {
                0.0
            } else {
                1.0 - sse[c] / sst
            }
        })
        .collect();
    MuFit { mu, r2 }
}

/// Run the filter over all candidates and choose the smallest passing μ.
pub fn mu_filter(
    batch: &TrajectoryBatch,
    candidates: &[usize],
    r2_threshold: f64,
    exec: Exec,
) -> MuFilterReport {
    let mut per_mu: Vec<MuFit> =
        candidates.iter().map(|&mu| ols_window_fit(batch, mu, exec)).collect();
    per_mu.sort_by_key(|f| f.mu);
    let chosen_mu = per_mu.iter().find(|f| f.min_r2() >= r2_threshold).map(|f| f.mu);
    MuFilterReport { per_mu, r2_threshold, chosen_mu }
}
