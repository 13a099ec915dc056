//! Deterministic training loop and sweep orchestration.
//!
//! Everything downstream of (config, dataset bytes) is reproducible: model
//! init, per-epoch shuffles, and reparameterization noise all derive from
//! the run seed through fixed streams. Validation MCC is computed on
//! held-out trajectories only.

use crate::error::{CoreError, Result};
use crate::metrics::{encoded_samples, mcc};
use crate::model::{save_checkpoint, CaringModel, ModelHyper};
use crate::optim::{AdamW, OptimizerState};
use crate::rng::{derive_seed, stream_rng};
use crate::sim::TrajectoryBatch;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const DEFAULT_SEEDS: [u64; 4] = [770, 771, 772, 773];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub beta_kl: f64,
    /// Epochs over which the KL weight ramps linearly from 0 to `beta_kl`.
    pub kl_warmup_epochs: usize,
    pub eval_every: usize,
    /// Early stop after this many evaluations without improvement.
    pub patience: usize,
    pub weight_decay: f64,
    pub train_frac: f64,
    /// Encoder context length; `None` uses the dataset's recorded mu.
    pub mu: Option<usize>,
    /// Prior transition lag; `None` uses the dataset's tau.
    pub tau: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            seeds: DEFAULT_SEEDS.to_vec(),
            beta_kl: 1.0,
            kl_warmup_epochs: 10,
            eval_every: 1,
            patience: 15,
            weight_decay: 0.01,
            train_frac: 0.9,
            mu: None,
            tau: None,
        }
    }
}

impl TrainConfig {
    /// Stable hash of the resolved configuration; changes iff a field does.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hex_prefix(&hasher.finalize())
    }

    /// The invertibility-assuming baseline: identical pipeline with a
    /// window of length 1 (current observation only).
    pub fn context_free(&self) -> TrainConfig {
        TrainConfig { mu: Some(0), ..self.clone() }
    }

    pub fn resolve_mu(&self, batch: &TrajectoryBatch) -> usize {
        self.mu.unwrap_or(batch.spec.mu)
    }

    pub fn resolve_tau(&self, batch: &TrajectoryBatch) -> usize {
        self.tau.unwrap_or(batch.spec.tau)
    }
}

/// SHA-256 of raw bytes, shortened for directory names.
pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_prefix(&hasher.finalize())
}

/// Hash of a dataset's payload (z and x bytes).
pub fn dataset_hash(batch: &TrajectoryBatch) -> String {
    let mut hasher = Sha256::new();
    for v in batch.z.iter().chain(batch.x.iter()) {
        hasher.update(v.to_le_bytes());
    }
    hex_prefix(&hasher.finalize())
}

fn hex_prefix(digest: &[u8]) -> String {
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Per-dimension standard deviation of the observations (scale-only
/// normalization keeps zero-padded window slots at exact zero).
fn observation_scales(batch: &TrajectoryBatch) -> Vec<f64> {
    let d = batch.d_obs();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let count = (batch.n_traj * batch.t_len) as f64;
    for row in batch.x.chunks_exact(d) {
        for (k, v) in row.iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    (0..d)
        .map(|k| {
            let mean = sum[k] / count;
            (sq[k] / count - mean * mean).max(1e-24).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub kld: f64,
    pub val_mcc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs: Vec<EpochMetrics>,
    pub final_mcc: f64,
    pub best_mcc: f64,
    pub wall_seconds: f64,
    pub checkpoint: PathBuf,
    pub stopped_early: bool,
}

/// Train one model on `batch` with the given seed. Artifacts land in
/// `out_dir`: `metrics-<seed>.csv` (append-only), `last-<seed>.ckpt`
/// (refreshed at every evaluation), `final-<seed>.ckpt`.
pub fn train(
    config: &TrainConfig,
    batch: &TrajectoryBatch,
    seed: u64,
    out_dir: &Path,
) -> Result<RunRecord> {
    train_resumable(config, batch, seed, out_dir, None)
}

/// As [`train`], optionally continuing from a saved checkpoint. The shuffle
/// and noise streams are derived from (seed, epoch), so a resumed run walks
/// the same trajectory as an uninterrupted one.
pub fn train_resumable(
    config: &TrainConfig,
    batch: &TrajectoryBatch,
    seed: u64,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<RunRecord> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let mu = config.resolve_mu(batch);
    let tau = config.resolve_tau(batch);
    if batch.t_len <= tau {
        return Err(CoreError::Config(format!(
            "dataset t_len {} incompatible with tau {tau}",
            batch.t_len
        )));
    }
    let (train_split, val_split) = batch.split_train_val(config.train_frac);
    if train_split.n_traj == 0 || val_split.n_traj == 0 {
        return Err(CoreError::Config("train/val split left an empty side".into()));
    }

    let cfg_hash = config.hash();
    let data_hash = dataset_hash(batch);

    let mut hyper = ModelHyper::new(batch.n_latent(), batch.d_obs(), mu, tau);
    hyper.beta_kl = config.beta_kl;
    hyper.x_scale = observation_scales(&train_split);
    let (mut model, mut opt_state, start_epoch) = match resume_from {
        None => {
            let model = CaringModel::init(hyper, seed);
            let state = OptimizerState::for_params(model.params());
            (model, state, 0)
        }
        Some(path) => {
            let (model, state, manifest) = crate::model::load_checkpoint(path)?;
            if model.hyper != hyper {
                return Err(CoreError::Config(
                    "checkpoint hyperparameters disagree with config".into(),
                ));
            }
            if let Some(h) = &manifest.dataset_hash {
                if h != &data_hash {
                    return Err(CoreError::HashMismatch { expected: h.clone(), found: data_hash });
                }
            }
            let state = state
                .ok_or_else(|| CoreError::Config("checkpoint lacks optimizer state".into()))?;
            let batches = train_split.n_traj.div_ceil(config.batch_size) as u64;
            let epoch = (state.step / batches) as usize;
            (model, state, epoch)
        }
    };
    let optimizer = AdamW {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let names = model.param_names();

    // Window matrices are fixed across epochs; assemble once.
    let t_len = batch.t_len;
    let d = batch.d_obs();
    let w_extent = (mu + 1) * d;
    let train_windows = train_split.windows(mu);
    let n_train = train_split.n_traj;

    let metrics_path = out_dir.join(format!("metrics-{seed}.csv"));
    let mut resumed_best = f64::NEG_INFINITY;
    let mut metrics_file = if start_epoch == 0 {
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "epoch,recon,kld,val_mcc")?;
        f
    } else {
        // Carry the best-so-far over the restart so the final product is
        // identical to an uninterrupted run.
        if let Ok(existing) = fs::read_to_string(&metrics_path) {
            for line in existing.lines().skip(1) {
                if let Some(v) = line.rsplit(',').next().and_then(|v| v.parse::<f64>().ok()) {
                    resumed_best = resumed_best.max(v);
                }
            }
        }
        fs::OpenOptions::new().append(true).create(true).open(&metrics_path)?
    };

    let last_path = out_dir.join(format!("last-{seed}.ckpt"));
    let best_path = out_dir.join(format!("best-{seed}.ckpt"));
    let final_path = out_dir.join(format!("final-{seed}.ckpt"));

    let mut epochs_log = Vec::new();
    let mut best_mcc = resumed_best;
    let mut evals_since_best = 0usize;
    let mut stopped_early = false;

    let mut batch_windows = Tensor::zeros(vec![config.batch_size * t_len, w_extent]);
    let mut batch_x = Tensor::zeros(vec![config.batch_size * t_len, d]);

    'epochs: for epoch in start_epoch..config.epochs {
        // Seeded shuffle; depends only on (seed, epoch).
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng = stream_rng(derive_seed(seed, 1_000_000 + epoch as u64), 0);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut recon_sum = 0.0;
        let mut kld_sum = 0.0;
        let mut iters = 0usize;
        let beta = if config.kl_warmup_epochs > 0 && epoch < config.kl_warmup_epochs {
            config.beta_kl * (epoch as f64 + 1.0) / config.kl_warmup_epochs as f64
        } else {
            config.beta_kl
        };

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let rows = chunk.len() * t_len;
            if batch_windows.rows() != rows {
                batch_windows = Tensor::zeros(vec![rows, w_extent]);
                batch_x = Tensor::zeros(vec![rows, d]);
            }
            for (bi, &traj) in chunk.iter().enumerate() {
                for t in 0..t_len {
                    let dst = (bi * t_len + t) * w_extent;
                    let src = (traj * t_len + t) * w_extent;
                    batch_windows.data_mut()[dst..dst + w_extent]
                        .copy_from_slice(&train_windows.data()[src..src + w_extent]);
                    let dst = (bi * t_len + t) * d;
                    batch_x.data_mut()[dst..dst + d].copy_from_slice(train_split.x_at(traj, t));
                }
            }
            let mut noise_rng =
                stream_rng(derive_seed(seed, 2_000_000 + epoch as u64), batch_idx as u64);
            let noise = model.draw_noise(rows, &mut noise_rng);

            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let graph = match model.elbo_record(
                &mut tape,
                &vars,
                &batch_windows,
                &batch_x,
                &noise,
                chunk.len(),
                t_len,
                beta,
            ) {
                Ok(g) => g,
                Err(e) => {
                    return Err(CoreError::Diverged(format!(
                        "epoch {epoch}, batch {batch_idx}: {e}; last good checkpoint at {}",
                        last_path.display()
                    )));
                }
            };
            let (bad, total) = graph.degenerate;
            if bad * 100 > total {
                return Err(CoreError::Diverged(format!(
                    "epoch {epoch}, batch {batch_idx}: {bad}/{total} flow Jacobian entries degenerate"
                )));
            }
            recon_sum += tape.value(graph.recon).scalar_value();
            kld_sum += tape.value(graph.kld).scalar_value();
            iters += 1;

            let mut grads = tape.backward(graph.total)?;
            let grad_list = model.collect_grads(&mut grads, &vars);
            drop(tape);
            let mut params = model.params_mut();
            optimizer.step(&mut opt_state, &names, &mut params, &grad_list)?;
        }

        let evaluate = (epoch + 1) % config.eval_every.max(1) == 0 || epoch + 1 == config.epochs;
        if evaluate {
            let (z_true, z_est) = encoded_samples(&model, &val_split)?;
            let val_mcc = mcc(&z_true, &z_est).mcc;
            let m = EpochMetrics {
                epoch,
                recon: recon_sum / iters.max(1) as f64,
                kld: kld_sum / iters.max(1) as f64,
                val_mcc,
            };
            writeln!(metrics_file, "{},{},{},{}", m.epoch, m.recon, m.kld, m.val_mcc)?;
            epochs_log.push(m);
            save_checkpoint(
                &last_path,
                &model,
                Some(&opt_state),
                opt_state.step,
                seed,
                Some(data_hash.clone()),
                Some(cfg_hash.clone()),
            )?;
            if val_mcc > best_mcc + 1e-5 {
                best_mcc = val_mcc;
                evals_since_best = 0;
                save_checkpoint(
                    &best_path,
                    &model,
                    Some(&opt_state),
                    opt_state.step,
                    seed,
                    Some(data_hash.clone()),
                    Some(cfg_hash.clone()),
                )?;
            } else {
                evals_since_best += 1;
                if evals_since_best >= config.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }

    // The run's product is the best-validation model.
    if best_path.exists() {
        fs::copy(&best_path, &final_path)?;
    } else {
        save_checkpoint(
            &final_path,
            &model,
            Some(&opt_state),
            opt_state.step,
            seed,
            Some(data_hash.clone()),
            Some(cfg_hash.clone()),
        )?;
    }
    let final_mcc = if best_mcc.is_finite() {
        best_mcc
    } else {
        epochs_log.last().map(|m| m.val_mcc).unwrap_or(f64::NAN)
    };
    Ok(RunRecord {
        seed,
        config_hash: cfg_hash,
        dataset_hash: data_hash,
        epochs: epochs_log,
        final_mcc,
        best_mcc,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint: final_path,
        stopped_early,
    })
}

/// Train every seed in the config; runs may execute on up to `jobs` threads
/// (each run is internally deterministic and independent).
pub fn train_multi(
    config: &TrainConfig,
    batch: &TrajectoryBatch,
    out_dir: &Path,
    jobs: usize,
) -> Vec<Result<RunRecord>> {
    let jobs = jobs.max(1);
    let seeds = config.seeds.clone();
    let mut results: Vec<Option<Result<RunRecord>>> = (0..seeds.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results_mx = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = train(config, batch, seeds[i], out_dir);
                results_mx.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

/// Sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Mu,
    Tau,
    Seed,
}

impl std::str::FromStr for SweepAxis {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(SweepAxis::Mu),
            "tau" => Ok(SweepAxis::Tau),
            "seed" => Ok(SweepAxis::Seed),
            other => Err(CoreError::Usage(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: u64,
    pub seed: u64,
    pub final_mcc: Option<f64>,
    pub error: Option<String>,
}

/// One run per axis value under a shared base-seed policy; failures mark
/// their row without aborting the sweep. Writes a consolidated `sweep.csv`.
pub fn sweep(
    config: &TrainConfig,
    batch: &TrajectoryBatch,
    axis: SweepAxis,
    values: &[u64],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(out_dir)?;
    let base_seed = *config.seeds.first().unwrap_or(&DEFAULT_SEEDS[0]);
    let mut rows = Vec::new();
    for &value in values {
        let mut cfg = config.clone();
        let seed = match axis {
            SweepAxis::Mu => {
                cfg.mu = Some(value as usize);
                base_seed
            }
            SweepAxis::Tau => {
                cfg.tau = Some(value as usize);
                base_seed
            }
            SweepAxis::Seed => value,
        };
        let run_dir = out_dir.join(format!("{axis:?}-{value}").to_lowercase());
        match train(&cfg, batch, seed, &run_dir) {
            Ok(record) => rows.push(SweepRow {
                axis_value: value,
                seed,
                final_mcc: Some(record.final_mcc),
                error: None,
            }),
            Err(e) => rows.push(SweepRow {
                axis_value: value,
                seed,
                final_mcc: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let mut f = fs::File::create(out_dir.join("sweep.csv"))?;
    writeln!(f, "seed,axis_value,final_mcc")?;
    for row in &rows {
        writeln!(
            f,
            "{},{},{}",
            row.seed,
            row.axis_value,
            row.final_mcc.map(|v| v.to_string()).unwrap_or_else(|| "failed".into())
        )?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::Exec;
    use crate::sim::{generate, GenerativeSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            kl_warmup_epochs: 1,
            seeds: vec![770],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_hash_changes_with_any_field() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.learning_rate = 2e-3;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seeds = vec![770];
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let spec = GenerativeSpec::persistence_default(0.5, 7);
        let batch = generate(&spec, 40, 6, Exec::Auto).unwrap();
        let cfg = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = train(&cfg, &batch, 770, d1.path()).unwrap();
        let r2 = train(&cfg, &batch, 770, d2.path()).unwrap();
        assert_eq!(r1.final_mcc, r2.final_mcc);
        let b1 = std::fs::read(&r1.checkpoint).unwrap();
        let b2 = std::fs::read(&r2.checkpoint).unwrap();
        assert_eq!(b1, b2, "final parameters must be bit-identical");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let spec = GenerativeSpec::persistence_default(0.5, 8);
        let batch = generate(&spec, 32, 6, Exec::Auto).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 3;
        let full_dir = tempfile::tempdir().unwrap();
        let full = train(&cfg, &batch, 770, full_dir.path()).unwrap();

        let mut head_cfg = cfg.clone();
        head_cfg.epochs = 1;
        let part_dir = tempfile::tempdir().unwrap();
        train(&head_cfg, &batch, 770, part_dir.path()).unwrap();
        let resumed = train_resumable(
            &cfg,
            &batch,
            770,
            part_dir.path(),
            Some(&part_dir.path().join("final-770.ckpt")),
        )
        .unwrap();
        assert_eq!(
            std::fs::read(&full.checkpoint).unwrap(),
            std::fs::read(&resumed.checkpoint).unwrap()
        );
    }

    #[test]
    fn sweep_over_single_value_equals_plain_training() {
        let spec = GenerativeSpec::persistence_default(0.5, 9);
        let batch = generate(&spec, 24, 6, Exec::Auto).unwrap();
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let rows = sweep(&cfg, &batch, SweepAxis::Seed, &[770], dir.path()).unwrap();
        assert_eq!(rows.len(), 1);
        let single_dir = tempfile::tempdir().unwrap();
        let single = train(&cfg, &batch, 770, single_dir.path()).unwrap();
        assert_eq!(rows[0].final_mcc, Some(single.final_mcc));
    }

    #[test]
    fn sweep_marks_failed_rows_and_continues() {
        let spec = GenerativeSpec::persistence_default(0.5, 10);
        let batch = generate(&spec, 24, 6, Exec::Auto).unwrap();
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        // tau = 7 exceeds the trajectory length; tau = 1 is fine.
        let rows = sweep(&cfg, &batch, SweepAxis::Tau, &[7, 1], dir.path()).unwrap();
        assert!(rows[0].error.is_some());
        assert!(rows[1].final_mcc.is_some());
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert!(csv.contains("failed"));
    }

    #[test]
    fn seed_std_matches_recomputation_from_rows() {
        // The summary standard deviation equals the sample std of the
        // per-seed final MCCs.
        let values = [0.91, 0.93, 0.92, 0.95];
        let (_, sd) = crate::stats::mean_std(&values);
        let mean = values.iter().sum::<f64>() / 4.0;
        let manual = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((sd - manual).abs() < 1e-15);
    }
}
