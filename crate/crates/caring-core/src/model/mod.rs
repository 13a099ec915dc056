//! Sequential variational model with a flow transition prior.
//!
//! Three parts, wired per the architecture used throughout:
//!
//! - sequence-to-step encoder q(ẑ_t | x_{t:t-μ}): an MLP over zero-padded
//!   observation windows, followed by linear mean/log-variance heads;
//! - step-to-step decoder p(x̂_t | ẑ_t): an MLP with no temporal mixing;
//! - transition prior: per-coordinate networks ε̂_it = f̂ᵢ⁻¹(ẑ_it, ẑ_{t-1:t-τ})
//!   mapping the current coordinate plus the lagged block to a noise
//!   estimate. Because component i never reads ẑ_jt (j ≠ i), the Jacobian of
//!   the map ẑ_t → ε̂_t is triangular and its log-determinant reduces to the
//!   sum of log |∂ε̂_it/∂ẑ_it|, each of which is built as a differentiable
//!   tape expression.
//!
//! Batches are flattened to rows: `[B·T, …]`, trajectory-major.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};

use crate::error::{CoreError, Result};
use crate::nn::{Activation, DenseLayer, Mlp, MlpVars, DEFAULT_LEAKY_SLOPE};
use crate::rng::stream_rng;
use crate::stats::LN_2PI;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Barrier keeping the trained flow's diagonal positively oriented; see
/// the note in [`CaringModel::elbo_record`].
const ORIENTATION_SHARPNESS: f64 = 10.0;
const ORIENTATION_WEIGHT: f64 = 1.0;

/// Initial decoder log-variance (per observation dimension, learned):
/// starts at sigma = 0.1 in normalized observation units.
pub const DEC_LOGVAR_INIT: f64 = -4.605170185988091;
const DEC_LOGVAR_MIN: f64 = -10.0;
const DEC_LOGVAR_MAX: f64 = 4.0;

/// Architecture and objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub z_dim: usize,
    pub d_obs: usize,
    /// Context length of the encoder window.
    pub mu: usize,
    /// Transition lag of the prior.
    pub tau: usize,
    pub beta_kl: f64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub flow_hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// log-variance clamp bound (symmetric).
    pub logvar_bound: f64,
    /// Per-dimension observation scale; inputs and targets are divided by
    /// it. Scale-only (no centering) so zero-padded window slots stay zero.
    pub x_scale: Vec<f64>,
}

impl ModelHyper {
    pub fn new(z_dim: usize, d_obs: usize, mu: usize, tau: usize) -> Self {
        ModelHyper {
            z_dim,
            d_obs,
            mu,
            tau,
            beta_kl: 1.0,
            encoder_hidden: vec![128, 128, 128],
            decoder_hidden: vec![128, 128],
            flow_hidden: vec![32, 32],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            logvar_bound: 10.0,
            x_scale: vec![1.0; d_obs],
        }
    }

    pub fn window_extent(&self) -> usize {
        (self.mu + 1) * self.d_obs
    }

    fn flow_input_extent(&self) -> usize {
        1 + self.z_dim * self.tau
    }

    fn normalize_windows(&self, windows: &Tensor) -> Tensor {
        let d = self.d_obs;
        let mut out = windows.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (slot, v) in row.iter_mut().enumerate() {
                *v /= self.x_scale[slot % d];
            }
        }
        out
    }

    fn normalize_x(&self, x: &Tensor) -> Tensor {
        let d = self.d_obs;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, s) in row.iter_mut().zip(&self.x_scale) {
                *v /= s;
            }
        }
        out
    }
}

/// The transition prior's functional form. The MLP flow is the working
/// configuration; `Identity` and `Scale` exist for oracle wiring in tests
/// and for degenerate regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowKind {
    Mlp,
    Identity,
    Scale { factor: f64 },
}

#[derive(Debug, Clone)]
pub struct CaringModel {
    pub hyper: ModelHyper,
    pub flow_kind: FlowKind,
    pub encoder: Mlp,
    pub mean_head: DenseLayer,
    pub logvar_head: DenseLayer,
    pub decoder: Mlp,
    /// Per-dimension log-variance of the Gaussian decoder likelihood,
    /// learned so each observation channel weighs its own residual.
    pub dec_logvar: Tensor,
    /// One network per latent coordinate (empty unless `flow_kind == Mlp`).
    pub flows: Vec<Mlp>,
}

/// Per-step posterior parameters and the reparameterized sample, flattened
/// to `[rows, z_dim]`.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub z: Tensor,
    /// The standard-normal draws used; `None` for deterministic encoding
    /// (z == mean).
    pub noise: Option<Tensor>,
}

/// Tape handles for one full pass.
pub struct ModelVars {
    encoder: MlpVars,
    mean_head: (Var, Var),
    logvar_head: (Var, Var),
    decoder: MlpVars,
    dec_logvar: Var,
    flows: Vec<MlpVars>,
}

/// ELBO graph endpoints plus degeneracy diagnostics.
pub struct ElboGraph {
    pub total: Var,
    pub recon: Var,
    pub kld: Var,
    /// Entries of the flow Jacobian diagonal with |∂ε̂/∂ẑ| < 1e-12, over the
    /// total number of entries.
    pub degenerate: (usize, usize),
}

/// Loss decomposition values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub total: f64,
    pub recon: f64,
    pub kld: f64,
}

impl CaringModel {
    pub fn init(hyper: ModelHyper, seed: u64) -> Self {
        Self::init_with_flow(hyper, FlowKind::Mlp, seed)
    }

    pub fn init_with_flow(hyper: ModelHyper, flow_kind: FlowKind, seed: u64) -> Self {
        let act = Activation::LeakyRelu { slope: hyper.leaky_slope };
        let mut enc_extents = vec![hyper.window_extent()];
        enc_extents.extend(&hyper.encoder_hidden);
        enc_extents.push(hyper.z_dim);
        let encoder = Mlp::init(&mut stream_rng(seed, 1), &enc_extents, act);

        let mean_head =
            DenseLayer::init(&mut stream_rng(seed, 2), hyper.z_dim, hyper.z_dim, Activation::Identity);
        let logvar_head =
            DenseLayer::init(&mut stream_rng(seed, 3), hyper.z_dim, hyper.z_dim, Activation::Identity);

        let mut dec_extents = vec![hyper.z_dim];
        dec_extents.extend(&hyper.decoder_hidden);
        dec_extents.push(hyper.d_obs);
        let decoder = Mlp::init(&mut stream_rng(seed, 4), &dec_extents, act);

        let flows = match flow_kind {
            FlowKind::Mlp => (0..hyper.z_dim)
                .map(|i| {
                    let mut extents = vec![hyper.flow_input_extent()];
                    extents.extend(&hyper.flow_hidden);
                    extents.push(1);
                    Mlp::init(&mut stream_rng(seed, 16 + i as u64), &extents, act)
                })
                .collect(),
            _ => Vec::new(),
        };

        let dec_logvar = Tensor::new(vec![1, hyper.d_obs], vec![DEC_LOGVAR_INIT; hyper.d_obs]);
        CaringModel { hyper, flow_kind, encoder, mean_head, logvar_head, decoder, dec_logvar, flows }
    }

    /// Canonical parameter order: encoder, heads, decoder, flows.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut mlp = |prefix: &str, m: &Mlp, names: &mut Vec<String>| {
            for (i, _) in m.layers.iter().enumerate() {
                names.push(format!("{prefix}.{i}.w"));
                names.push(format!("{prefix}.{i}.b"));
            }
        };
        mlp("encoder", &self.encoder, &mut names);
        names.push("mean_head.w".into());
        names.push("mean_head.b".into());
        names.push("logvar_head.w".into());
        names.push("logvar_head.b".into());
        mlp("decoder", &self.decoder, &mut names);
        names.push("decoder.logvar".into());
        for (i, f) in self.flows.iter().enumerate() {
            mlp(&format!("flow.{i}"), f, &mut names);
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.encoder.layers {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.mean_head.weights);
        out.push(&self.mean_head.bias);
        out.push(&self.logvar_head.weights);
        out.push(&self.logvar_head.bias);
        for l in &self.decoder.layers {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.dec_logvar);
        for f in &self.flows {
            for l in &f.layers {
                out.push(&l.weights);
                out.push(&l.bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.mean_head.weights);
        out.push(&mut self.mean_head.bias);
        out.push(&mut self.logvar_head.weights);
        out.push(&mut self.logvar_head.bias);
        for l in &mut self.decoder.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.dec_logvar);
        for f in &mut self.flows {
            for l in &mut f.layers {
                out.push(&mut l.weights);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape),
            mean_head: (tape.leaf(self.mean_head.weights.clone()), tape.leaf(self.mean_head.bias.clone())),
            logvar_head: (
                tape.leaf(self.logvar_head.weights.clone()),
                tape.leaf(self.logvar_head.bias.clone()),
            ),
            decoder: self.decoder.bind(tape),
            dec_logvar: tape.leaf(self.dec_logvar.clone()),
            flows: self.flows.iter().map(|f| f.bind(tape)).collect(),
        }
    }

    /// Gradients for every parameter, in [`Self::params`] order.
    pub fn collect_grads(&self, grads: &mut crate::tape::Gradients, vars: &ModelVars) -> Vec<Tensor> {
        let mut out = Vec::new();
        for &(w, b) in &vars.encoder.layers {
            out.push(grads.take(w));
            out.push(grads.take(b));
        }
        out.push(grads.take(vars.mean_head.0));
        out.push(grads.take(vars.mean_head.1));
        out.push(grads.take(vars.logvar_head.0));
        out.push(grads.take(vars.logvar_head.1));
        for &(w, b) in &vars.decoder.layers {
            out.push(grads.take(w));
            out.push(grads.take(b));
        }
        out.push(grads.take(vars.dec_logvar));
        for f in &vars.flows {
            for &(w, b) in &f.layers {
                out.push(grads.take(w));
                out.push(grads.take(b));
            }
        }
        out
    }

    // -- plain (tape-free) paths ------------------------------------------

    /// Encode windows into per-step posteriors. `noise` rows are standard
    /// normal draws; `None` yields the deterministic z == mean encoding.
    pub fn encode(&self, windows: &Tensor, noise: Option<&Tensor>) -> Result<PosteriorSample> {
        if windows.cols() != self.hyper.window_extent() {
            return Err(CoreError::Config(format!(
                "window extent {} does not match (mu+1)*d = {}",
                windows.cols(),
                self.hyper.window_extent()
            )));
        }
        let trunk = self.encoder.forward(&self.hyper.normalize_windows(windows))?;
        let mean = forward_linear(&self.mean_head, &trunk);
        let bound = self.hyper.logvar_bound;
        let log_var = forward_linear(&self.logvar_head, &trunk).map(|v| v.clamp(-bound, bound));
        let z = match noise {
            None => mean.clone(),
            Some(n) => {
                assert_eq!(n.shape(), mean.shape(), "noise shape");
                let mut z = mean.clone();
                for ((z, lv), e) in z.data_mut().iter_mut().zip(log_var.data()).zip(n.data()) {
                    *z += (0.5 * lv).exp() * e;
                }
                z
            }
        };
        Ok(PosteriorSample { mean, log_var, z, noise: noise.cloned() })
    }

    /// Decode per-step latents (raw observation units); time-local by
    /// construction.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.hyper.z_dim {
            return Err(CoreError::Dimension(format!(
                "latent extent {} != z_dim {}",
                z.cols(),
                self.hyper.z_dim
            )));
        }
        let mut out = self.decoder.forward(z)?;
        let d = self.hyper.d_obs;
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, s) in row.iter_mut().zip(&self.hyper.x_scale) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// ε̂_i and ∂ε̂_i/∂ẑ_i for one flow component on `[rows, 1+z_dim·tau]`
    /// inputs (current coordinate first).
    pub fn flow_forward(&self, component: usize, input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        match &self.flow_kind {
            FlowKind::Identity => {
                let eps: Vec<f64> = (0..input.rows()).map(|r| input.row(r)[0]).collect();
                let ones = vec![1.0; input.rows()];
                Ok((eps, ones))
            }
            FlowKind::Scale { factor } => {
                let eps: Vec<f64> = (0..input.rows()).map(|r| factor * input.row(r)[0]).collect();
                let ds = vec![*factor; input.rows()];
                Ok((eps, ds))
            }
            FlowKind::Mlp => {
                let net = &self.flows[component];
                let out = net.forward(input)?;
                let d = mlp_input_grad(net, input, 0)?;
                Ok((out.into_data(), d))
            }
        }
    }

    /// log p(ẑ_t | ẑ_{t-1:t-τ}) per row: Σ_i [ log N(ε̂_it; 0, 1) +
    /// log |∂ε̂_it/∂ẑ_it| ]. `z_cur` is `[rows, z_dim]`, `hist` is
    /// `[rows, z_dim·tau]` (most recent lag first).
    pub fn prior_log_density(&self, z_cur: &Tensor, hist: &Tensor) -> Result<Vec<f64>> {
        let rows = z_cur.rows();
        assert_eq!(hist.rows(), rows);
        assert_eq!(hist.cols(), self.hyper.z_dim * self.hyper.tau);
        let mut out = vec![0.0; rows];
        for i in 0..self.hyper.z_dim {
            let input = flow_input(z_cur, hist, i);
            let (eps, d) = self.flow_forward(i, &input)?;
            for (o, (e, dd)) in out.iter_mut().zip(eps.iter().zip(&d)) {
                *o += -0.5 * LN_2PI - 0.5 * e * e + dd.abs().ln();
            }
        }
        Ok(out)
    }

    /// Single-sample KL estimate per row: log q(z; mean, logvar) − log
    /// p(z | hist), evaluated at z = mean + exp(logvar/2)·noise.
    pub fn kld_sampled(
        &self,
        mean: &Tensor,
        log_var: &Tensor,
        noise: &Tensor,
        hist: &Tensor,
    ) -> Result<Vec<f64>> {
        let z = {
            let mut z = mean.clone();
            for ((z, lv), e) in z.data_mut().iter_mut().zip(log_var.data()).zip(noise.data()) {
                *z += (0.5 * lv).exp() * e;
            }
            z
        };
        let log_p = self.prior_log_density(&z, hist)?;
        let n = self.hyper.z_dim;
        Ok(log_p
            .iter()
            .enumerate()
            .map(|(r, lp)| {
                let log_q: f64 = (0..n)
                    .map(|c| {
                        let lv = log_var.row(r)[c];
                        let e = noise.row(r)[c];
                        -0.5 * LN_2PI - 0.5 * lv - 0.5 * e * e
                    })
                    .sum();
                log_q - lp
            })
            .collect())
    }

    // -- taped paths -------------------------------------------------------

    /// Taped encoder: returns (mean, clamped log-variance, sample).
    pub fn encode_record(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        windows: Var,
        noise: Var,
    ) -> (Var, Var, Var) {
        let trunk = self.encoder.record(tape, &vars.encoder, windows);
        let mean = tape.linear(trunk, vars.mean_head.0, Some(vars.mean_head.1));
        let lv_raw = tape.linear(trunk, vars.logvar_head.0, Some(vars.logvar_head.1));
        let bound = self.hyper.logvar_bound;
        let log_var = tape.clamp(lv_raw, -bound, bound);
        let half_lv = tape.scale(log_var, 0.5);
        let sd = tape.exp(half_lv);
        let scaled = tape.mul(sd, noise);
        let z = tape.add(mean, scaled);
        (mean, log_var, z)
    }

    /// Full objective graph over a flattened batch.
    ///
    /// `windows`: `[B·T, (mu+1)·d]`; `x`: `[B·T, d]`; `noise`: `[B·T, z_dim]`
    /// standard-normal draws; `n_traj`/`t_len` describe the layout.
    ///
    /// recon   = Σ_t mean over batch and dims of ‖x − x̂‖²
    /// kld     = Σ_{t≥τ} mean over batch of [log q(ẑ_t|·) − log p(ẑ_t|·)]
    /// total   = recon + beta_kl·kld
    pub fn elbo_record(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        windows: &Tensor,
        x: &Tensor,
        noise: &Tensor,
        n_traj: usize,
        t_len: usize,
        beta_kl: f64,
    ) -> Result<ElboGraph> {
        let rows = n_traj * t_len;
        assert_eq!(windows.rows(), rows, "window rows");
        assert_eq!(x.rows(), rows, "observation rows");
        let tau = self.hyper.tau;
        if t_len <= tau {
            return Err(CoreError::Config(format!(
                "trajectory length {t_len} too short for transition lag {tau}"
            )));
        }

        let w = tape.constant(self.hyper.normalize_windows(windows));
        let x_const = tape.constant(self.hyper.normalize_x(x));
        let noise_leaf = tape.constant(noise.clone());
        let (_, log_var, z) = self.encode_record(tape, vars, w, noise_leaf);

        // Gaussian reconstruction likelihood with learned per-dimension
        // variance, in normalized observation units, summed over steps and
        // dims (the 2*pi constant is dropped).
        let x_hat = self.decoder.record(tape, &vars.decoder, z);
        let diff = tape.sub(x_hat, x_const);
        let sq = tape.square(diff);
        let dlv = tape.clamp(vars.dec_logvar, DEC_LOGVAR_MIN, DEC_LOGVAR_MAX);
        let neg_dlv = tape.scale(dlv, -1.0);
        let inv_var = tape.exp(neg_dlv);
        let inv_var_rows = tape.broadcast_rows(inv_var, rows);
        let weighted = tape.mul(sq, inv_var_rows);
        let weighted_sum = tape.sum_all(weighted);
        let fit_term = tape.scale(weighted_sum, 0.5 / n_traj as f64);
        let dlv_sum = tape.sum_all(dlv);
        let norm_term = tape.scale(dlv_sum, 0.5 * t_len as f64);
        let recon = tape.add(fit_term, norm_term);

        // KL rows: steps with a full transition history.
        let mut cur_idx = Vec::with_capacity(n_traj * (t_len - tau));
        let mut lag_idx: Vec<Vec<usize>> = vec![Vec::with_capacity(cur_idx.capacity()); tau];
        for b in 0..n_traj {
            for t in tau..t_len {
                cur_idx.push(b * t_len + t);
                for (l, lag) in lag_idx.iter_mut().enumerate() {
                    lag.push(b * t_len + t - (l + 1));
                }
            }
        }

        // log q(ẑ|x) at the sampled point: −½ln2π − ½logvar − ½noise².
        let lv_g = tape.gather_rows(log_var, &cur_idx);
        let noise_g = tape.gather_rows(noise_leaf, &cur_idx);
        let noise_sq = tape.square(noise_g);
        let lv_half = tape.scale(lv_g, -0.5);
        let noise_half = tape.scale(noise_sq, -0.5);
        let qsum = tape.add(lv_half, noise_half);
        let q_shift = tape.add_scalar(qsum, -0.5 * LN_2PI);
        let log_q = tape.sum_all(q_shift);

        // log p via the flow.
        let z_cur = tape.gather_rows(z, &cur_idx);
        let hist_parts: Vec<Var> = lag_idx.iter().map(|idx| tape.gather_rows(z, idx)).collect();
        let hist = tape.concat_cols(&hist_parts);
        let mut log_p: Option<Var> = None;
        let mut orient: Option<Var> = None;
        let mut degenerate = (0usize, 0usize);
        for i in 0..self.hyper.z_dim {
            let z_i = tape.slice_cols(z_cur, i, 1);
            let mut parts = vec![z_i];
            parts.push(hist);
            let input = tape.concat_cols(&parts);
            let (eps, d) = match &self.flow_kind {
                FlowKind::Identity => {
                    let ones = Tensor::new(vec![cur_idx.len(), 1], vec![1.0; cur_idx.len()]);
                    (parts[0], tape.constant(ones))
                }
                FlowKind::Scale { factor } => {
                    let scaled = tape.scale(parts[0], *factor);
                    let ds = Tensor::new(vec![cur_idx.len(), 1], vec![*factor; cur_idx.len()]);
                    (scaled, tape.constant(ds))
                }
                FlowKind::Mlp => {
                    let net = &self.flows[i];
                    let eps = net.record(tape, &vars.flows[i], input);
                    let d = net.record_jacobian_diag(tape, &vars.flows[i], input, 0)?;
                    (eps, d)
                }
            };
            for v in tape.value(d).data() {
                degenerate.1 += 1;
                if v.abs() < 1e-12 {
                    degenerate.0 += 1;
                }
            }
            let eps_sq = tape.square(eps);
            let gauss = tape.scale(eps_sq, -0.5);
            let gauss = tape.add_scalar(gauss, -0.5 * LN_2PI);
            let ld = tape.ln_abs(d);
            let term = tape.add(gauss, ld);
            let summed = tape.sum_all(term);
            log_p = Some(match log_p {
                None => summed,
                Some(acc) => tape.add(acc, summed),
            });
            if matches!(self.flow_kind, FlowKind::Mlp) {
                let neg = tape.scale(d, -ORIENTATION_SHARPNESS);
                let sp = tape.softplus(neg);
                let sp_sum = tape.sum_all(sp);
                orient = Some(match orient {
                    None => sp_sum,
                    Some(acc) => tape.add(acc, sp_sum),
                });
            }
        }
        let log_p = log_p.expect("at least one latent coordinate");

        let kld_diff = tape.sub(log_q, log_p);
        let kld = match orient {
            // The generative noise channel is strictly increasing in ẑ_it, so
            // a non-increasing flow diagonal is out of model: the |J| density
            // would double-count folded regions and turn the KL term into an
            // unbounded sink. The barrier is zero for well-oriented flows.
            Some(orient) => {
                let barrier = tape.scale(orient, ORIENTATION_WEIGHT / n_traj as f64);
                let base = tape.scale(kld_diff, 1.0 / n_traj as f64);
                tape.add(base, barrier)
            }
            None => tape.scale(kld_diff, 1.0 / n_traj as f64),
        };
        let kld_weighted = tape.scale(kld, beta_kl);
        let total = tape.add(recon, kld_weighted);

        for (name, v) in [("total", total), ("recon", recon), ("kld", kld)] {
            let val = tape.value(v).scalar_value();
            if !val.is_finite() {
                // Locate the offending step for the diagnostic.
                let mut at = String::new();
                for (probe, t) in [("latent", tape.value(z)), ("reconstruction", tape.value(x_hat))] {
                    if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
                        let row = pos / t.cols();
                        at = format!(" ({probe} at trajectory {}, step {})", row / t_len, row % t_len);
                        break;
                    }
                }
                return Err(CoreError::NonFinite(format!("objective term '{name}'{at}")));
            }
        }
        Ok(ElboGraph { total, recon, kld, degenerate })
    }

    /// Objective values without gradients.
    pub fn elbo_value(
        &self,
        windows: &Tensor,
        x: &Tensor,
        noise: &Tensor,
        n_traj: usize,
        t_len: usize,
        beta_kl: f64,
    ) -> Result<ElboValue> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let graph =
            self.elbo_record(&mut tape, &vars, windows, x, noise, n_traj, t_len, beta_kl)?;
        Ok(ElboValue {
            total: tape.value(graph.total).scalar_value(),
            recon: tape.value(graph.recon).scalar_value(),
            kld: tape.value(graph.kld).scalar_value(),
        })
    }

    /// Standard-normal draws shaped for one batch.
    pub fn draw_noise(&self, rows: usize, rng: &mut impl Rng) -> Tensor {
        let n = self.hyper.z_dim;
        Tensor::new(
            vec![rows, n],
            (0..rows * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )
    }
}

fn forward_linear(layer: &DenseLayer, input: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(vec![input.rows(), layer.out_extent()]);
    crate::tensor::matmul_nt(input, &layer.weights, &mut out);
    let cols = out.cols();
    for row in out.data_mut().chunks_exact_mut(cols) {
        for (o, b) in row.iter_mut().zip(layer.bias.data()) {
            *o = layer.activation.apply(*o + b);
        }
    }
    out
}

/// `[z_it | hist]` rows for flow component `i`.
pub fn flow_input(z_cur: &Tensor, hist: &Tensor, i: usize) -> Tensor {
    let rows = z_cur.rows();
    let cols = 1 + hist.cols();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.push(z_cur.row(r)[i]);
        data.extend_from_slice(hist.row(r));
    }
    Tensor::new(vec![rows, cols], data)
}

/// Plain-path ∂out/∂in[wrt] for a scalar-output MLP, per row.
pub fn mlp_input_grad(net: &Mlp, input: &Tensor, wrt: usize) -> Result<Vec<f64>> {
    if net.out_extent() != 1 {
        return Err(CoreError::Usage("input gradient requires scalar output".into()));
    }
    let rows = input.rows();
    let mut h = input.clone();
    let mut chain: Option<Vec<Vec<f64>>> = None; // per row, current layer width
    for layer in &net.layers {
        let mut pre = Tensor::zeros(vec![rows, layer.out_extent()]);
        crate::tensor::matmul_nt(&h, &layer.weights, &mut pre);
        let cols = pre.cols();
        for row in pre.data_mut().chunks_exact_mut(cols) {
            for (o, b) in row.iter_mut().zip(layer.bias.data()) {
                *o += b;
            }
        }
        let w = &layer.weights;
        let next_chain: Vec<Vec<f64>> = (0..rows)
            .map(|r| {
                let propagate: Vec<f64> = match &chain {
                    None => (0..w.rows()).map(|o| w.row(o)[wrt]).collect(),
                    Some(c) => (0..w.rows())
                        .map(|o| w.row(o).iter().zip(&c[r]).map(|(a, b)| a * b).sum())
                        .collect(),
                };
                propagate
                    .iter()
                    .zip(pre.row(r))
                    .map(|(v, p)| v * layer.activation.derivative(*p))
                    .collect()
            })
            .collect();
        chain = Some(next_chain);
        let cols = pre.cols();
        for row in pre.data_mut().chunks_exact_mut(cols) {
            for o in row.iter_mut() {
                *o = layer.activation.apply(*o);
            }
        }
        h = pre;
    }
    Ok(chain.expect("at least one layer").into_iter().map(|row| row[0]).collect())
}
