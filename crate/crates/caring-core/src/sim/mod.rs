//! Synthetic dynamical systems with non-invertible observation processes.
//!
//! A [`GenerativeSpec`] fully describes one process: latent dimension,
//! observation dimension, transition and mixing parameterizations, lags, and
//! the master seed. Identical specs produce bit-identical data, trajectory
//! by trajectory, regardless of how generation is scheduled.

mod format;
mod generate;
mod mu_filter;

pub use format::{deserialize_batch, serialize_batch, SIDECAR_SUFFIX};
pub use generate::{generate, generate_ng, generate_ng_tdmp, generate_persistence};
pub use mu_filter::{
    mu_filter, ols_window_fit, MuFilterReport, MuFit, DEFAULT_MU_CANDIDATES, DEFAULT_R2_THRESHOLD,
};

use crate::error::{CoreError, Result};
use crate::nn::{Activation, Mlp};
use crate::rng::stream_rng;
use crate::stats::{normal_log_pdf, softplus};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Default observation noise scale.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

/// Hidden width of the fixed random networks used by the generators.
const SIM_NET_WIDTH: usize = 16;

// ---------------------------------------------------------------------------
// Spec types
// ---------------------------------------------------------------------------

/// Latent transition parameterization.
///
/// `PostNonlinearAdditive` and `LinearGaussian` admit a closed-form
/// conditional density p(z_kt | z_{t-1}), which the theory checks require.
/// Every kind is invertible in its noise argument given the past.
///
/// The nonlinear kinds share one structure: a linear backbone
/// `rho ⊙ z_{t-1} + mean_bias` that keeps the process at a sustained
/// variance over short horizons, plus a seeded random MLP (2 hidden layers
/// of 16, leaky_relu) reading the first `mean_inputs` coordinates of the
/// previous state. A second MLP modulates the noise scale per coordinate,
/// making the conditional variance state-dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionSpec {
    /// z_t = rho ⊙ z' + bias + gain ⊙ f1(z'[..m]) + noise_gain ⊙ (floor +
    /// span·softplus(f2(z'))) ⊙ ε_t, with z' = z_{t-1} and ε_t ~ N(0, σ²).
    PostNonlinearAdditive {
        weight_seed: u64,
        slope: f64,
        rho: Vec<f64>,
        mean_gain: Vec<f64>,
        mean_bias: Vec<f64>,
        /// The mean MLP reads only the first `mean_inputs` coordinates.
        mean_inputs: usize,
        noise_gain: Vec<f64>,
        scale_floor: f64,
        scale_span: f64,
    },
    /// Same mean structure, but the noise enters through a monotone cubic:
    /// z_k = mean_k + s_k·ε_k + c_k·ε_k³/3 (no closed-form density).
    NonadditiveMlp {
        weight_seed: u64,
        slope: f64,
        rho: Vec<f64>,
        mean_gain: Vec<f64>,
        mean_bias: Vec<f64>,
        mean_inputs: usize,
        noise_gain: Vec<f64>,
        cubic_gain: f64,
    },
    /// z_t = W·z_{t-1} + ε_t
    LinearGaussian { matrix: Vec<Vec<f64>> },
    /// Smooth dynamics behind the overlaid-observation system; the
    /// `PostNonlinearAdditive` machinery with the mean MLP reading the
    /// full state.
    VisualPersistence {
        weight_seed: u64,
        slope: f64,
        rho: Vec<f64>,
        mean_gain: Vec<f64>,
        mean_bias: Vec<f64>,
        noise_gain: Vec<f64>,
        scale_floor: f64,
        scale_span: f64,
    },
}

/// Observation (mixing) parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingSpec {
    /// x_t = g(z_{1..d_obs,t}): a fixed random map of only the first
    /// `d_obs` latent coordinates.
    NgDropdim { weight_seed: u64, slope: f64 },
    /// x_t = A·relu(B·relu(C·z_t)) + [0, 0, D·z_{t-1} + E·z_{t-2}]ᵀ
    NgTdmp {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        d: Vec<f64>,
        e: Vec<f64>,
    },
    /// x_t = z_t + decay·x_{t-1}
    PersistenceLinear { decay: f64 },
}

/// Full description of a synthetic process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub n_latent: usize,
    pub d_obs: usize,
    /// Transition lag.
    pub tau: usize,
    /// Mixing lag.
    pub r: usize,
    /// Context length needed to recover z_t from x_{t:t-mu}.
    pub mu: usize,
    pub noise_sigma: f64,
    pub transition: TransitionSpec,
    pub mixing: MixingSpec,
    pub seed: u64,
}

/// Where a batch came from relative to a train/validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Val,
}

/// Paired latent and observed sequences, row-major `[N][T][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub n_traj: usize,
    pub t_len: usize,
    pub spec: GenerativeSpec,
    pub split: SplitTag,
}

impl TrajectoryBatch {
    pub fn n_latent(&self) -> usize {
        self.spec.n_latent
    }

    pub fn d_obs(&self) -> usize {
        self.spec.d_obs
    }

    pub fn z_at(&self, traj: usize, t: usize) -> &[f64] {
        let n = self.spec.n_latent;
        let base = (traj * self.t_len + t) * n;
        &self.z[base..base + n]
    }

    pub fn x_at(&self, traj: usize, t: usize) -> &[f64] {
        let d = self.spec.d_obs;
        let base = (traj * self.t_len + t) * d;
        &self.x[base..base + d]
    }

    /// Split by trajectory; the leading fraction becomes the train split.
    pub fn split_train_val(&self, train_frac: f64) -> (TrajectoryBatch, TrajectoryBatch) {
        assert!((0.0..=1.0).contains(&train_frac));
        let n_train = ((self.n_traj as f64) * train_frac).round() as usize;
        let cut_z = n_train * self.t_len * self.spec.n_latent;
        let cut_x = n_train * self.t_len * self.spec.d_obs;
        let train = TrajectoryBatch {
            z: self.z[..cut_z].to_vec(),
            x: self.x[..cut_x].to_vec(),
            n_traj: n_train,
            t_len: self.t_len,
            spec: self.spec.clone(),
            split: SplitTag::Train,
        };
        let val = TrajectoryBatch {
            z: self.z[cut_z..].to_vec(),
            x: self.x[cut_x..].to_vec(),
            n_traj: self.n_traj - n_train,
            t_len: self.t_len,
            spec: self.spec.clone(),
            split: SplitTag::Val,
        };
        (train, val)
    }

    /// Observation windows `[x_t, …, x_{t-mu}]` flattened to
    /// `[N·T, (mu+1)·d]`, zero-padded before t = mu.
    pub fn windows(&self, mu: usize) -> Tensor {
        let d = self.spec.d_obs;
        let w = (mu + 1) * d;
        let mut data = vec![0.0; self.n_traj * self.t_len * w];
        for traj in 0..self.n_traj {
            for t in 0..self.t_len {
                let row = (traj * self.t_len + t) * w;
                for k in 0..=mu {
                    if t >= k {
                        let src = self.x_at(traj, t - k);
                        data[row + k * d..row + (k + 1) * d].copy_from_slice(src);
                    }
                }
            }
        }
        Tensor::new(vec![self.n_traj * self.t_len, w], data)
    }
}

impl GenerativeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_latent == 0 || self.d_obs == 0 {
            return Err(CoreError::Config("n_latent and d_obs must be positive".into()));
        }
        if self.tau < 1 {
            return Err(CoreError::Config("tau must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CoreError::Config("noise_sigma must be non-negative".into()));
        }
        match &self.mixing {
            MixingSpec::NgDropdim { .. } => {
                if self.d_obs >= self.n_latent {
                    return Err(CoreError::Config(format!(
                        "dimension-dropping mixing requires d_obs < n_latent, got {} >= {}",
                        self.d_obs, self.n_latent
                    )));
                }
            }
            MixingSpec::NgTdmp { a, b, c, d, e } => {
                if self.r < 1 {
                    return Err(CoreError::Config("time-delayed mixing requires r >= 1".into()));
                }
                if self.n_latent != 3 || self.d_obs != 3 {
                    return Err(CoreError::Config(
                        "time-delayed mixing is defined for n_latent = d_obs = 3".into(),
                    ));
                }
                for (name, m) in [("A", a), ("B", b), ("C", c)] {
                    if m.len() != 3 || m.iter().any(|row| row.len() != 3) {
                        return Err(CoreError::Config(format!("matrix {name} must be 3x3")));
                    }
                }
                if d.len() != 3 || e.len() != 3 {
                    return Err(CoreError::Config("lag vectors D and E must have 3 entries".into()));
                }
            }
            MixingSpec::PersistenceLinear { decay } => {
                if !(*decay > 0.0 && *decay < 1.0) {
                    return Err(CoreError::Usage(format!(
                        "persistence decay must lie in (0,1), got {decay}"
                    )));
                }
                if self.d_obs != self.n_latent {
                    return Err(CoreError::Config(
                        "persistence mixing requires d_obs = n_latent".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether the transition admits a closed-form conditional density.
    pub fn density_tractable(&self) -> bool {
        matches!(
            self.transition,
            TransitionSpec::PostNonlinearAdditive { .. }
                | TransitionSpec::LinearGaussian { .. }
                | TransitionSpec::VisualPersistence { .. }
        )
    }
}

// ---------------------------------------------------------------------------
// Built (runtime) forms of the spec parameterizations
// ---------------------------------------------------------------------------

pub(crate) struct PnlParts {
    mean_net: Mlp,
    scale_net: Mlp,
    rho: Vec<f64>,
    mean_gain: Vec<f64>,
    mean_bias: Vec<f64>,
    mean_inputs: usize,
    noise_gain: Vec<f64>,
    floor: f64,
    span: f64,
}

pub(crate) enum TransitionNets {
    Pnl(PnlParts),
    NonAdd { parts: PnlParts, cubic: Mlp, cubic_gain: f64 },
    Linear { w: Vec<f64>, n: usize },
}

#[allow(clippy::too_many_arguments)]
fn build_pnl(
    n: usize,
    weight_seed: u64,
    slope: f64,
    rho: &[f64],
    mean_gain: &[f64],
    mean_bias: &[f64],
    mean_inputs: usize,
    noise_gain: &[f64],
    floor: f64,
    span: f64,
) -> PnlParts {
    assert!(mean_inputs >= 1 && mean_inputs <= n);
    for (name, v) in [("rho", rho), ("mean_gain", mean_gain), ("mean_bias", mean_bias), ("noise_gain", noise_gain)] {
        assert_eq!(v.len(), n, "{name} must have n_latent entries");
    }
    let act = Activation::LeakyRelu { slope };
    let mean_net =
        Mlp::init(&mut stream_rng(weight_seed, 1), &[mean_inputs, SIM_NET_WIDTH, SIM_NET_WIDTH, n], act);
    let scale_net =
        Mlp::init(&mut stream_rng(weight_seed, 2), &[n, SIM_NET_WIDTH, SIM_NET_WIDTH, n], act);
    PnlParts {
        mean_net,
        scale_net,
        rho: rho.to_vec(),
        mean_gain: mean_gain.to_vec(),
        mean_bias: mean_bias.to_vec(),
        mean_inputs,
        noise_gain: noise_gain.to_vec(),
        floor,
        span,
    }
}

impl PnlParts {
    fn mean_of(&self, h: &[f64]) -> Vec<f64> {
        let t = Tensor::new(vec![1, self.mean_inputs], h[..self.mean_inputs].to_vec());
        let raw = self.mean_net.forward(&t).expect("transition mean").into_data();
        (0..h.len())
            .map(|k| self.rho[k] * h[k] + self.mean_bias[k] + self.mean_gain[k] * raw[k])
            .collect()
    }

    fn noise_mult(&self, h: &[f64]) -> Vec<f64> {
        let t = Tensor::new(vec![1, h.len()], h.to_vec());
        let raw = self.scale_net.forward(&t).expect("transition scale").into_data();
        raw.into_iter()
            .zip(&self.noise_gain)
            .map(|(v, g)| g * (self.floor + self.span * softplus(v)))
            .collect()
    }
}

impl TransitionSpec {
    pub(crate) fn build(&self, n: usize) -> TransitionNets {
        match self {
            TransitionSpec::PostNonlinearAdditive {
                weight_seed,
                slope,
                rho,
                mean_gain,
                mean_bias,
                mean_inputs,
                noise_gain,
                scale_floor,
                scale_span,
            } => TransitionNets::Pnl(build_pnl(
                n,
                *weight_seed,
                *slope,
                rho,
                mean_gain,
                mean_bias,
                *mean_inputs,
                noise_gain,
                *scale_floor,
                *scale_span,
            )),
            TransitionSpec::NonadditiveMlp {
                weight_seed,
                slope,
                rho,
                mean_gain,
                mean_bias,
                mean_inputs,
                noise_gain,
                cubic_gain,
            } => {
                let parts = build_pnl(
                    n,
                    *weight_seed,
                    *slope,
                    rho,
                    mean_gain,
                    mean_bias,
                    *mean_inputs,
                    noise_gain,
                    0.5,
                    1.0,
                );
                let act = Activation::LeakyRelu { slope: *slope };
                let cubic = Mlp::init(
                    &mut stream_rng(*weight_seed, 3),
                    &[n, SIM_NET_WIDTH, SIM_NET_WIDTH, n],
                    act,
                );
                TransitionNets::NonAdd { parts, cubic, cubic_gain: *cubic_gain }
            }
            TransitionSpec::LinearGaussian { matrix } => {
                assert_eq!(matrix.len(), n, "transition matrix must be n x n");
                let mut w = Vec::with_capacity(n * n);
                for row in matrix {
                    assert_eq!(row.len(), n);
                    w.extend_from_slice(row);
                }
                TransitionNets::Linear { w, n }
            }
            TransitionSpec::VisualPersistence {
                weight_seed,
                slope,
                rho,
                mean_gain,
                mean_bias,
                noise_gain,
                scale_floor,
                scale_span,
            } => TransitionNets::Pnl(build_pnl(
                n,
                *weight_seed,
                *slope,
                rho,
                mean_gain,
                mean_bias,
                n,
                noise_gain,
                *scale_floor,
                *scale_span,
            )),
        }
    }
}

impl TransitionNets {
    fn mean_of(&self, h: &[f64]) -> Vec<f64> {
        match self {
            TransitionNets::Pnl(p) | TransitionNets::NonAdd { parts: p, .. } => p.mean_of(h),
            TransitionNets::Linear { w, n } => {
                (0..*n).map(|k| (0..*n).map(|l| w[k * n + l] * h[l]).sum()).collect()
            }
        }
    }

    /// Per-coordinate multiplier applied to the raw noise.
    fn noise_mult(&self, h: &[f64]) -> Vec<f64> {
        match self {
            TransitionNets::Pnl(p) | TransitionNets::NonAdd { parts: p, .. } => p.noise_mult(h),
            TransitionNets::Linear { n, .. } => vec![1.0; *n],
        }
    }

    /// One transition step: z' = step(h, ε) with ε ~ N(0, σ²) per coordinate.
    pub(crate) fn step(&self, h: &[f64], eps: &[f64], out: &mut [f64]) {
        let mean = self.mean_of(h);
        let mult = self.noise_mult(h);
        match self {
            TransitionNets::Pnl { .. } | TransitionNets::Linear { .. } => {
                for k in 0..out.len() {
                    out[k] = mean[k] + mult[k] * eps[k];
                }
            }
            TransitionNets::NonAdd { cubic, cubic_gain, .. } => {
                let t = Tensor::new(vec![1, h.len()], h.to_vec());
                let c = cubic.forward(&t).expect("transition cubic").into_data();
                for k in 0..out.len() {
                    let c_k = cubic_gain * softplus(c[k]);
                    out[k] = mean[k] + mult[k] * eps[k] + c_k * eps[k].powi(3) / 3.0;
                }
            }
        }
    }

    /// Recover the noise realization from (h, z'); inverse of [`Self::step`].
    pub(crate) fn invert_noise(&self, h: &[f64], z_next: &[f64]) -> Vec<f64> {
        let mean = self.mean_of(h);
        let mult = self.noise_mult(h);
        match self {
            TransitionNets::Pnl { .. } | TransitionNets::Linear { .. } => {
                (0..z_next.len()).map(|k| (z_next[k] - mean[k]) / mult[k]).collect()
            }
            TransitionNets::NonAdd { cubic, cubic_gain, .. } => {
                let t = Tensor::new(vec![1, h.len()], h.to_vec());
                let c = cubic.forward(&t).expect("transition cubic").into_data();
                (0..z_next.len())
                    .map(|k| {
                        // Monotone cubic in ε: solve by Newton with bisection fallback.
                        let c_k = cubic_gain * softplus(c[k]);
                        let target = z_next[k] - mean[k];
                        let f = |e: f64| mult[k] * e + c_k * e * e * e / 3.0 - target;
                        let mut lo = -50.0;
                        let mut hi = 50.0;
                        let mut e = target / mult[k];
                        for _ in 0..100 {
                            let fe = f(e);
                            if fe.abs() < 1e-14 {
                                break;
                            }
                            if fe > 0.0 {
                                hi = e;
                            } else {
                                lo = e;
                            }
                            let df = mult[k] + c_k * e * e;
                            let newton = e - fe / df;
                            e = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
                        }
                        e
                    })
                    .collect()
            }
        }
    }

    /// Closed-form log p(z_k' | h) scaled for noise std `sigma`, for the
    /// density-tractable kinds.
    pub(crate) fn log_conditional(&self, k: usize, z_k: f64, h: &[f64], sigma: f64) -> Option<f64> {
        match self {
            TransitionNets::Pnl { .. } | TransitionNets::Linear { .. } => {
                let mean = self.mean_of(h);
                let mult = self.noise_mult(h);
                Some(normal_log_pdf(z_k, mean[k], sigma * mult[k]))
            }
            TransitionNets::NonAdd { .. } => None,
        }
    }
}

pub(crate) enum MixingNets {
    Dropdim { g: Mlp, d_obs: usize },
    Tdmp { a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, d: Vec<f64>, e: Vec<f64> },
    Persistence { decay: f64 },
}

impl MixingSpec {
    pub(crate) fn build(&self, d_obs: usize) -> MixingNets {
        match self {
            MixingSpec::NgDropdim { weight_seed, slope } => {
                let act = Activation::LeakyRelu { slope: *slope };
                let g = Mlp::init(
                    &mut stream_rng(*weight_seed, 4),
                    &[d_obs, SIM_NET_WIDTH, SIM_NET_WIDTH, d_obs],
                    act,
                );
                MixingNets::Dropdim { g, d_obs }
            }
            MixingSpec::NgTdmp { a, b, c, d, e } => {
                let flat = |m: &Vec<Vec<f64>>| m.iter().flatten().copied().collect::<Vec<f64>>();
                MixingNets::Tdmp { a: flat(a), b: flat(b), c: flat(c), d: d.clone(), e: e.clone() }
            }
            MixingSpec::PersistenceLinear { decay } => MixingNets::Persistence { decay: *decay },
        }
    }
}

fn mat3_vec(m: &[f64], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

fn relu3(v: [f64; 3]) -> [f64; 3] {
    [v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)]
}

impl MixingNets {
    /// Pure (lag-free) part of the observation map.
    pub(crate) fn observe_current(&self, z_t: &[f64]) -> Vec<f64> {
        match self {
            MixingNets::Dropdim { g, d_obs } => {
                let input = Tensor::new(vec![1, *d_obs], z_t[..*d_obs].to_vec());
                g.forward(&input).expect("mixing map").into_data()
            }
            MixingNets::Tdmp { a, b, c, .. } => {
                let z = [z_t[0], z_t[1], z_t[2]];
                let h1 = relu3(mat3_vec(c, &z));
                let h2 = relu3(mat3_vec(b, &h1));
                mat3_vec(a, &h2).to_vec()
            }
            MixingNets::Persistence { .. } => z_t.to_vec(),
        }
    }

    /// Lag contribution added to the third observation coordinate.
    /// Missing history (t < r) enters as exact zeros.
    pub(crate) fn tdmp_lag_term(&self, z_m1: Option<&[f64]>, z_m2: Option<&[f64]>) -> f64 {
        match self {
            MixingNets::Tdmp { d, e, .. } => {
                let dot = |w: &[f64], z: Option<&[f64]>| {
                    z.map_or(0.0, |z| w.iter().zip(z).map(|(a, b)| a * b).sum())
                };
                dot(d, z_m1) + dot(e, z_m2)
            }
            _ => 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Default spec constructors (frozen by the recoverability scans)
// ---------------------------------------------------------------------------

/// Fixed seeds of the default random maps. The maps are part of the regime
/// definition; the spec-level `seed` only drives initial states and noise.
pub const NG_TRANSITION_SEED: u64 = 9101;
pub const NG_MIXING_SEED: u64 = 9002;
pub const TDMP_TRANSITION_SEED: u64 = 9003;
pub const TDMP_MIXING_SEED: u64 = 9504;
pub const PERSISTENCE_TRANSITION_SEED: u64 = 9005;

/// Lag-term gain of the default time-delayed mixing.
pub const TDMP_LAG_GAIN: f64 = 1.4;

impl GenerativeSpec {
    /// Dimension-dropping regime: 3 latents observed through a 2-D map.
    ///
    /// The two observed coordinates carry large innovations (so the hidden
    /// coordinate cannot be read off a single observation), while the third
    /// is driven by them with a weak self-memory: two observation lags
    /// recover it, one does not.
    pub fn ng_default(seed: u64) -> GenerativeSpec {
        GenerativeSpec {
            n_latent: 3,
            d_obs: 2,
            tau: 1,
            r: 0,
            mu: 2,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            transition: TransitionSpec::PostNonlinearAdditive {
                weight_seed: NG_TRANSITION_SEED,
                slope: 0.4,
                rho: vec![0.6, 0.6, 0.30],
                mean_gain: vec![0.6, 0.6, 3.0],
                mean_bias: vec![0.15, 0.15, 0.1],
                mean_inputs: 2,
                noise_gain: vec![4.4, 4.4, 0.3],
                scale_floor: 0.15,
                scale_span: 0.4,
            },
            mixing: MixingSpec::NgDropdim { weight_seed: NG_MIXING_SEED, slope: 0.4 },
            seed,
        }
    }

    /// Time-delayed mixing regime: 3 latents, 3-D observations with lagged
    /// contamination of the third coordinate.
    pub fn ng_tdmp_default(seed: u64) -> GenerativeSpec {
        let transition = TransitionSpec::PostNonlinearAdditive {
            weight_seed: TDMP_TRANSITION_SEED,
            slope: 0.4,
            rho: vec![0.65, 0.65, 0.65],
            mean_gain: vec![0.8, 0.8, 0.8],
            mean_bias: vec![0.3, 0.3, 0.3],
            mean_inputs: 3,
            noise_gain: vec![1.5, 1.5, 1.5],
            scale_floor: 0.15,
            scale_span: 0.4,
        };
        let mixing =
            sample_tdmp_mixing(TDMP_MIXING_SEED, &transition, DEFAULT_NOISE_SIGMA, TDMP_LAG_GAIN);
        GenerativeSpec {
            n_latent: 3,
            d_obs: 3,
            tau: 1,
            r: 2,
            mu: 4,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            transition,
            mixing,
            seed,
        }
    }

    /// Overlaid-observation regime: x_t = z_t + decay·x_{t-1}.
    pub fn persistence_default(decay: f64, seed: u64) -> GenerativeSpec {
        GenerativeSpec {
            n_latent: 2,
            d_obs: 2,
            tau: 1,
            r: 1,
            mu: 1,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            transition: TransitionSpec::VisualPersistence {
                weight_seed: PERSISTENCE_TRANSITION_SEED,
                slope: 0.4,
                rho: vec![0.7, 0.7],
                mean_gain: vec![1.2, 1.2],
                mean_bias: vec![0.15, 0.15],
                noise_gain: vec![1.5, 1.5],
                scale_floor: 0.15,
                scale_span: 0.4,
            },
            mixing: MixingSpec::PersistenceLinear { decay },
            seed,
        }
    }
}

/// Draw 3x3 matrices from U(−1,1), rejecting badly conditioned draws so the
/// lag-free part of the mixing stays invertible.
pub fn sample_conditioned_matrices(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    use rand::Rng;
    let mut out = Vec::new();
    for idx in 0..3u64 {
        let mut rng = stream_rng(seed, idx);
        loop {
            let m: Vec<Vec<f64>> =
                (0..3).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            if well_conditioned(&m) {
                out.push(m);
                break;
            }
        }
    }
    let c = out.pop().unwrap();
    let b = out.pop().unwrap();
    let a = out.pop().unwrap();
    (a, b, c)
}

fn well_conditioned(m: &[Vec<f64>]) -> bool {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    let na = nalgebra::Matrix3::from_row_slice(&flat);
    let svd = na.svd(false, false);
    let (max, min) = (svd.singular_values.max(), svd.singular_values.min());
    min > 0.0 && max / min < 20.0
}

/// Fraction of positive entries per output row over `inputs` mapped through
/// `m` (row-major 3x3).
fn relu_active_fraction(m: &[Vec<f64>], inputs: &[[f64; 3]]) -> [f64; 3] {
    let mut active = [0usize; 3];
    for z in inputs {
        for (r, row) in m.iter().enumerate() {
            let v = row[0] * z[0] + row[1] * z[1] + row[2] * z[2];
            if v > 0.0 {
                active[r] += 1;
            }
        }
    }
    let n = inputs.len() as f64;
    [active[0] as f64 / n, active[1] as f64 / n, active[2] as f64 / n]
}

/// Sample the time-delayed mixing's matrices: A, B, C from U(−1,1) with a
/// condition-number bound, and C, B additionally required to keep their
/// relu units active on almost all states the transition actually visits
/// (otherwise the lag-free mixing is not invertible in practice). D and E
/// are U(−1,1) rows scaled by `lag_gain`.
pub fn sample_tdmp_mixing(
    seed: u64,
    transition: &TransitionSpec,
    sigma: f64,
    lag_gain: f64,
) -> MixingSpec {
    use rand::Rng;
    // States visited by the transition, from a fixed calibration stream.
    let nets = transition.build(3);
    let mut states: Vec<[f64; 3]> = Vec::with_capacity(2000);
    for traj in 0..200u64 {
        let mut rng = stream_rng(seed ^ 0x7D_CAFE, traj);
        let mut z = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        states.push(z);
        let mut eps = [0.0; 3];
        for _ in 1..10 {
            for e in eps.iter_mut() {
                let raw: f64 = rng.sample(rand_distr::StandardNormal);
                *e = sigma * raw;
            }
            let mut next = [0.0; 3];
            nets.step(&z, &eps, &mut next);
            z = next;
            states.push(z);
        }
    }
    const MIN_ACTIVE: f64 = 0.995;
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..3).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let mut rng = stream_rng(seed, 0);
    let c = loop {
        let m = draw(&mut rng);
        if well_conditioned(&m)
            && relu_active_fraction(&m, &states).iter().all(|&f| f >= MIN_ACTIVE)
        {
            break m;
        }
    };
    let h1: Vec<[f64; 3]> = states
        .iter()
        .map(|z| {
            let v = mat3_vec(&c.iter().flatten().copied().collect::<Vec<_>>(), z);
            [v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)]
        })
        .collect();
    let mut rng = stream_rng(seed, 1);
    let b = loop {
        let m = draw(&mut rng);
        if well_conditioned(&m) && relu_active_fraction(&m, &h1).iter().all(|&f| f >= MIN_ACTIVE) {
            break m;
        }
    };
    let mut rng = stream_rng(seed, 2);
    let a = loop {
        let m = draw(&mut rng);
        if !well_conditioned(&m) {
            continue;
        }
        // The lag term contaminates every recovered coordinate through the
        // inverse of the composite map; keep the product well conditioned so
        // that contamination stays bounded.
        let prod = nalgebra::Matrix3::from_row_slice(&m.iter().flatten().copied().collect::<Vec<_>>())
            * nalgebra::Matrix3::from_row_slice(&b.iter().flatten().copied().collect::<Vec<_>>())
            * nalgebra::Matrix3::from_row_slice(&c.iter().flatten().copied().collect::<Vec<_>>());
        let svd = prod.svd(false, false);
        if svd.singular_values.max() / svd.singular_values.min() < 5.0 {
            break m;
        }
    };
    let mut rng = stream_rng(seed, 7);
    let d: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0) * lag_gain).collect();
    let e: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0) * lag_gain).collect();
    MixingSpec::NgTdmp { a, b, c, d, e }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ng_spec_validates() {
        GenerativeSpec::ng_default(770).validate().unwrap();
        GenerativeSpec::ng_tdmp_default(770).validate().unwrap();
        GenerativeSpec::persistence_default(0.5, 770).validate().unwrap();
    }

    #[test]
    fn ng_requires_fewer_observations_than_latents() {
        let mut spec = GenerativeSpec::ng_default(770);
        spec.d_obs = 3;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn persistence_decay_bounds_are_enforced() {
        let mut spec = GenerativeSpec::persistence_default(0.5, 770);
        if let MixingSpec::PersistenceLinear { decay } = &mut spec.mixing {
            *decay = 1.0;
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn conditioned_matrices_have_bounded_condition_number() {
        let (a, b, c) = sample_conditioned_matrices(5);
        for m in [a, b, c] {
            let flat: Vec<f64> = m.iter().flatten().copied().collect();
            let na = nalgebra::Matrix3::from_row_slice(&flat);
            let svd = na.svd(false, false);
            assert!(svd.singular_values.max() / svd.singular_values.min() < 20.0);
            assert!(flat.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn noise_inversion_is_exact_for_post_nonlinear() {
        let spec = GenerativeSpec::ng_default(1);
        let nets = spec.transition.build(3);
        let h = [0.3, -0.2, 0.5];
        let eps = [0.05, -0.12, 0.2];
        let mut z = [0.0; 3];
        nets.step(&h, &eps, &mut z);
        let back = nets.invert_noise(&h, &z);
        for (a, b) in eps.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_inversion_converges_for_nonadditive() {
        let spec = TransitionSpec::NonadditiveMlp {
            weight_seed: 11,
            slope: 0.3,
            rho: vec![0.7; 3],
            mean_gain: vec![1.0; 3],
            mean_bias: vec![0.1; 3],
            mean_inputs: 3,
            noise_gain: vec![1.0; 3],
            cubic_gain: 0.5,
        };
        let nets = spec.build(3);
        let h = [0.1, 0.9, -0.4];
        let eps = [1.3, -2.0, 0.01];
        let mut z = [0.0; 3];
        nets.step(&h, &eps, &mut z);
        let back = nets.invert_noise(&h, &z);
        for (a, b) in eps.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn windows_are_zero_padded_before_mu() {
        let spec = GenerativeSpec::persistence_default(0.5, 3);
        let batch = TrajectoryBatch {
            z: vec![0.0; 2 * 3 * 2],
            x: (0..12).map(|v| v as f64).collect(),
            n_traj: 2,
            t_len: 3,
            spec,
            split: SplitTag::Full,
        };
        let w = batch.windows(1);
        assert_eq!(w.shape(), &[6, 4]);
        // First step of each trajectory: [x_0, 0, 0].
        assert_eq!(w.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(w.row(1), &[2.0, 3.0, 0.0, 1.0]);
        assert_eq!(w.row(3), &[6.0, 7.0, 0.0, 0.0]);
    }
}
