//! Dev-only: timing and convergence probe for one training run.
use caring_core::parallel::Exec;
use caring_core::sim::{generate, GenerativeSpec};
use caring_core::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let regime = args.get(1).map(|s| s.as_str()).unwrap_or("ng");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(770);
    let spec = match regime {
        "ng" => GenerativeSpec::ng_default(770),
        "tdmp" => GenerativeSpec::ng_tdmp_default(770),
        "pers" => GenerativeSpec::persistence_default(0.5, 770),
        _ => panic!("regime"),
    };
    let batch = generate(&spec, n, 10, Exec::Auto).unwrap();
    let beta: f64 = std::env::var("BETA").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let warmup: usize = std::env::var("WARMUP").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    let cfg = TrainConfig { epochs, seeds: vec![seed], beta_kl: beta, kl_warmup_epochs: warmup, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let rec = train(&cfg, &batch, seed, std::path::Path::new("/tmp/train_probe")).unwrap();
    println!("wall {:.1}s ({:.2}s/epoch)", t0.elapsed().as_secs_f64(),
        t0.elapsed().as_secs_f64() / rec.epochs.len().max(1) as f64);
    for m in &rec.epochs {
        println!("epoch {:>3}  recon {:>10.5}  kld {:>10.4}  val_mcc {:.4}", m.epoch, m.recon, m.kld, m.val_mcc);
    }
    diagnostics(&rec.checkpoint, &batch);
}

// Post-run diagnostics: reload the final checkpoint and inspect the flow
// diagonal, posterior spread, and a fresh-noise KLD estimate.
#[allow(dead_code)]
fn diagnostics(ckpt: &std::path::Path, batch: &caring_core::sim::TrajectoryBatch) {
    use caring_core::model::{flow_input, load_checkpoint};
    use caring_core::tensor::Tensor;
    let (model, _, _) = load_checkpoint(ckpt).unwrap();
    let (_, val) = batch.split_train_val(0.9);
    let windows = val.windows(model.hyper.mu);
    let post = model.encode(&windows, None).unwrap();
    let n = model.hyper.z_dim;
    let rows = post.mean.rows();
    for c in 0..n {
        let lv: Vec<f64> = (0..rows).map(|r| post.log_var.row(r)[c]).collect();
        let mean_c: Vec<f64> = (0..rows).map(|r| post.mean.row(r)[c]).collect();
        let (lv_m, lv_sd) = caring_core::stats::mean_std(&lv);
        let (_, m_sd) = caring_core::stats::mean_std(&mean_c);
        println!("coord {c}: logvar {lv_m:.2}±{lv_sd:.2}  mean-spread {m_sd:.3}");
    }
    println!("dec_logvar: {:?}", model.dec_logvar.data());
    // Flow diagonal at encoded samples (t >= tau).
    let t_len = val.t_len;
    let tau = model.hyper.tau;
    let mut cur = Vec::new();
    let mut hist = Vec::new();
    for b in 0..val.n_traj.min(200) {
        for t in tau..t_len {
            cur.extend_from_slice(post.mean.row(b * t_len + t));
            hist.extend_from_slice(post.mean.row(b * t_len + t - 1));
        }
    }
    let r = cur.len() / n;
    let curt = Tensor::new(vec![r, n], cur);
    let histt = Tensor::new(vec![r, n], hist);
    for i in 0..n {
        let inp = flow_input(&curt, &histt, i);
        let (eps, d) = model.flow_forward(i, &inp).unwrap();
        let (dm, dsd) = caring_core::stats::mean_std(&d);
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let (em, esd) = caring_core::stats::mean_std(&eps);
        println!("flow {i}: d {dm:.3}±{dsd:.3} min {dmin:.3}   eps {em:.3}±{esd:.3}");
    }
    // Fresh-noise kld estimates.
    let x = Tensor::new(vec![val.n_traj * t_len, val.d_obs()], val.x.clone());
    for k in 0..4 {
        let noise = model.draw_noise(val.n_traj * t_len, &mut caring_core::rng::stream_rng(7777 + k, 0));
        let v = model.elbo_value(&windows, &x, &noise, val.n_traj, t_len, 1.0).unwrap();
        println!("fresh kld estimate {k}: {:.4} (recon {:.5})", v.kld, v.recon);
    }
}
