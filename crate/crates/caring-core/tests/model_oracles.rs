//! Independent oracles for the model's probabilistic machinery:
//! finite-difference gradients for the full objective, numerical quadrature
//! for the flow prior's normalization, and closed-form Gaussian KL for the
//! sampled estimator.

use caring_core::model::{flow_input, CaringModel, FlowKind, ModelHyper};
use caring_core::nn::Activation;
use caring_core::parallel::Exec;
use caring_core::rng::stream_rng;
use caring_core::sim::{generate, GenerativeSpec};
use caring_core::stats::mean_std;
use caring_core::tape::Tape;
use caring_core::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    // Small model: n=2, T=4. Every parameter gradient of the total
    // objective must match central differences to rel err < 1e-4.
    let mut hyper = ModelHyper::new(2, 2, 1, 1);
    hyper.encoder_hidden = vec![8, 8];
    hyper.decoder_hidden = vec![8];
    hyper.flow_hidden = vec![6, 6];
    let mut model = CaringModel::init(hyper, 21);

    let spec = GenerativeSpec::persistence_default(0.5, 4);
    let batch = generate(&spec, 3, 4, Exec::Sequential).unwrap();
    let windows = batch.windows(1);
    let x = Tensor::new(vec![12, 2], batch.x.clone());
    let noise = model.draw_noise(12, &mut stream_rng(5, 0));

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let graph = model
        .elbo_record(&mut tape, &vars, &windows, &x, &noise, 3, 4, 1.0)
        .unwrap();
    let mut grads = tape.backward(graph.total).unwrap();
    let analytic = model.collect_grads(&mut grads, &vars);

    let names = model.param_names();
    let h = 1e-5;
    let mut checked = 0usize;
    for pi in 0..analytic.len() {
        let len = analytic[pi].len();
        for j in 0..len {
            let orig = model.params()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = orig + h;
            let hi = model.elbo_value(&windows, &x, &noise, 3, 4, 1.0).unwrap().total;
            model.params_mut()[pi].data_mut()[j] = orig - h;
            let lo = model.elbo_value(&windows, &x, &noise, 3, 4, 1.0).unwrap().total;
            model.params_mut()[pi].data_mut()[j] = orig;
            let fd = (hi - lo) / (2.0 * h);
            let an = analytic[pi].data()[j];
            assert!(
                rel_err(fd, an) < 1e-4,
                "{}[{}]: fd={fd:.9} analytic={an:.9}",
                names[pi],
                j
            );
            checked += 1;
        }
    }
    assert!(checked > 300, "expected a few hundred parameters, got {checked}");
}

#[test]
fn mlp_jacobian_diag_matches_finite_differences() {
    // Random 2-hidden-layer network, inputs kept away from activation kinks.
    let mut rng = stream_rng(31, 0);
    let net = caring_core::nn::Mlp::init(&mut rng, &[4, 12, 12, 1], Activation::leaky_default());
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < 24 && attempts < 4000 {
        attempts += 1;
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        // Resample if any pre-activation sits near a kink.
        let mut h = x.clone();
        let mut near_kink = false;
        for layer in &net.layers {
            let mut pre = vec![0.0; layer.out_extent()];
            for (o, p) in pre.iter_mut().enumerate() {
                *p = layer.bias.data()[o]
                    + layer.weights.row(o).iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
            }
            if pre.iter().any(|p| p.abs() < 1e-3) {
                near_kink = true;
                break;
            }
            h = pre.iter().map(|&p| layer.activation.apply(p)).collect();
        }
        if near_kink {
            continue;
        }
        for wrt in 0..4 {
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let input = tape.leaf(Tensor::new(vec![1, 4], x.clone()));
            let d = net.record_jacobian_diag(&mut tape, &vars, input, wrt).unwrap();
            let analytic = tape.value(d).scalar_value();
            let fd = caring_core::numdiff::central_diff(
                |v| {
                    let mut probe = x.clone();
                    probe[wrt] = v;
                    net.forward(&Tensor::new(vec![1, 4], probe)).unwrap().scalar_value()
                },
                x[wrt],
                1e-6,
            );
            assert!(rel_err(fd, analytic) < 1e-5, "wrt={wrt}: fd={fd} analytic={analytic}");
        }
        accepted += 1;
    }
    assert!(accepted >= 24, "only {accepted} clean points in {attempts} attempts");
}

#[test]
fn jacobian_diag_matches_full_jacobian_entry() {
    // For small input dims, the taped diagonal equals the corresponding
    // entry of the numerical full Jacobian.
    let mut rng = stream_rng(32, 0);
    for dims in [2usize, 5, 8] {
        let net =
            caring_core::nn::Mlp::init(&mut rng, &[dims, 10, 1], Activation::leaky_default());
        let x: Vec<f64> = (0..dims).map(|_| rng.gen_range(0.2..1.0)).collect();
        let steps = vec![1e-6; dims];
        let jac = caring_core::numdiff::central_jacobian(
            |v| net.forward(&Tensor::new(vec![1, dims], v.to_vec())).unwrap().into_data(),
            &x,
            &steps,
        );
        for wrt in 0..dims {
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let input = tape.leaf(Tensor::new(vec![1, dims], x.clone()));
            let d = net.record_jacobian_diag(&mut tape, &vars, input, wrt).unwrap();
            assert!(rel_err(jac[0][wrt], tape.value(d).scalar_value()) < 1e-5);
        }
    }
}

/// Build a model whose flow components are strictly monotone in the current
/// coordinate: one hidden layer of 8 leaky units, z-path weights 1, history
/// weights small, output weights positive and normalized so the composite
/// slope stays within [slope·1.5, 1.5].
fn monotone_flow_model(n: usize, slope: f64, seed: u64) -> CaringModel {
    let mut hyper = ModelHyper::new(n, n, 1, 1);
    hyper.flow_hidden = vec![8];
    hyper.leaky_slope = slope;
    let mut model = CaringModel::init(hyper, seed);
    let mut rng = stream_rng(seed, 99);
    for f in &mut model.flows {
        let l1 = &mut f.layers[0];
        let cols = l1.weights.cols();
        for row in l1.weights.data_mut().chunks_exact_mut(cols) {
            row[0] = 1.0;
            for w in row[1..].iter_mut() {
                *w = rng.gen_range(-0.3..0.3);
            }
        }
        for b in l1.bias.data_mut() {
            *b = rng.gen_range(-1.5..1.5);
        }
        let l2 = &mut f.layers[1];
        let mut c: Vec<f64> = (0..8).map(|_| rng.gen_range(0.05..0.3)).collect();
        let sum: f64 = c.iter().sum();
        for v in c.iter_mut() {
            *v *= 1.5 / sum;
        }
        l2.weights = Tensor::new(vec![1, 8], c);
        l2.bias = Tensor::new(vec![1], vec![rng.gen_range(-0.2..0.2)]);
    }
    model
}

fn quadrature_normalization(n: usize, slope: f64, points_per_axis: usize) -> f64 {
    let model = monotone_flow_model(n, slope, 900 + n as u64);
    let hist_row: Vec<f64> = (0..n).map(|i| 0.2 * (i as f64 + 1.0)).collect();

    // Extend the box until every component maps its ends past ±5.5 standard
    // deviations, making truncated tail mass negligible.
    let mut bound = 8.0f64;
    loop {
        let mut ok = true;
        for i in 0..n {
            for sign in [-1.0f64, 1.0] {
                let mut z = vec![0.0; n];
                z[i] = sign * bound;
                let zc = Tensor::new(vec![1, n], z);
                let hist = Tensor::new(vec![1, n], hist_row.clone());
                let (eps, _) = model.flow_forward(i, &flow_input(&zc, &hist, i)).unwrap();
                if !(eps[0].signum() == sign && eps[0].abs() >= 5.5) {
                    ok = false;
                }
            }
        }
        if ok {
            break;
        }
        bound *= 1.5;
        assert!(bound < 1e4, "flow range never covered the noise support");
    }

    // Tensor-product composite Simpson over [−bound, bound]^n, batched rows.
    let m = points_per_axis;
    assert!(m % 2 == 1, "Simpson needs an odd point count");
    let h = 2.0 * bound / (m as f64 - 1.0);
    let axis: Vec<f64> = (0..m).map(|i| -bound + h * i as f64).collect();
    let weight = |idx: usize| -> f64 {
        if idx == 0 || idx == m - 1 {
            1.0
        } else if idx % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let total_points: usize = m.pow(n as u32);
    let chunk = 65536;
    let mut integral = 0.0;
    let mut index = 0usize;
    let mut rows: Vec<f64> = Vec::with_capacity(chunk * n);
    let mut weights: Vec<f64> = Vec::with_capacity(chunk);
    while index < total_points {
        rows.clear();
        weights.clear();
        let end = (index + chunk).min(total_points);
        for flat in index..end {
            let mut rem = flat;
            let mut wgt = 1.0;
            for _ in 0..n {
                let i = rem % m;
                rem /= m;
                rows.push(axis[i]);
                wgt *= weight(i);
            }
            weights.push(wgt);
        }
        let count = end - index;
        let z = Tensor::new(vec![count, n], rows.clone());
        let mut hist_data = Vec::with_capacity(count * n);
        for _ in 0..count {
            hist_data.extend_from_slice(&hist_row);
        }
        let hist = Tensor::new(vec![count, n], hist_data);
        let lp = model.prior_log_density(&z, &hist).unwrap();
        for (v, w) in lp.iter().zip(&weights) {
            integral += v.exp() * w;
        }
        index = end;
    }
    integral * (h / 3.0).powi(n as i32)
}

#[test]
fn prior_density_normalizes_on_1d_grid() {
    let total = quadrature_normalization(1, 0.1, 64001);
    assert!((total - 1.0).abs() < 1e-3, "integral = {total}");
}

#[test]
fn prior_density_normalizes_on_2d_grid() {
    let total = quadrature_normalization(2, 0.4, 1401);
    assert!((total - 1.0).abs() < 1e-3, "integral = {total}");
}

#[test]
fn prior_density_normalizes_on_3d_grid() {
    let total = quadrature_normalization(3, 0.8, 201);
    assert!((total - 1.0).abs() < 1e-3, "integral = {total}");
}

#[test]
fn sampled_kld_is_zero_when_posterior_equals_prior() {
    // Posterior == prior == standard normal; identity flow. The sampled KLD
    // over 10⁴ draws must average 0 within 3 standard errors.
    let hyper = ModelHyper::new(1, 1, 0, 1);
    let model = CaringModel::init_with_flow(hyper, FlowKind::Identity, 40);
    let rows = 10_000;
    let mean = Tensor::zeros(vec![rows, 1]);
    let log_var = Tensor::zeros(vec![rows, 1]);
    let mut rng = stream_rng(41, 0);
    let noise = Tensor::new(
        vec![rows, 1],
        (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    );
    let hist = Tensor::zeros(vec![rows, 1]);
    let kld = model.kld_sampled(&mean, &log_var, &noise, &hist).unwrap();
    let (m, sd) = mean_std(&kld);
    let se = sd / (rows as f64).sqrt();
    // When posterior and prior coincide the estimator is exactly zero
    // pointwise, so the standard error itself degenerates.
    assert!(m.abs() <= 3.0 * se + 1e-12, "mean {m} vs 3·se {}", 3.0 * se);
}

#[test]
fn sampled_kld_matches_gaussian_closed_form() {
    // q = N(m, s²), prior standard normal (identity flow):
    // KL = ½(s² + m² − 1 − ln s²) per coordinate.
    let hyper = ModelHyper::new(2, 2, 0, 1);
    let model = CaringModel::init_with_flow(hyper, FlowKind::Identity, 42);
    let rows = 10_000;
    let (m1, s1) = (0.7, 1.3f64);
    let (m2, s2) = (-0.4, 0.6f64);
    let mean = Tensor::new(vec![rows, 2], (0..rows).flat_map(|_| [m1, m2]).collect());
    let log_var =
        Tensor::new(vec![rows, 2], (0..rows).flat_map(|_| [2.0 * s1.ln(), 2.0 * s2.ln()]).collect());
    let mut rng = stream_rng(43, 0);
    let noise = Tensor::new(
        vec![rows, 2],
        (0..rows * 2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    );
    let hist = Tensor::zeros(vec![rows, 2]);
    let kld = model.kld_sampled(&mean, &log_var, &noise, &hist).unwrap();
    let closed = 0.5 * (s1 * s1 + m1 * m1 - 1.0 - (s1 * s1).ln())
        + 0.5 * (s2 * s2 + m2 * m2 - 1.0 - (s2 * s2).ln());
    let (mean_kld, sd) = mean_std(&kld);
    let se = sd / (rows as f64).sqrt();
    assert!(
        (mean_kld - closed).abs() < 3.0 * se,
        "sampled {mean_kld} vs closed {closed} (3·se = {})",
        3.0 * se
    );
}

#[test]
fn prior_log_density_is_batch_order_invariant() {
    let mut hyper = ModelHyper::new(3, 2, 2, 1);
    hyper.flow_hidden = vec![8, 8];
    let model = CaringModel::init(hyper, 44);
    let mut rng = stream_rng(45, 0);
    let z = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let hist = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let base = model.prior_log_density(&z, &hist).unwrap();
    let perm = [5usize, 3, 0, 4, 1, 2];
    let z_p = Tensor::from_rows(&perm.iter().map(|&r| z.row(r).to_vec()).collect::<Vec<_>>());
    let h_p = Tensor::from_rows(&perm.iter().map(|&r| hist.row(r).to_vec()).collect::<Vec<_>>());
    let permuted = model.prior_log_density(&z_p, &h_p).unwrap();
    for (i, &r) in perm.iter().enumerate() {
        assert_eq!(permuted[i], base[r]);
    }
}

#[test]
fn reconstruction_never_reads_ground_truth_latents() {
    // Replacing z in the batch must not change the objective.
    let hyper = ModelHyper::new(3, 2, 2, 1);
    let model = CaringModel::init(hyper, 46);
    let spec = GenerativeSpec::ng_default(6);
    let mut batch = generate(&spec, 4, 8, Exec::Sequential).unwrap();
    let windows = batch.windows(2);
    let x = Tensor::new(vec![32, 2], batch.x.clone());
    let noise = model.draw_noise(32, &mut stream_rng(7, 0));
    let v1 = model.elbo_value(&windows, &x, &noise, 4, 8, 1.0).unwrap();
    for z in batch.z.iter_mut() {
        *z = 99.0;
    }
    let windows2 = batch.windows(2);
    let x2 = Tensor::new(vec![32, 2], batch.x.clone());
    let v2 = model.elbo_value(&windows2, &x2, &noise, 4, 8, 1.0).unwrap();
    assert_eq!(v1.total, v2.total);
}
