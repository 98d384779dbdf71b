//! Finite-difference checks of the full network backward pass.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sda_core::net::{init_params, model_backward, model_forward, Architecture, Mode, NetworkParams};
use sda_core::train::weighted_cross_entropy;

const EPS: f64 = 1e-3;

/// ReLU on/off pattern of every layer plus the winning channel per map.
fn kinks(params: &NetworkParams, x: &Array3<f64>) -> Vec<u8> {
    let cache = model_forward(params, &x.view(), Mode::Train).unwrap().cache.unwrap();
    let mut sig = Vec::new();
    for b in &cache.blocks {
        for a in b.conv_inputs.iter().skip(1).chain(std::iter::once(&b.last_activation)) {
            sig.extend(a.iter().map(|v| u8::from(*v > 0.0)));
        }
    }
    sig.extend(cache.head_activation.iter().map(|v| u8::from(*v > 0.0)));
    sig.extend(cache.head.argmax.iter().map(|&c| c as u8));
    sig
}

fn loss(params: &NetworkParams, x: &Array3<f64>, labels: &[u8], weights: &[f64]) -> f64 {
    let out = model_forward(params, &x.view(), Mode::Train).unwrap();
    let probs = out.cache.unwrap().probs;
    // weighted_cross_entropy is a weighted mean; the backward pass is for the sum.
    weighted_cross_entropy(&probs, labels, weights) * weights.iter().sum::<f64>()
}

/// Parameters feeding a batch norm through an active ReLU have exactly zero
/// gradient; the floor keeps difference roundoff from counting as error.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Positive biases keep most units active.
fn shift_biases(params: &mut NetworkParams, rng: &mut ChaCha8Rng) {
    let names = params.tensor_names();
    for (name, t) in names.iter().zip(params.learnable_mut()) {
        if name.ends_with("bias") || name.ends_with("beta") {
            t.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.0));
        } else if name.ends_with("gamma") {
            t.iter_mut().for_each(|v| *v = rng.gen_range(0.8..1.2));
        }
    }
}

struct Report {
    /// Per tensor: relative error over the coordinates whose perturbation
    /// crosses no kink.
    errors: Vec<(String, f64)>,
    checked: usize,
    total: usize,
}

fn check(arch: Architecture, seed: u64, channels: usize) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array3::from_shape_fn((2, channels, 256), |_| rng.gen_range(-1.0..1.0));
    let labels = [0u8, 1];
    let weights = [1.0, 0.5];
    let mut params = init_params(arch, seed);
    shift_biases(&mut params, &mut rng);

    let out = model_forward(&params, &x.view(), Mode::Train).unwrap();
    let grads = model_backward(&params, out.cache.as_ref().unwrap(), &labels, &weights).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let names = params.tensor_names();
    let base = kinks(&params, &x);

    let (mut errors, mut checked, mut total) = (Vec::new(), 0, 0);
    for (t, name) in names.iter().enumerate() {
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for i in 0..analytic[t].len() {
            let orig = params.learnable()[t][i];
            params.learnable_mut()[t][i] = orig + EPS;
            let up = loss(&params, &x, &labels, &weights);
            let smooth_up = kinks(&params, &x) == base;
            params.learnable_mut()[t][i] = orig - EPS;
            let down = loss(&params, &x, &labels, &weights);
            let smooth_down = kinks(&params, &x) == base;
            params.learnable_mut()[t][i] = orig;
            if smooth_up && smooth_down {
                a.push(analytic[t][i]);
                n.push((up - down) / (2.0 * EPS));
            }
        }
        checked += a.len();
        total += analytic[t].len();
        errors.push((name.clone(), rel_err(&a, &n)));
    }
    Report { errors, checked, total }
}

fn assert_close(report: &Report) {
    // Coordinates whose step flips a ReLU or the channel max are skipped.
    assert!(report.checked * 2 >= report.total, "checked {} of {}", report.checked, report.total);
    for (name, err) in &report.errors {
        assert!(*err <= 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn full_network_matches_central_differences() {
    let report = check(Architecture::TINY, 11, 2);
    assert_eq!(report.errors.iter().filter(|(n, _)| n.contains("conv") && n.ends_with("weight")).count(), 10);
    assert_close(&report);
}

#[test]
fn full_network_over_seeds_and_channel_counts() {
    for seed in 0..6 {
        assert_close(&check(Architecture::TINY, seed, 1 + seed as usize % 3));
    }
}

