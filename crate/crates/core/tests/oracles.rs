mod common;

use common::*;
use oodfuzz_core::coverage::{CoverageCriterion, CoverageState, KMultisection, NeuronCoverage};
use oodfuzz_core::nn::{backward, forward_trace, ActivationTrace};
use oodfuzz_core::ood::{msp_score, MahalanobisParams};
use oodfuzz_core::profiler::{fit_mahalanobis_features, invert_spd};
use oodfuzz_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trace_of(values: Vec<f32>) -> ActivationTrace {
    ActivationTrace {
        neuron_values: values,
        logits: vec![0.0],
        penultimate: vec![],
        predicted_class: 0,
    }
}

#[test]
fn forward_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let input = rng.random_range(1..12);
        let widths: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..9)).collect();
        let (net, refs) = random_mlp(&mut rng, input, &widths);
        let x: Vec<f32> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let trace = forward_trace(&net, &Tensor::new(vec![input], x.clone()).unwrap()).unwrap();
        let expected = forward_ref(&refs, &x.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        let flat: Vec<f64> = expected.iter().flatten().copied().collect();
        assert_eq!(trace.neuron_values.len(), flat.len());
        for (a, b) in trace.neuron_values.iter().zip(&flat) {
            assert!((f64::from(*a) - b).abs() < 1e-4, "{a} vs {b}");
        }
        for (a, b) in trace.logits.iter().zip(expected.last().unwrap()) {
            assert!((f64::from(*a) - b).abs() < 1e-4);
        }
    }
}

#[test]
fn nc_and_kmnc_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let input = rng.random_range(1..6);
        let widths: Vec<usize> = vec![rng.random_range(1..5), rng.random_range(1..4)];
        let (net, _) = random_mlp(&mut rng, input, &widths);
        let traces: Vec<Vec<f32>> = (0..rng.random_range(1..20))
            .map(|_| {
                let x: Vec<f32> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
                forward_trace(&net, &Tensor::new(vec![input], x).unwrap()).unwrap().neuron_values
            })
            .collect();
        let t = rng.random_range(0.05f32..0.95);
        let k = rng.random_range(1..=10);
        let n = net.neuron_count();
        let low: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..0.5)).collect();
        let high: Vec<f32> = low.iter().map(|&l| l + rng.random_range(0.0..2.0)).collect();

        let nc = NeuronCoverage::new(&net, t);
        let kmnc = KMultisection::new(low.clone(), high.clone(), k);
        let mut nc_state = CoverageState::for_criterion(&nc);
        let mut kmnc_state = CoverageState::for_criterion(&kmnc);
        for v in &traces {
            nc_state.update(&nc, &trace_of(v.clone()));
            kmnc_state.update(&kmnc, &trace_of(v.clone()));
        }
        let nc_bits: Vec<bool> = (0..nc.capacity()).map(|i| nc_state.is_set(i)).collect();
        let kmnc_bits: Vec<bool> = (0..kmnc.capacity()).map(|i| kmnc_state.is_set(i)).collect();
        assert_eq!(nc_bits, nc_oracle(net.neuron_groups(), &traces, t));
        assert_eq!(kmnc_bits, kmnc_oracle(&low, &high, &traces, k));
    }
}

#[test]
fn kmnc_section_boundaries_are_exact() {
    // values placed exactly on every section boundary of [0.1, 0.7] with k = 3
    let low = vec![0.1f32];
    let high = vec![0.7f32];
    let values: Vec<Vec<f32>> = [0.1f32, 0.3, 0.5, 0.7, 0.29999998, 0.099999994, 0.70000005]
        .iter()
        .map(|&v| vec![v])
        .collect();
    for v in &values {
        let expected = kmnc_oracle(&low, &high, std::slice::from_ref(v), 3);
        let got = KMultisection::section(low[0], high[0], v[0], 3);
        assert_eq!(got, expected.iter().position(|&b| b), "value {}", v[0]);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    while checked < 10 {
        let input = rng.random_range(2..6);
        let widths = vec![rng.random_range(2..6), rng.random_range(2..5), rng.random_range(2..4)];
        let (net, refs) = random_mlp(&mut rng, input, &widths);
        let x: Vec<f32> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        if min_hidden_preactivation(&refs, &x64) < 1e-3 {
            continue;
        }
        let label = rng.random_range(0..*widths.last().unwrap());
        let grads = backward(&net, &Tensor::new(vec![input], x).unwrap(), label).unwrap();
        let fd = fd_gradients(&refs, &x64, label, 1e-6);
        let analytic: Vec<f64> = grads
            .layers
            .iter()
            .flatten()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect();
        let numeric: Vec<f64> = fd.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!(diff / norm.max(1e-12) < 1e-4, "relative error {}", diff / norm);
        checked += 1;
    }
}

#[test]
fn uniform_logits_msp_closed_form() {
    for c in 2..20 {
        let trace = ActivationTrace {
            neuron_values: vec![],
            logits: vec![0.37; c],
            penultimate: vec![],
            predicted_class: 0,
        };
        assert_eq!(msp_score(&trace, 1.0), 1.0 - 1.0 / c as f64);
    }
}

/// Gauss-Jordan inverse, independent of the Cholesky path.
fn gauss_jordan_inverse(m: &[f64], n: usize) -> Vec<f64> {
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = m[i * n..(i + 1) * n].to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                a[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    a.into_iter().flat_map(|row| row[n..].to_vec()).collect()
}

#[test]
fn mahalanobis_matches_quadratic_form_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let dim = rng.random_range(1..6);
        let classes = rng.random_range(2..4);
        let n = 40;
        let feats: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let refs: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();
        let params = fit_mahalanobis_features(&refs, &labels, classes).unwrap();

        let mut means = vec![vec![0.0f64; dim]; classes];
        let counts: Vec<usize> = (0..classes).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        for (f, &l) in feats.iter().zip(&labels) {
            for d in 0..dim {
                means[l][d] += f64::from(f[d]) / counts[l] as f64;
            }
        }
        let mut cov = vec![0.0f64; dim * dim];
        for (f, &l) in feats.iter().zip(&labels) {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] += (f64::from(f[i]) - means[l][i]) * (f64::from(f[j]) - means[l][j]) / n as f64;
                }
            }
        }
        let eps = 1e-3 * (0..dim).map(|i| cov[i * dim + i]).sum::<f64>() / dim as f64;
        (0..dim).for_each(|i| cov[i * dim + i] += eps);
        let prec = gauss_jordan_inverse(&cov, dim);

        let probe: Vec<f32> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let oracle = means
            .iter()
            .map(|m| {
                let d: Vec<f64> = probe.iter().zip(m).map(|(&p, mu)| f64::from(p) - mu).collect();
                (0..dim).map(|i| (0..dim).map(|j| d[i] * prec[i * dim + j] * d[j]).sum::<f64>()).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        let got = params.distance(&probe).unwrap();
        assert!((got - oracle).abs() <= 1e-6 * oracle.abs().max(1.0), "{got} vs {oracle}");
    }
}

#[test]
fn one_dimensional_mahalanobis_closed_form() {
    let params = MahalanobisParams::new(vec![vec![3.0]], vec![0.25]).unwrap();
    assert!((params.distance(&[5.0]).unwrap() - 1.0).abs() < 1e-9);
    assert!((params.distance(&[1.0]).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn cholesky_inverse_matches_gauss_jordan() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for n in 1..7 {
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut spd = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                spd[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
            }
        }
        let got = invert_spd(&spd, n).unwrap();
        let expected = gauss_jordan_inverse(&spd, n);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-9);
        }
    }
}
