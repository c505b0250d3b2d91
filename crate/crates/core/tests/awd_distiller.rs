use decomp_core::awd::{
    awd_loss, coefficient_attributions, distill, evaluate_loss, interpretation_loss, max_coefficients_features, AwdConfig,
    OptimizerKind,
};
use decomp_core::network::Layer;
use decomp_core::wavelet::{dwt_forward, dwt_inverse, WaveletFilter};
use decomp_core::{ArchitectureDescriptor, Backend, Network, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn signal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_vec((0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn filters() -> Vec<WaveletFilter<f64>> {
    vec![WaveletFilter::haar(), WaveletFilter::db2(), WaveletFilter::db5()]
}

#[test]
fn reconstruction_and_parseval() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x = signal(&mut rng, 64);
        for f in filters() {
            for levels in 1..=4 {
                let c = dwt_forward(&f, &x, levels).unwrap();
                let back = dwt_inverse(&f, &c, levels).unwrap();
                assert!(back.max_abs_diff(&x).unwrap() <= 1e-8);
                let ex: f64 = x.data().iter().map(|v| v * v).sum();
                let ec: f64 = c.data().iter().map(|v| v * v).sum();
                assert!((ex.sqrt() - ec.sqrt()).abs() <= 1e-8);
            }
        }
    }
    let zero = dwt_forward(&WaveletFilter::db5(), &Tensor::zeros(&[32]), 3).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
    assert!(dwt_forward(&WaveletFilter::<f64>::haar(), &Tensor::zeros(&[12]), 3).is_err());
}

#[test]
fn max_features_are_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let levels = 3;
    for f in filters() {
        let x = signal(&mut rng, 64);
        let shifted: Vec<f64> = (0..64).map(|k| x.data()[(k + 64 - 8) % 64]).collect();
        let a = max_coefficients_features(dwt_forward(&f, &x, levels).unwrap().data(), levels, 3).unwrap();
        let b = max_coefficients_features(dwt_forward(&f, &Tensor::from_vec(shifted), levels).unwrap().data(), levels, 3).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(a.len(), 4 * 3);
    }
}

fn linear_net(w: &[f64], bias: f64) -> Network {
    Network::new(
        vec![Layer::Linear { weight: Tensor::new(vec![1, w.len()], w.to_vec()).unwrap(), bias: Tensor::from_vec(vec![bias]) }],
        vec![w.len()],
        1,
    )
    .unwrap()
}

#[test]
fn interpretation_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 16;
    let levels = 2;
    let constant = linear_net(&vec![0.0; n], 1.5);
    let x = signal(&mut rng, n);
    for f in filters() {
        assert_eq!(interpretation_loss(&constant, &f, &x, levels, 0).unwrap(), 0.0);
    }

    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let net = linear_net(&w, 0.0);
    for f in filters() {
        let c = dwt_forward(&f, &x, levels).unwrap();
        // attribution of coefficient i is w · (Ψ⁻¹ eᵢ) · cᵢ
        let mut expect = 0.0;
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let basis = dwt_inverse(&f, &Tensor::from_vec(e), levels).unwrap();
            let wb: f64 = w.iter().zip(basis.data()).map(|(a, b)| a * b).sum();
            expect += (wb * c.data()[i]).abs();
        }
        let got = interpretation_loss(&net, &f, &x, levels, 0).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.max(1.0));

        let doubled = linear_net(&w.iter().map(|v| 2.0 * v).collect::<Vec<_>>(), 0.0);
        let twice = interpretation_loss(&doubled, &f, &x, levels, 0).unwrap();
        assert!((twice - 2.0 * got).abs() <= 1e-12 * got.max(1.0));
    }
}

fn small_mlp(n: usize, seed: u64) -> Network {
    let d = format!(
        r#"{{"input_shape":[{n}],"num_classes":1,"layers":[{{"kind":"linear","out":6}},{{"kind":"relu"}},{{"kind":"linear","out":1}}]}}"#
    );
    ArchitectureDescriptor::from_json(&d).unwrap().init_random(seed).unwrap()
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = small_mlp(16, 5);
    let rows: Vec<f64> = (0..3 * 16).map(|_| rng.sample(StandardNormal)).collect();
    let data = Tensor::new(vec![3, 16], rows).unwrap();
    let config = AwdConfig { lambda: 0.1, interp_weight: 0.05, levels: 2, ..AwdConfig::default() };
    let init: Vec<f64> = WaveletFilter::<f64>::db2().h.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
    let tape = Tape::new();
    let h = tape.param(Tensor::from_vec(init));
    let x = tape.constant(data);
    let params = net.bind(&tape, false);
    let loss = awd_loss(&tape, &net, &params, &h, &x, &config).unwrap();
    let report = tape.finite_difference_check(loss.total, h, 1e-6, 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked >= 3);
}

#[test]
fn db5_start_without_penalties_stays_put() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = small_mlp(32, 1);
    let rows: Vec<f64> = (0..8 * 32).map(|_| rng.sample(StandardNormal)).collect();
    let data = Tensor::new(vec![8, 32], rows).unwrap();
    let config = AwdConfig { lambda: 0.0, interp_weight: 0.0, levels: 2, iterations: 50, ..AwdConfig::default() };
    let init = WaveletFilter::db5();
    let out = distill(&net, &data, &init, &config).unwrap();
    let moved = out.filter.h.iter().zip(&init.h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(moved <= 1e-6, "moved {moved}");
    assert_eq!(out.history.len(), 51);
}

#[test]
fn sparsity_pulls_toward_haar() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // piecewise-constant on aligned blocks: sparse in Haar
    let rows: Vec<f64> = (0..16)
        .flat_map(|_| {
            let levels: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            (0..32).map(move |k| levels[k / 8])
        })
        .collect();
    let data = Tensor::new(vec![16, 32], rows).unwrap();
    let net = small_mlp(32, 2);
    let haar = WaveletFilter::<f64>::haar();
    let init = WaveletFilter::new(vec![haar.h[0] + 0.08, haar.h[1] - 0.05]).unwrap();
    let dist = |f: &WaveletFilter<f64>| f.h.iter().zip(&haar.h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let config = AwdConfig { lambda: 0.05, interp_weight: 0.0, levels: 3, iterations: 300, learning_rate: 1e-4, ..AwdConfig::default() };
    let out = distill(&net, &data, &init, &config).unwrap();
    assert!(dist(&out.filter) < dist(&init), "{} vs {}", dist(&out.filter), dist(&init));
    let adam = AwdConfig { optimizer: OptimizerKind::Adam, learning_rate: 2e-3, ..config };
    let out = distill(&net, &data, &init, &adam).unwrap();
    assert!(dist(&out.filter) < dist(&init));
}

#[test]
fn interpretation_weight_reduces_interpretation_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 32;
    let f = 3;
    let mut w = Vec::new();
    for sign in [1.0, -1.0] {
        for k in 0..n {
            w.push(sign * (2.0 * std::f64::consts::PI * (f * k) as f64 / n as f64).cos());
        }
    }
    let net = Network::new(
        vec![
            Layer::Linear { weight: Tensor::new(vec![2, n], w).unwrap(), bias: Tensor::zeros(&[2]) },
            Layer::Relu,
            Layer::Linear { weight: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), bias: Tensor::from_vec(vec![-2.0]) },
        ],
        vec![n],
        1,
    )
    .unwrap();
    let rows: Vec<f64> = (0..12 * n).map(|_| rng.sample(StandardNormal)).collect();
    let data = Tensor::new(vec![12, n], rows).unwrap();
    let config = AwdConfig { lambda: 0.0, interp_weight: 0.01, levels: 3, iterations: 60, ..AwdConfig::default() };
    let out = distill(&net, &data, &WaveletFilter::db5(), &config).unwrap();
    let first = out.history.first().unwrap().interpretation;
    let last = out.history.last().unwrap().interpretation;
    assert!(last < first, "{last} vs {first}");
    let end = evaluate_loss(&net, &out.filter, &data, &config).unwrap();
    assert_eq!(end.total, out.history.last().unwrap().total);
    let attr = coefficient_attributions(&net, &out.filter, &data, 3, 0).unwrap();
    assert_eq!(attr.shape(), &[12, n]);
}

#[test]
fn small_steps_do_not_increase_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = small_mlp(16, 3);
    let rows: Vec<f64> = (0..6 * 16).map(|_| rng.sample(StandardNormal)).collect();
    let data = Tensor::new(vec![6, 16], rows).unwrap();
    let mut lr = 1e-3;
    loop {
        let config = AwdConfig { lambda: 0.01, interp_weight: 0.0, levels: 2, iterations: 20, learning_rate: lr, ..AwdConfig::default() };
        let init = WaveletFilter::new(WaveletFilter::<f64>::db2().h.iter().map(|v| v * 1.05).collect()).unwrap();
        let out = distill(&net, &data, &init, &config).unwrap();
        if out.history.windows(2).all(|w| w[1].total <= w[0].total) {
            break;
        }
        lr /= 4.0;
        assert!(lr > 1e-9, "no step size gave a monotone history");
    }
}
