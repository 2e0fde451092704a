use std::collections::BTreeMap;

use ktan_core::data::{generate_synthetic, SyntheticSpec};
use ktan_core::desk;
use ktan_core::nn::{init_param, Network, NetworkState, Param, Part, Sgd};
use ktan_core::rng;
use ktan_core::tensor::Tensor;
use ktan_core::train::{argmax_rows, evaluate, predict};

#[test]
fn weight_init_variance_tracks_fan_in() {
    let mut r = rng::seeded(5);
    for fan_in in [9usize, 72, 288] {
        let p: Param<f64> = init_param("w".into(), Part::Generator, vec![64, fan_in], fan_in, false, &mut r).unwrap();
        let d = p.value.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let expected = 2.0 / fan_in as f64;
        // Sample variance of n Gaussians has relative std sqrt(2/(n-1)).
        let tol = 5.0 * (2.0 / (d.len() - 1) as f64).sqrt();
        assert!((var / expected - 1.0).abs() < tol, "fan_in {fan_in}: {var} vs {expected}");
        assert!(mean.abs() < 5.0 * (expected / d.len() as f64).sqrt());
    }
    let b: Param<f64> = init_param("b".into(), Part::Generator, vec![10], 9, true, &mut r).unwrap();
    assert!(b.value.data().iter().all(|&v| v == 0.0));
}

#[test]
fn network_init_is_seeded() {
    let spec = desk::student([1, 16, 16], 4);
    let a = Network::<f64>::init(spec.clone(), 3).unwrap();
    let b = Network::<f64>::init(spec.clone(), 3).unwrap();
    let c = Network::<f64>::init(spec, 4).unwrap();
    assert!(a.state.bit_eq(&b.state));
    assert!(!a.state.bit_eq(&c.state));
}

#[test]
fn sgd_follows_the_momentum_recursion() {
    let (lr, mu, wd) = (0.1, 0.9, 0.01);
    let mut state = NetworkState {
        params: vec![Param {
            name: "w".into(),
            part: Part::Generator,
            value: Tensor::from_vec([3], vec![1.0, -2.0, 0.5]).unwrap(),
            frozen: false,
        }],
    };
    let mut opt = Sgd::new(lr, mu, wd).unwrap();
    let grads_seq = [[0.3, -0.1, 0.0], [0.2, 0.4, -0.5], [-0.1, 0.0, 0.7]];
    let mut w = [1.0, -2.0, 0.5];
    let mut v = [0.0; 3];
    for g in grads_seq {
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec([3], g.to_vec()).unwrap());
        opt.step(&mut state, &grads).unwrap();
        for i in 0..3 {
            v[i] = mu * v[i] - lr * (g[i] + wd * w[i]);
            w[i] += v[i];
        }
        assert_eq!(state.params[0].value.data(), &w);
        assert_eq!(opt.velocity("w").unwrap(), &v);
    }
}

#[test]
fn sgd_skips_frozen_parameters() {
    let mut state = NetworkState {
        params: vec![Param {
            name: "w".into(),
            part: Part::Classifier,
            value: Tensor::from_vec([2], vec![1.0, 2.0]).unwrap(),
            frozen: true,
        }],
    };
    let mut opt = Sgd::new(0.5, 0.9, 0.0).unwrap();
    opt.step(&mut state, &BTreeMap::new()).unwrap();
    assert_eq!(state.params[0].value.data(), &[1.0, 2.0]);
    assert!(opt.velocity("w").is_none());
}

#[test]
fn evaluate_matches_a_direct_recount() {
    let spec = SyntheticSpec {
        train_per_class: 20,
        test_per_class: 13,
        ..SyntheticSpec::default()
    };
    let (_, test) = generate_synthetic::<f64>(&spec, 2).unwrap();
    let net = Network::<f64>::init(desk::student([1, 16, 16], 4), 8).unwrap();
    let logits = net.logits(test.images()).unwrap();
    let k = test.classes();
    let mut correct = 0;
    for (row, &label) in logits.data().chunks(k).zip(test.labels()) {
        let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        correct += usize::from(best == label);
    }
    let expected = correct as f64 / test.len() as f64;
    for bs in [1, 7, 52, 1000] {
        assert_eq!(evaluate(&net, &test, bs).unwrap(), expected);
    }
    assert_eq!(predict(&net, &test, 5).unwrap(), argmax_rows(&logits).unwrap());
}
