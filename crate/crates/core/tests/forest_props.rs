use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sijgrade::forest::{train_forest, Forest, ForestParams};

fn params(depth: usize, seed: u64) -> ForestParams {
    ForestParams { n_trees: 25, max_depth: depth, seed, ..ForestParams::default() }
}

fn accuracy(f: &Forest, x: &[Vec<f64>], y: &[usize]) -> f64 {
    x.iter().zip(y).filter(|(p, &t)| f.predict(p).unwrap() == t).count() as f64 / x.len() as f64
}

fn noisy_set(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y = x
        .iter()
        .map(|p| usize::from(p[0] * p[1] + 0.3 * p[2] + rng.random_range(-0.2..0.2) > 0.0))
        .collect();
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probabilities_sum_to_one(seed in any::<u64>(), probes in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 20)) {
        let (x, y) = noisy_set(seed, 120);
        let f = train_forest(&x, &y, &params(6, seed)).unwrap();
        for (a, b, c) in probes {
            let p = f.predict_proba(&[a, b, c]).unwrap();
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_forest(seed in any::<u64>()) {
        let (x, y) = noisy_set(seed, 100);
        let a = train_forest(&x, &y, &params(5, seed)).unwrap();
        let b = train_forest(&x, &y, &params(5, seed)).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }
}

#[test]
fn deeper_trees_fit_training_data_at_least_as_well() {
    for s in 0..5 {
        let (x, y) = noisy_set(100 + s, 300);
        let shallow = train_forest(&x, &y, &params(1, s)).unwrap();
        let deep = train_forest(&x, &y, &params(8, s)).unwrap();
        assert!(accuracy(&deep, &x, &y) >= accuracy(&shallow, &x, &y), "set {s}");
    }
}

#[test]
fn separable_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..1000 {
        let c = i % 2;
        let f0 = if c == 1 { rng.random_range(0.05..2.0) } else { rng.random_range(-2.0..-0.05) };
        x.push(vec![f0, rng.random_range(-2.0..2.0)]);
        y.push(c);
    }
    let f = train_forest(&x[..700], &y[..700], &params(8, 1)).unwrap();
    assert!(accuracy(&f, &x[700..], &y[700..]) >= 0.99);
}

#[test]
fn label_independent_features_recover_priors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let y: Vec<usize> = (0..2000).map(|_| usize::from(rng.random_bool(0.3))).collect();
    let prior = y.iter().sum::<usize>() as f64 / y.len() as f64;
    let p = ForestParams { n_trees: 200, max_depth: 2, min_samples_leaf: 200, seed: 3, ..ForestParams::default() };
    let f = train_forest(&x, &y, &p).unwrap();
    for _ in 0..50 {
        let probe = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let q = f.predict_proba(&probe).unwrap()[1];
        assert!((q - prior).abs() < 0.05, "{q} vs prior {prior}");
    }
}
