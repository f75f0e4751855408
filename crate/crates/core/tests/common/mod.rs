//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sijgrade::grader::{CnnConfig, SliceNet};
use sijgrade::nn::{HasParams, Tensor};

fn reduced() -> CnnConfig {
    CnnConfig {
        num_classes: 3,
        channels: [2, 2, 2],
        hidden: 6,
        input_rows: 20,
        input_cols: 40,
        batch_size: 4,
        seed: 11,
        ..CnnConfig::default()
    }
}

fn batch(seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..4 * 20 * 40).map(|_| rng.random_range(0.0..1.0)).collect();
    (Tensor::from_vec([4, 1, 20, 40], data), vec![0, 1, 2, 1])
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter of the network.
pub fn max_relative_error() -> f64 {
    let mut net = SliceNet::<f64>::new(&reduced()).unwrap();
    let (x, y) = batch(5);
    net.loss_and_grad(&x, &y);
    let mut analytic = Vec::new();
    net.visit_params(&mut |_, p| analytic.push(p.grad.clone()));

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut slot = 0;
    let n_slots = analytic.len();
    while slot < n_slots {
        let len = analytic[slot].len();
        for i in 0..len {
            let loss_at = |delta: f64, net: &mut SliceNet<f64>| {
                let mut s = 0;
                net.visit_params(&mut |_, p| {
                    if s == slot {
                        p.value[i] += delta;
                    }
                    s += 1;
                });
                net.loss_and_grad(&x, &y)
            };
            let plus = loss_at(eps, &mut net);
            let minus = loss_at(-2.0 * eps, &mut net);
            loss_at(eps, &mut net);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[slot][i];
            // Near-zero gradients (dead ReLU channels) are compared against a
            // 1e-5 floor; central differences carry ~1e-10 roundoff.
            let denom = a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max((a - numeric).abs() / denom);
        }
        slot += 1;
    }
    worst
}


/// Literal case rule: sick on more than one grade-4 slice or three
/// consecutive grade-3 slices; suspicious when at least 30 % of the slices
/// are grade 2; healthy otherwise. Returns 0, 1 or 2.
pub fn literal_rule(v: &[u8]) -> usize {
    let k = v.len();
    let mut fours = 0;
    for i in 0..k {
        if v[i] == 4 {
            fours += 1;
        }
    }
    let mut triple3 = false;
    for i in 0..k.saturating_sub(2) {
        if v[i] == 3 && v[i + 1] == 3 && v[i + 2] == 3 {
            triple3 = true;
        }
    }
    if fours > 1 || triple3 {
        return 2;
    }
    let mut twos = 0;
    for i in 0..k {
        if v[i] == 2 {
            twos += 1;
        }
    }
    if 10 * twos >= 3 * k {
        1
    } else {
        0
    }
}

/// Breadth-first 26-connected labeling; labels in x-fastest first-encounter
/// order, 0 for background.
pub fn flood_fill_labels(bits: &[bool], dims: [usize; 3]) -> (usize, Vec<u32>) {
    let [nx, ny, nz] = dims;
    let mut labels = vec![0u32; bits.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(o) = queue.pop_front() {
            let (x, y, z) = (o % nx, (o / nx) % ny, o / (nx * ny));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                            continue;
                        }
                        let n = a as usize + nx * (b as usize + ny * c as usize);
                        if bits[n] && labels[n] == 0 {
                            labels[n] = next;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
    }
    (next as usize, labels)
}

/// AUC as the Mann-Whitney probability that a positive outscores a negative,
/// ties counting one half.
pub fn mann_whitney_auc(truth: &[bool], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &ti) in truth.iter().enumerate() {
        for (j, &tj) in truth.iter().enumerate() {
            if ti && !tj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Independent Bernoulli voxels.
pub fn random_mask(seed: u64, dims: [usize; 3], density: f64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dims[0] * dims[1] * dims[2]).map(|_| rng.random_bool(density)).collect()
}
