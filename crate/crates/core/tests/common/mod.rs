//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use advbin::codespace::BinaryCode;
use advbin::dataset::Label;
use advbin::matrix::Matrix;
use advbin::nn::{init_params, DenseNetSpec, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let plus = f(&probe);
            probe[k] = x[k] - h;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Initialized parameters with random (non-zero) biases.
pub fn random_params<R: Rng>(spec: &DenseNetSpec, seed: u64, rng: &mut R) -> ModelParams {
    let mut p = init_params(spec, seed);
    for layer in &mut p.layers {
        for b in &mut layer.bias {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    p
}

/// Smallest |pre-activation| of ReLU units, to keep finite differences off the kinks.
pub fn min_relu_margin(spec: &DenseNetSpec, params: &ModelParams, batch: &Matrix) -> f64 {
    let (_, trace) = advbin::nn::forward(params, spec, batch).unwrap();
    trace
        .pre_activations()
        .iter()
        .zip(spec.activations())
        .filter(|(_, a)| **a == advbin::nn::Activation::Relu)
        .flat_map(|(m, _)| m.as_slice().iter().map(|x| x.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min)
}

pub fn random_code<R: Rng>(bits: usize, rng: &mut R) -> BinaryCode {
    BinaryCode::from_bools(&(0..bits).map(|_| rng.random_bool(0.5)).collect::<Vec<_>>()).unwrap()
}

/// Per-bit loop, no packing tricks.
pub fn naive_hamming(a: &BinaryCode, b: &BinaryCode) -> u32 {
    let (a, b) = (a.to_bits(), b.to_bits());
    assert_eq!(a.len(), b.len());
    a.iter().zip(&b).filter(|(x, y)| x != y).count() as u32
}

/// Brute-force ranking: distances computed naively, then a stable sort by distance.
pub fn brute_force_ranking<D: PartialOrd + Copy>(distances: &[D], labels: &[Label], exclude: impl Fn(Label) -> bool) -> Vec<(usize, D)> {
    let mut rows: Vec<(usize, D)> =
        distances.iter().enumerate().filter(|(i, _)| !exclude(labels[*i])).map(|(i, &d)| (i, d)).collect();
    rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    rows
}

pub fn naive_sq_euclidean_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// AP straight from its definition over a relevance list.
pub fn naive_ap(rel: &[bool]) -> f64 {
    let r = rel.iter().filter(|&&x| x).count();
    let mut s = 0.0;
    for (k, &hit) in rel.iter().enumerate() {
        if hit {
            let hits_so_far = rel[..=k].iter().filter(|&&x| x).count();
            s += hits_so_far as f64 / (k + 1) as f64;
        }
    }
    s / r as f64
}

pub mod grads {
    use super::*;
    use advbin::losses::{critic_objective, cross_entropy, generator_objective, triplet_loss, TripletBatch, TripletLabels};
    use advbin::nn::{grad_check, Activation};

    pub struct Outcome {
        pub name: &'static str,
        pub instances: usize,
        pub worst: f64,
    }

    fn labels(n: usize) -> Vec<TripletLabels> {
        (0..n as u32)
            .map(|i| TripletLabels {
                anchor: Label { identity: i, view: 0 },
                positive: Label { identity: i, view: 1 },
                negative: Label { identity: i + 1000, view: 0 },
            })
            .collect()
    }

    /// Network-level check with a random linear readout, resampling instances whose
    /// ReLU pre-activations sit within 1e-3 of the kink.
    fn layer_suite(name: &'static str, instances: usize, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> DenseNetSpec) -> Outcome {
        let mut r = rng(seed);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < instances {
            let spec = make(&mut r);
            let params = random_params(&spec, r.random(), &mut r);
            let batch = random_matrix(r.random_range(1..5), spec.input_dim(), 1.0, &mut r);
            if min_relu_margin(&spec, &params, &batch) < 1e-3 {
                continue;
            }
            let readout = random_matrix(batch.rows(), spec.output_dim(), 1.0, &mut r);
            let loss = |out: &Matrix| -> advbin::Result<(f64, Matrix)> {
                let v = out.as_slice().iter().zip(readout.as_slice()).map(|(a, b)| a * b).sum();
                Ok((v, readout.clone()))
            };
            worst = worst.max(grad_check(&spec, &params, loss, &batch, FD_STEP).unwrap());
            done += 1;
        }
        Outcome { name, instances, worst }
    }

    pub fn dense(instances: usize) -> Outcome {
        layer_suite("dense layer", instances, 101, |r| {
            DenseNetSpec::new(vec![r.random_range(1..6), r.random_range(1..6)], vec![Activation::None], false).unwrap()
        })
    }

    pub fn relu(instances: usize) -> Outcome {
        layer_suite("relu layer", instances, 102, |r| {
            let sizes = vec![r.random_range(1..6), r.random_range(2..8), r.random_range(1..5)];
            DenseNetSpec::mlp(sizes, Activation::Relu, Activation::Relu, false).unwrap()
        })
    }

    pub fn l2_head(instances: usize) -> Outcome {
        layer_suite("l2-normalization head", instances, 103, |r| {
            let sizes = vec![r.random_range(1..6), r.random_range(2..7)];
            DenseNetSpec::new(sizes, vec![Activation::None], true).unwrap()
        })
    }

    pub fn critic(instances: usize) -> Outcome {
        let mut r = rng(104);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (nr, nf) = (r.random_range(1..9), r.random_range(1..9));
            let x: Vec<f64> = (0..nr + nf).map(|_| r.random_range(-2.0..2.0)).collect();
            let obj = critic_objective(&x[..nr], &x[nr..]).unwrap();
            let analytic: Vec<f64> = obj.grad_real.iter().chain(&obj.grad_fake).copied().collect();
            let numeric = fd_gradient(|v| critic_objective(&v[..nr], &v[nr..]).unwrap().value, &x, FD_STEP);
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        Outcome { name: "critic objective", instances, worst }
    }

    pub fn generator(instances: usize) -> Outcome {
        let mut r = rng(105);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let x: Vec<f64> = (0..r.random_range(1..9)).map(|_| r.random_range(-2.0..2.0)).collect();
            let (_, analytic) = generator_objective(&x).unwrap();
            let numeric = fd_gradient(|v| generator_objective(v).unwrap().0, &x, FD_STEP);
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        Outcome { name: "generator objective", instances, worst }
    }

    pub fn triplet(instances: usize) -> Outcome {
        let mut r = rng(106);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < instances {
            let (n, m) = (r.random_range(1..5), r.random_range(1..6));
            let alpha = r.random_range(0.1..1.0);
            let stacked = random_matrix(3 * n, m, 1.0, &mut r);
            let eval = |v: &[f64]| {
                let s = Matrix::from_vec(3 * n, m, v.to_vec()).unwrap();
                triplet_loss(&TripletBatch::from_stacked(&s, labels(n)).unwrap(), alpha).unwrap()
            };
            let tl = eval(stacked.as_slice());
            // Keep every hinge clear of its kink.
            if tl.per_triplet.iter().any(|&h| h.abs() < 1e-3) {
                continue;
            }
            let batch = TripletBatch::from_stacked(&stacked, labels(n)).unwrap();
            let hinge_raw: Vec<f64> = (0..n)
                .map(|i| {
                    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    d(batch.anchors.row(i), batch.positives.row(i)) - d(batch.anchors.row(i), batch.negatives.row(i)) + alpha
                })
                .collect();
            if hinge_raw.iter().any(|h| h.abs() < 1e-3) {
                continue;
            }
            let numeric = fd_gradient(|v| eval(v).loss, stacked.as_slice(), FD_STEP);
            worst = worst.max(max_relative_error(tl.stacked_grad().as_slice(), &numeric));
            done += 1;
        }
        Outcome { name: "triplet loss", instances, worst }
    }

    pub fn cross_entropy_loss(instances: usize) -> Outcome {
        let mut r = rng(107);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (n, k) = (r.random_range(1..6), r.random_range(2..7));
            let logits = random_matrix(n, k, 3.0, &mut r);
            let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let (_, g) = cross_entropy(&logits, &targets).unwrap();
            let numeric =
                fd_gradient(|v| cross_entropy(&Matrix::from_vec(n, k, v.to_vec()).unwrap(), &targets).unwrap().0, logits.as_slice(), FD_STEP);
            worst = worst.max(max_relative_error(g.as_slice(), &numeric));
        }
        Outcome { name: "cross-entropy", instances, worst }
    }

    /// Triplet loss composed with an l2-normalized ReLU extractor.
    pub fn triplet_through_extractor(instances: usize) -> Outcome {
        let mut r = rng(108);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < instances {
            let n = r.random_range(1..4);
            let spec = DenseNetSpec::mlp(vec![4, 6, 5], Activation::Relu, Activation::None, true).unwrap();
            let params = random_params(&spec, r.random(), &mut r);
            let batch = random_matrix(3 * n, 4, 1.0, &mut r);
            if min_relu_margin(&spec, &params, &batch) < 1e-3 {
                continue;
            }
            let alpha = 0.3;
            let loss = |out: &Matrix| -> advbin::Result<(f64, Matrix)> {
                let tl = triplet_loss(&TripletBatch::from_stacked(out, labels(n))?, alpha)?;
                Ok((tl.loss, tl.stacked_grad()))
            };
            let (out, _) = advbin::nn::forward(&params, &spec, &batch).unwrap();
            if loss(&out).unwrap().0 == 0.0 {
                continue;
            }
            let tl = triplet_loss(&TripletBatch::from_stacked(&out, labels(n)).unwrap(), alpha).unwrap();
            if tl.per_triplet.iter().any(|&h| h > 0.0 && h < 1e-3) {
                continue;
            }
            worst = worst.max(grad_check(&spec, &params, loss, &batch, FD_STEP).unwrap());
            done += 1;
        }
        Outcome { name: "triplet through extractor", instances, worst }
    }

    pub fn all(instances: usize) -> Vec<Outcome> {
        vec![
            dense(instances),
            relu(instances),
            l2_head(instances),
            critic(instances),
            generator(instances),
            triplet(instances),
            cross_entropy_loss(instances),
            triplet_through_extractor(instances),
        ]
    }
}
