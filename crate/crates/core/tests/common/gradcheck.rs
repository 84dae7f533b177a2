//! Finite-difference checks, each over `cases` random instances. Every
//! check perturbs one coordinate at a time by ±STEP and compares
//! `(L(x+h) − L(x−h)) / 2h` with the analytic gradient, where
//! `L = Σ r ⊙ layer(x)` for a random upstream `r`.

use instret::encoder::layers::{self, Pooling};
use instret::encoder::{Architecture, Network};
use instret::pit::pit_loss;
use ndarray::{Array1, Array2, Array3, Ix1, Ix2, Ix3};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{central_difference, rng, uniform, ErrorTracker, STEP};

fn dot3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot1(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b)
}

pub fn conv(cases: u64) -> ErrorTracker {
    let mut t = ErrorTracker::default();
    for case in 0..cases {
        let mut g = rng("conv", case);
        let (c, h, w, o) = (g.gen_range(1..3), g.gen_range(2..5), g.gen_range(2..5), g.gen_range(1..4));
        let x = uniform(&mut g, Ix3(c, h, w), -1.0, 1.0);
        let wt = uniform(&mut g, Ix2(o, c * 9), -1.0, 1.0);
        let b = uniform(&mut g, Ix1(o), -1.0, 1.0);
        let r = uniform(&mut g, Ix3(o, h, w), -1.0, 1.0);
        let loss = |x: &Array3<f64>, wt: &Array2<f64>, b: &Array1<f64>| dot3(&layers::conv_forward(x, wt.view(), b.view()).0, &r);

        let (_, cache) = layers::conv_forward(&x, wt.view(), b.view());
        let mut dw = Array2::zeros(wt.raw_dim());
        let mut db = Array1::zeros(b.raw_dim());
        let dx = layers::conv_backward(&cache, &r, wt.view(), dw.view_mut(), db.view_mut(), true).unwrap();

        for i in 0..x.len() {
            let num = central_difference(
                |e| {
                    let mut xp = x.clone();
                    xp.as_slice_mut().unwrap()[i] += e;
                    loss(&xp, &wt, &b)
                },
                STEP,
            );
            t.record(dx.as_slice().unwrap()[i], num);
        }
        for i in 0..wt.len() {
            let num = central_difference(
                |e| {
                    let mut wp = wt.clone();
                    wp.as_slice_mut().unwrap()[i] += e;
                    loss(&x, &wp, &b)
                },
                STEP,
            );
            t.record(dw.as_slice().unwrap()[i], num);
        }
        for i in 0..b.len() {
            let num = central_difference(
                |e| {
                    let mut bp = b.clone();
                    bp[i] += e;
                    loss(&x, &wt, &bp)
                },
                STEP,
            );
            t.record(db[i], num);
        }
    }
    t
}

pub fn relu(cases: u64) -> ErrorTracker {
    let mut t = ErrorTracker::default();
    for case in 0..cases {
        let mut g = rng("relu", case);
        let n = g.gen_range(1..40);
        let x = uniform(&mut g, Ix1(n), -1.0, 1.0);
        let r = uniform(&mut g, Ix1(n), -1.0, 1.0);
        let forward = |x: &Array1<f64>| {
            let mut y = x.clone();
            layers::relu_forward(y.as_slice_mut().unwrap());
            y
        };
        let y = forward(&x);
        let mut dx = r.clone();
        layers::relu_backward(y.as_slice().unwrap(), dx.as_slice_mut().unwrap());
        for i in 0..n {
            // The kink at zero has no derivative.
            if x[i].abs() < 10.0 * STEP {
                t.skipped += 1;
                continue;
            }
            let num = central_difference(
                |e| {
                    let mut xp = x.clone();
                    xp[i] += e;
                    dot1(&forward(&xp), &r)
                },
                STEP,
            );
            t.record(dx[i], num);
        }
    }
    t
}

pub fn maxpool(cases: u64) -> ErrorTracker {
    let mut t = ErrorTracker::default();
    for case in 0..cases {
        let mut g = rng("maxpool", case);
        let (c, h, w) = (g.gen_range(1..3), g.gen_range(2..7), g.gen_range(2..7));
        // Distinct values spaced far wider than the step, so no window has a tie.
        let mut order: Vec<usize> = (0..c * h * w).collect();
        order.shuffle(&mut g);
        let x = Array3::from_shape_vec((c, h, w), order.iter().map(|&k| k as f64 * 0.01 - 0.5).collect()).unwrap();
        let (y, cache) = layers::maxpool_forward(&x);
        let r = uniform(&mut g, y.raw_dim(), -1.0, 1.0);
        let dx = layers::maxpool_backward(&cache, &r);
        for i in 0..x.len() {
            let num = central_difference(
                |e| {
                    let mut xp = x.clone();
                    xp.as_slice_mut().unwrap()[i] += e;
                    dot3(&layers::maxpool_forward(&xp).0, &r)
                },
                STEP,
            );
            t.record(dx.as_slice().unwrap()[i], num);
        }
    }
    t
}

pub fn meanpool(cases: u64, pooling: Pooling) -> ErrorTracker {
    let mut t = ErrorTracker::default();
    for case in 0..cases {
        let mut g = rng("meanpool", case);
        let dims = (g.gen_range(1..4), g.gen_range(1..6), g.gen_range(1..6));
        let x = uniform(&mut g, Ix3(dims.0, dims.1, dims.2), -1.0, 1.0);
        let y = layers::meanpool_forward(&x, pooling);
        let r = uniform(&mut g, y.raw_dim(), -1.0, 1.0);
        let dx = layers::meanpool_backward(&r, dims, pooling);
        for i in 0..x.len() {
            let num = central_difference(
                |e| {
                    let mut xp = x.clone();
                    xp.as_slice_mut().unwrap()[i] += e;
                    dot1(&layers::meanpool_forward(&xp, pooling), &r)
                },
                STEP,
            );
            t.record(dx.as_slice().unwrap()[i], num);
        }
    }
    t
}

pub fn dense(cases: u64) -> ErrorTracker {
    let mut t = ErrorTracker::default();
    for case in 0..cases {
        let mut g = rng("dense", case);
        let (n, o) = (g.gen_range(1..10), g.gen_range(1..8));
        let x = uniform(&mut g, Ix1(n), -1.0, 1.0);
        let wt = uniform(&mut g, Ix2(o, n), -1.0, 1.0);
        let b = uniform(&mut g, Ix1(o), -1.0, 1.0);
        let r = uniform(&mut g, Ix1(o), -1.0, 1.0);
        let loss = |x: &Array1<f64>, wt: &Array2<f64>, b: &Array1<f64>| dot1(&layers::dense_forward(x, wt.view(), b.view()), &r);
        let mut dw = Array2::zeros(wt.raw_dim());
        let mut db = Array1::zeros(b.raw_dim());
        let dx = layers::dense_backward(&x, &r, wt.view(), dw.view_mut(), db.view_mut());
        for i in 0..n {
            let num = central_difference(
                |e| {
                    let mut xp = x.clone();
                    xp[i] += e;
                    loss(&xp, &wt, &b)
                },
                STEP,
            );
            t.record(dx[i], num);
        }
        for i in 0..wt.len() {
            let num = central_difference(
                |e| {
                    let mut wp = wt.clone();
                    wp.as_slice_mut().unwrap()[i] += e;
                    loss(&x, &wp, &b)
                },
                STEP,
            );
            t.record(dw.as_slice().unwrap()[i], num);
        }
        for i in 0..o {
            let num = central_difference(
                |e| {
                    let mut bp = b.clone();
                    bp[i] += e;
                    loss(&x, &wt, &bp)
                },
                STEP,
            );
            t.record(db[i], num);
        }
    }
    t
}

/// Small two-stage network with both pooling modes.
pub fn toy_network(seed: u64, pooling: Pooling) -> Network<f64> {
    let arch = Architecture {
        input: (8, 6),
        conv_channels: vec![2, 3],
        pooling,
        dense: vec![5, 4],
        linear_tail: 1,
    };
    let mut net = Network::<f64>::zeros(arch).unwrap();
    net.init(&mut rng("net-init", seed));
    // Non-zero biases move pre-activations off exact zeros.
    let mut g = rng("net-bias", seed);
    for t in &mut net.params.tensors {
        if t.name.ends_with("bias") {
            for v in &mut t.data {
                *v = g.gen_range(-0.1..0.1);
            }
        }
    }
    net
}

/// Every parameter of a whole network. Coordinates whose loss is not smooth
/// across the step (a ReLU or max-pool switch) are detected by comparing the
/// estimates at `h` and `h/2` and skipped.
pub fn network(cases: u64) -> ErrorTracker {
    let mut t = ErrorTracker::default();
    for case in 0..cases {
        let pooling = if case % 2 == 0 { Pooling::Time } else { Pooling::TimeFrequency };
        let mut net = toy_network(case, pooling);
        let mut g = rng("net-input", case);
        let input = uniform(&mut g, Ix3(1, 8, 6), -1.0, 1.0);
        let r = uniform(&mut g, Ix1(net.output_width()), -1.0, 1.0);
        let (_, tape) = net.forward_with_tape(&input).unwrap();
        let grads = net.backward(&tape, &r).unwrap();
        for ti in 0..net.params.tensors.len() {
            for i in 0..net.params.tensors[ti].data.len() {
                let base = net.params.tensors[ti].data[i];
                let mut at = |e: f64| {
                    net.params.tensors[ti].data[i] = base + e;
                    let v = dot1(&net.forward(&input).unwrap(), &r);
                    net.params.tensors[ti].data[i] = base;
                    v
                };
                let full = central_difference(&mut at, STEP);
                let half = central_difference(&mut at, STEP / 2.0);
                if (full - half).abs() > 1e-7 * full.abs().max(1.0) {
                    t.skipped += 1;
                    continue;
                }
                t.record(grads.tensors[ti].data[i], full);
            }
        }
    }
    t
}

/// Gradient of the loss with respect to every output entry, skipping
/// coordinates where the perturbation changes the optimal assignment.
pub fn pit(cases: u64) -> ErrorTracker {
    let mut t = ErrorTracker::default();
    for case in 0..cases {
        let mut g = rng("pit-grad", case);
        let m = g.gen_range(1..7);
        let n = g.gen_range(1..=m);
        let d = g.gen_range(2..8);
        let targets = uniform(&mut g, Ix2(n, d), -1.0, 1.0);
        let outputs = uniform(&mut g, Ix2(m, d), -1.0, 1.0);
        let base = pit_loss(targets.view(), outputs.view()).unwrap();
        for j in 0..m {
            for k in 0..d {
                let eval = |e: f64| {
                    let mut o = outputs.clone();
                    o[[j, k]] += e;
                    pit_loss(targets.view(), o.view()).unwrap()
                };
                let (plus, minus) = (eval(STEP), eval(-STEP));
                if plus.assignment != base.assignment || minus.assignment != base.assignment {
                    t.skipped += 1;
                    continue;
                }
                t.record(base.grads[[j, k]], (plus.loss - minus.loss) / (2.0 * STEP));
            }
        }
    }
    t
}
