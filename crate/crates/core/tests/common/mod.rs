#![allow(dead_code)]

pub mod brute;

use clusterbal::balancer::{Balancer, BalancerConfig, RelativeSizes};
use clusterbal::model::{ModelConfig, Network};
use clusterbal::objective::{multiview_loss, student_probabilities, teacher_targets};
use clusterbal::tensor::{Matrix, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct TinyProblem {
    pub net: Network<f64>,
    pub globals: Vec<Matrix<f64>>,
    pub locals: Vec<Matrix<f64>>,
    pub targets: Vec<Matrix<f64>>,
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// D=8, K=8, N=4, G=2, L=2 with targets from the teacher copy balanced
/// against a non-uniform size estimate.
pub fn tiny_problem(seed: u64) -> TinyProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        encoder_hidden: vec![8],
        embedding_dim: 8,
        head_hidden: 8,
        head_out: 8,
        clusters: 8,
    };
    // redraw until no relu layer zeroes a whole row (normalization would be undefined)
    let (net, globals, locals) = loop {
        let net = Network::<f64>::student(&config, 8, &mut rng).unwrap();
        let globals: Vec<_> = (0..2).map(|_| gaussian_matrix(4, 8, &mut rng)).collect();
        let locals: Vec<_> = (0..2).map(|_| gaussian_matrix(4, 8, &mut rng)).collect();
        if globals.iter().chain(&locals).all(|x| forward_ok(&net, x)) {
            break (net, globals, locals);
        }
    };
    let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let sizes = RelativeSizes::from_shares(raw.iter().map(|r| r / total).collect(), 0.999).unwrap();
    let mut balancer = Balancer::from_parts(BalancerConfig::default(), sizes).unwrap();
    let z_t = net.teacher_copy().teacher_similarities(&globals).unwrap();
    let targets = teacher_targets(&z_t, &mut balancer, 0.04)
        .unwrap()
        .into_iter()
        .map(|t| t.p)
        .collect();
    TinyProblem {
        net,
        globals,
        locals,
        targets,
    }
}

fn forward_ok(net: &Network<f64>, x: &Matrix<f64>) -> bool {
    let h = net.embed(x).unwrap();
    let g = net.predictor.as_ref().unwrap().forward(&h).unwrap();
    h.row_norms().iter().chain(g.row_norms().iter()).all(|&n| n > 1e-3)
}

/// Full multi-view loss and the gradient of every student parameter.
pub fn loss_and_grads(p: &TinyProblem, net: &Network<f64>) -> (f64, Vec<Matrix<f64>>) {
    let mut tape = Tape::new();
    let pass = net.student_similarities(&mut tape, &p.globals, &p.locals).unwrap();
    let p_h: Vec<_> = pass
        .z_h
        .iter()
        .map(|&z| student_probabilities(&mut tape, z, 0.1).unwrap())
        .collect();
    let p_g: Vec<_> = pass
        .z_g
        .iter()
        .map(|&z| student_probabilities(&mut tape, z, 0.1).unwrap())
        .collect();
    let loss = multiview_loss(&mut tape, &p.targets, &p_h, &p_g).unwrap();
    tape.backward(loss).unwrap();
    let value = tape.value(loss).item().unwrap();
    let grads = pass
        .params
        .iter()
        .map(|&v| tape.grad(v).unwrap().clone())
        .collect();
    (value, grads)
}

/// Relative error with a magnitude floor so near-zero entries compare
/// absolutely.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Loss recomputed with plain matrix code. `frozen` stands in for the
/// centroids on every detached path (local-view projector, all predictor
/// paths), so its value is constant under perturbation of `net.centroids`.
pub fn surrogate_loss(p: &TinyProblem, net: &Network<f64>, frozen: &Matrix<f64>) -> f64 {
    let live = net.centroids.row_l2_normalize().unwrap();
    let fixed = frozen.row_l2_normalize().unwrap();
    let g = p.globals.len();
    let views: Vec<&Matrix<f64>> = p.globals.iter().chain(&p.locals).collect();
    let v = views.len();
    let mut p_h = Vec::new();
    let mut p_g = Vec::new();
    for (i, x) in views.iter().enumerate() {
        let h = net.embed(x).unwrap();
        let c = if i < g { &live } else { &fixed };
        let zh = h.row_l2_normalize().unwrap().matmul_t(c).unwrap();
        p_h.push(zh.softmax_rows(0.1).unwrap());
        let q = net.predictor.as_ref().unwrap().forward(&h).unwrap();
        let zg = q.row_l2_normalize().unwrap().matmul_t(&fixed).unwrap();
        p_g.push(zg.softmax_rows(0.1).unwrap());
    }
    let ce = |t: &Matrix<f64>, q: &Matrix<f64>| {
        let mut total = 0.0;
        for r in 0..t.rows() {
            for k in 0..t.cols() {
                total -= t.get(r, k) * q.get(r, k).max(1e-12).ln();
            }
        }
        total / t.rows() as f64
    };
    let (mut lh, mut lg) = (0.0, 0.0);
    for a in 0..g {
        for b in 0..v {
            if a != b {
                lh += ce(&p.targets[a], &p_h[b]);
            }
            lg += ce(&p.targets[a], &p_g[b]);
        }
    }
    let g = g as f64;
    let v = v as f64;
    0.5 * lh / (g * (v - 1.0)) + 0.5 * lg / (g * v)
}

/// Largest relative error between analytic gradients and central
/// differences of the surrogate loss over every scalar parameter.
pub fn full_model_fd_error(p: &TinyProblem, h: f64, floor: f64) -> f64 {
    let (value, grads) = loss_and_grads(p, &p.net);
    let frozen = p.net.centroids.clone();
    assert!((value - surrogate_loss(p, &p.net, &frozen)).abs() < 1e-12);
    let mut net = p.net.clone();
    let mut worst = 0.0f64;
    let counts: Vec<usize> = net.params().iter().map(|m| m.len()).collect();
    for (pi, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let orig = net.params()[pi].data()[i];
            net.params_mut()[pi].data_mut()[i] = orig + h;
            let up = surrogate_loss(p, &net, &frozen);
            net.params_mut()[pi].data_mut()[i] = orig - h;
            let down = surrogate_loss(p, &net, &frozen);
            net.params_mut()[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_error(grads[pi].data()[i], numeric, floor));
        }
    }
    worst
}

/// Centroid gradient when the loss only sees local-view projector paths and
/// predictor paths. Must be exactly zero.
pub fn detached_centroid_grad(p: &TinyProblem) -> Matrix<f64> {
    let mut tape = Tape::new();
    let pass = p
        .net
        .student_similarities(&mut tape, &p.globals, &p.locals)
        .unwrap();
    let g = p.globals.len();
    let mut terms = Vec::new();
    for &z in pass.z_h[g..].iter().chain(pass.z_g.iter()) {
        let prob = student_probabilities(&mut tape, z, 0.1).unwrap();
        terms.push(tape.cross_entropy_rows(&p.targets[0], prob).unwrap());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t).unwrap();
    }
    tape.backward(total).unwrap();
    tape.grad(*pass.params.last().unwrap()).unwrap().clone()
}
