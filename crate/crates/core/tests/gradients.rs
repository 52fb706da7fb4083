mod common;

use clusterbal::tensor::{Matrix, Tape, Var};
use common::{detached_centroid_grad, full_model_fd_error, gaussian_matrix, rel_error, tiny_problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-4;

/// Scalar graph over two leaves; returns the loss node.
type Graph = fn(&mut Tape<f64>, Var, Var, &Matrix<f64>) -> Var;

fn check_op(graph: Graph, a: Matrix<f64>, b: Matrix<f64>, target: &Matrix<f64>) -> f64 {
    let eval = |a: &Matrix<f64>, b: &Matrix<f64>| {
        let mut t = Tape::new();
        let va = t.param(a.clone()).unwrap();
        let vb = t.param(b.clone()).unwrap();
        let l = graph(&mut t, va, vb, target);
        (t, va, vb, l)
    };
    let (mut tape, va, vb, loss) = eval(&a, &b);
    tape.backward(loss).unwrap();
    let grads = [tape.grad(va).unwrap().clone(), tape.grad(vb).unwrap().clone()];
    let mut worst = 0.0f64;
    let mut leaves = [a, b];
    for which in 0..2 {
        for i in 0..leaves[which].len() {
            let orig = leaves[which].data()[i];
            leaves[which].data_mut()[i] = orig + H;
            let (t, _, _, l) = eval(&leaves[0], &leaves[1]);
            let up = t.value(l).item().unwrap();
            leaves[which].data_mut()[i] = orig - H;
            let (t, _, _, l) = eval(&leaves[0], &leaves[1]);
            let down = t.value(l).item().unwrap();
            leaves[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_error(grads[which].data()[i], numeric, FLOOR));
        }
    }
    worst
}

fn probs(t: &mut Tape<f64>, z: Var) -> Var {
    t.softmax_rows(z, 0.5).unwrap()
}

fn reduce(t: &mut Tape<f64>, x: Var, target: &Matrix<f64>) -> Var {
    let n = t.row_l2_normalize(x, false).unwrap();
    let p = probs(t, n);
    t.cross_entropy_rows(target, p).unwrap()
}

fn random_simplex(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let raw = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.01..1.0));
    let sums: Vec<f64> = (0..rows).map(|r| raw.row(r).iter().sum()).collect();
    Matrix::from_fn(rows, cols, |r, c| raw.get(r, c) / sums[r])
}

#[test]
fn every_op_matches_central_differences() {
    let graphs: [(&str, Graph, bool); 7] = [
        ("matmul", |t, a, b, y| { let m = t.matmul(a, b).unwrap(); reduce(t, m, y) }, false),
        ("matmul_t", |t, a, b, y| { let m = t.matmul_t(a, b).unwrap(); reduce(t, m, y) }, true),
        ("add_sub", |t, a, b, y| { let s = t.add(a, b).unwrap(); let d = t.sub(s, b).unwrap(); let m = t.add(d, s).unwrap(); reduce(t, m, y) }, true),
        ("scale_relu", |t, a, b, y| { let s = t.scale(a, 1.7).unwrap(); let r = t.relu(s).unwrap(); let m = t.add(r, b).unwrap(); reduce(t, m, y) }, true),
        ("bias_add", |t, a, b, y| { let m = t.bias_add(a, b).unwrap(); reduce(t, m, y) }, false),
        ("softmax_ce", |t, a, b, y| { let m = t.add(a, b).unwrap(); let p = t.softmax_rows(m, 0.1).unwrap(); t.cross_entropy_rows(y, p).unwrap() }, true),
        ("cosine", |t, a, b, y| { let an = t.row_l2_normalize(a, false).unwrap(); let bn = t.row_l2_normalize(b, false).unwrap(); let z = t.matmul_t(an, bn).unwrap(); let p = probs(t, z); t.cross_entropy_rows(y, p).unwrap() }, false),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, graph, same_shape) in graphs {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (n, k) = (rng.gen_range(1..5), rng.gen_range(2..5));
            let a = gaussian_matrix(n, k, &mut rng);
            let (b, out_cols) = match name {
                "matmul" => { let m = rng.gen_range(2..5); (gaussian_matrix(k, m, &mut rng), m) }
                "bias_add" => (gaussian_matrix(1, k, &mut rng), k),
                "cosine" => { let m = rng.gen_range(2..5); (gaussian_matrix(m, k, &mut rng), m) }
                "matmul_t" => { let m = rng.gen_range(2..5); (gaussian_matrix(m, k, &mut rng), m) }
                _ => { assert!(same_shape); (gaussian_matrix(n, k, &mut rng), k) }
            };
            let y = random_simplex(n, out_cols, &mut rng);
            worst = worst.max(check_op(graph, a, b, &y));
        }
        assert!(worst < 1e-5, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn full_model_gradients_match_central_differences() {
    for seed in 0..3 {
        let p = tiny_problem(seed);
        let worst = full_model_fd_error(&p, H, FLOOR);
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn local_and_predictor_paths_leave_centroids_untouched() {
    for seed in 0..3 {
        let g = detached_centroid_grad(&tiny_problem(seed));
        assert!(g.data().iter().all(|&x| x.to_bits() == 0), "seed {seed}");
    }
}

/// Max relative error between the tape Jacobian of `f` at `x` (one backward
/// pass per output entry) and central differences of its forward value.
fn jacobian_error(f: &dyn Fn(&mut Tape<f64>, Var) -> Var, x: &Matrix<f64>) -> f64 {
    let forward = |x: &Matrix<f64>| {
        let mut t = Tape::new();
        let v = t.param(x.clone()).unwrap();
        let y = f(&mut t, v);
        t.value(y).clone()
    };
    let y0 = forward(x);
    let mut worst = 0.0f64;
    for i in 0..y0.rows() {
        for j in 0..y0.cols() {
            let mut t = Tape::new();
            let v = t.param(x.clone()).unwrap();
            let y = f(&mut t, v);
            let pick_row = t.constant(Matrix::from_fn(1, y0.rows(), |_, c| (c == i) as u8 as f64)).unwrap();
            let pick_col = t.constant(Matrix::from_fn(y0.cols(), 1, |r, _| (r == j) as u8 as f64)).unwrap();
            let row = t.matmul(pick_row, y).unwrap();
            let entry = t.matmul(row, pick_col).unwrap();
            t.backward(entry).unwrap();
            let grad = t.grad(v).unwrap().clone();
            let mut xp = x.clone();
            for e in 0..x.len() {
                let orig = x.data()[e];
                xp.data_mut()[e] = orig + H;
                let up = forward(&xp).get(i, j);
                xp.data_mut()[e] = orig - H;
                let down = forward(&xp).get(i, j);
                xp.data_mut()[e] = orig;
                worst = worst.max(rel_error(grad.data()[e], (up - down) / (2.0 * H), 1e-3));
            }
        }
    }
    worst
}

#[test]
fn tensor_jacobians_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = gaussian_matrix(3, 4, &mut rng);
    let b = gaussian_matrix(4, 2, &mut rng);
    let (ac, bc) = (a.clone(), b.clone());
    let wrt_a = move |t: &mut Tape<f64>, v: Var| {
        let b = t.constant(bc.clone()).unwrap();
        t.matmul(v, b).unwrap()
    };
    let wrt_b = move |t: &mut Tape<f64>, v: Var| {
        let a = t.constant(ac.clone()).unwrap();
        t.matmul(a, v).unwrap()
    };
    assert!(jacobian_error(&wrt_a, &a) < 1e-6);
    assert!(jacobian_error(&wrt_b, &b) < 1e-6);

    let rows = gaussian_matrix(2, 5, &mut rng);
    let normalize = |t: &mut Tape<f64>, v: Var| t.row_l2_normalize(v, false).unwrap();
    assert!(jacobian_error(&normalize, &rows) < 1e-6);

    // keep every input at least 0.1 away from the kink
    let x = Matrix::from_fn(3, 4, |_, _| {
        let m: f64 = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) { m } else { -m }
    });
    let relu = |t: &mut Tape<f64>, v: Var| t.relu(v).unwrap();
    assert!(jacobian_error(&relu, &x) < 1e-6);
}
