mod common;

use common::{normals, rng};
use proptest::prelude::*;
use trimodal_core::tensor::gradcheck;
use trimodal_core::{Axis, Graph, Tensor, Var};

type Build = fn(&mut Graph, &[Var]) -> Var;

/// Reduces `y` to a scalar through fixed random weights so every output
/// entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let n = shape.iter().product();
    let w = Tensor::new(shape, normals(n, &mut rng(seed))).unwrap();
    let w = g.constant(w);
    let prod = g.mul(y, w).unwrap();
    g.sum(prod).unwrap()
}

fn check(name: &str, shapes: &[[usize; 2]], positive: bool, build: Build) {
    check_scaled(name, shapes, positive, 1.0, build);
}

fn check_scaled(name: &str, shapes: &[[usize; 2]], positive: bool, std: f64, build: Build) {
    let mut r = rng(name.len() as u64);
    for trial in 0..100 {
        let mut g = Graph::new();
        let leaves: Vec<Var> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut data: Vec<f64> = normals(s[0] * s[1], &mut r).iter().map(|v| v * std).collect();
                if positive {
                    data.iter_mut().for_each(|v| *v = v.abs() + 0.5);
                }
                g.param(&format!("x{i}"), Tensor::matrix(s[0], s[1], data).unwrap())
            })
            .collect();
        let y = build(&mut g, &leaves);
        let out = if g.value(y).len() == 1 { y } else { weighted_sum(&mut g, y, trial) };
        let report = gradcheck(&mut g, out, &leaves, 1e-6, 1e-6).unwrap();
        assert!(
            report.passed(),
            "{name} trial {trial}: max rel err {}",
            report.max_rel_err()
        );
    }
}

#[test]
fn matmul_gradients() {
    check("matmul", &[[3, 4], [4, 2]], false, |g, x| g.matmul(x[0], x[1]).unwrap());
}

#[test]
fn transpose_gradients() {
    check("transpose", &[[3, 2]], false, |g, x| g.transpose(x[0]).unwrap());
}

#[test]
fn add_sub_mul_with_broadcasting() {
    check("add", &[[3, 4], [1, 4]], false, |g, x| g.add(x[0], x[1]).unwrap());
    check("sub", &[[3, 4], [3, 1]], false, |g, x| g.sub(x[0], x[1]).unwrap());
    check("mul", &[[3, 4], [3, 4]], false, |g, x| g.mul(x[0], x[1]).unwrap());
    check("mul_scalar", &[[3, 4], [1, 1]], false, |g, x| g.mul(x[0], x[1]).unwrap());
}

#[test]
fn elementwise_gradients() {
    check("exp", &[[2, 3]], false, |g, x| g.exp(x[0]).unwrap());
    check("log", &[[2, 3]], true, |g, x| g.log(x[0]).unwrap());
    check("tanh", &[[2, 3]], false, |g, x| g.tanh(x[0]).unwrap());
    check("sigmoid", &[[2, 3]], false, |g, x| g.sigmoid(x[0]).unwrap());
    check("square", &[[2, 3]], false, |g, x| g.square(x[0]).unwrap());
    check("scale", &[[2, 3]], false, |g, x| g.scale(x[0], -1.7).unwrap());
    check("neg", &[[2, 3]], false, |g, x| g.neg(x[0]).unwrap());
}

#[test]
fn row_reductions() {
    check("softmax", &[[3, 5]], false, |g, x| g.softmax(x[0]).unwrap());
    check("logsumexp", &[[3, 5]], false, |g, x| g.logsumexp(x[0]).unwrap());
    check("layer_norm", &[[3, 5]], false, |g, x| g.layer_norm(x[0], 1e-5).unwrap());
    check("sum_cols", &[[3, 5]], false, |g, x| g.sum_cols(x[0]).unwrap());
    check("sum", &[[3, 5]], false, |g, x| g.sum(x[0]).unwrap());
    check("mean", &[[3, 5]], false, |g, x| g.mean(x[0]).unwrap());
}

#[test]
fn concat_and_slice() {
    check("concat_rows", &[[2, 3], [1, 3]], false, |g, x| {
        g.concat(&[x[0], x[1]], Axis::Rows).unwrap()
    });
    check("concat_cols", &[[2, 3], [2, 2]], false, |g, x| {
        g.concat(&[x[0], x[1]], Axis::Cols).unwrap()
    });
    check("slice", &[[4, 5]], false, |g, x| {
        let a = g.slice(x[0], Axis::Cols, 1, 4).unwrap();
        g.slice(a, Axis::Rows, 1, 3).unwrap()
    });
}

#[test]
fn composite_exp_tanh_dot() {
    // std 0.4 keeps w.x out of tanh saturation, where the gradient is
    // below the finite-difference roundoff floor
    check_scaled("composite", &[[1, 6], [6, 1]], false, 0.4, |g, x| {
        let d = g.matmul(x[0], x[1]).unwrap();
        let t = g.tanh(d).unwrap();
        g.exp(t).unwrap()
    });
}

#[test]
fn composite_matches_hand_derivative() {
    // d/dw exp(tanh(w.x)) = exp(t) (1 - t^2) x
    let w = [0.3, -0.2, 0.5];
    let x = [1.0, 2.0, -1.5];
    let mut g = Graph::new();
    let wv = g.param("w", Tensor::row(&w));
    let xv = g.constant(Tensor::matrix(3, 1, x.to_vec()).unwrap());
    let d = g.matmul(wv, xv).unwrap();
    let t = g.tanh(d).unwrap();
    let y = g.exp(t).unwrap();
    let grad = &g.gradient(y, &[wv]).unwrap()[0];
    let dot: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
    let tv = dot.tanh();
    for (gi, xi) in grad.data().iter().zip(&x) {
        assert!((gi - tv.exp() * (1.0 - tv * tv) * xi).abs() < 1e-14);
    }
}

fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(n in 1usize..5, k in 1usize..5, m in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = normals(n * k, &mut r);
        let b = normals(k * m, &mut r);
        let mut g = Graph::new();
        let av = g.constant(Tensor::matrix(n, k, a.clone()).unwrap());
        let bv = g.constant(Tensor::matrix(k, m, b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        let want = naive_matmul(&a, &b, n, k, m);
        for (x, y) in g.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&vals));
        let s = g.softmax(x).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_bounds(vals in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&vals));
        let lv = g.logsumexp(x).unwrap();
        let l = g.value(lv).data()[0];
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(l >= max - 1e-12);
        prop_assert!(l <= max + (vals.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn mean_of_constant_is_exact(v in -1e6f64..1e6, n in 1usize..80) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, n], v));
        let m = g.mean(x).unwrap();
        prop_assert_eq!(g.value(m).data()[0], v);
    }
}
