use hiconcept_tensor::check::check_gradient;
use hiconcept_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduce an arbitrary node to a scalar through fixed random weights so
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let w = rand_tensor(g.shape(v), seed ^ 0xabcd);
    let m = g.mul_const(v, w);
    g.sum(m)
}

fn assert_grad(x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let r = check_gradient(x, STEP, None, f);
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn elementwise_ops() {
    let x = rand_tensor(&[3, 4], 1);
    let other = rand_tensor(&[3, 4], 2);
    assert_grad(&x, |g, v| {
        let o = g.constant(other.clone());
        let a = g.mul(v, o);
        let b = g.sub(a, v);
        let c = g.add(b, o);
        let d = g.scale(c, 1.5);
        let e = g.square(d);
        weighted_sum(g, e, 3)
    });
    assert_grad(&x, |g, v| {
        let s = g.sigmoid(v);
        let a = g.abs(v);
        let m = g.mul(s, a);
        weighted_sum(g, m, 4)
    });
}

#[test]
fn matmul_all_transpose_flags() {
    let a = rand_tensor(&[3, 4], 5);
    let b = rand_tensor(&[4, 5], 6);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_st = if ta { a.t() } else { a.clone() };
        let b_st = if tb { b.t() } else { b.clone() };
        assert_grad(&a_st, |g, v| {
            let bv = g.constant(b_st.clone());
            let y = g.matmul_t(v, bv, ta, tb);
            weighted_sum(g, y, 7)
        });
        assert_grad(&b_st, |g, v| {
            let av = g.constant(a_st.clone());
            let y = g.matmul_t(av, v, ta, tb);
            weighted_sum(g, y, 8)
        });
    }
}

#[test]
fn batched_matmul() {
    let a = rand_tensor(&[2, 3, 4], 9);
    let b = rand_tensor(&[2, 5, 4], 10);
    assert_grad(&a, |g, v| {
        let bv = g.constant(b.clone());
        let y = g.matmul_t(v, bv, false, true);
        weighted_sum(g, y, 11)
    });
    assert_grad(&b, |g, v| {
        let av = g.constant(a.clone());
        let y = g.matmul_t(av, v, false, true);
        weighted_sum(g, y, 12)
    });
}

#[test]
fn linear_and_bias() {
    let x = rand_tensor(&[2, 3, 4], 13);
    let w = rand_tensor(&[4, 2], 14);
    let b = rand_tensor(&[2], 15);
    assert_grad(&w, |g, v| {
        let xv = g.constant(x.clone());
        let bv = g.constant(b.clone());
        let y = g.linear(xv, v, bv);
        weighted_sum(g, y, 16)
    });
    assert_grad(&b, |g, v| {
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.linear(xv, wv, v);
        weighted_sum(g, y, 17)
    });
}

#[test]
fn softmax_and_log() {
    let x = rand_tensor(&[4, 3], 18);
    assert_grad(&x, |g, v| {
        let p = g.softmax(v);
        let l = g.clamp_log(p, 1e-12);
        weighted_sum(g, l, 19)
    });
    assert_grad(&x, |g, v| {
        let p = g.sigmoid_pair(v);
        let l = g.clamp_log(p, 1e-12);
        weighted_sum(g, l, 20)
    });
}

#[test]
fn layer_norm_all_inputs() {
    let x = rand_tensor(&[3, 6], 21);
    let gamma = rand_tensor(&[6], 22);
    let beta = rand_tensor(&[6], 23);
    assert_grad(&x, |g, v| {
        let ga = g.constant(gamma.clone());
        let be = g.constant(beta.clone());
        let y = g.layer_norm(v, ga, be);
        weighted_sum(g, y, 24)
    });
    assert_grad(&gamma, |g, v| {
        let xv = g.constant(x.clone());
        let be = g.constant(beta.clone());
        let y = g.layer_norm(xv, v, be);
        weighted_sum(g, y, 25)
    });
}

#[test]
fn normalize_threshold_relu() {
    let x = rand_tensor(&[5, 4], 26);
    assert_grad(&x, |g, v| {
        let n = g.l2_normalize(v);
        weighted_sum(g, n, 27)
    });
    // Keep coordinates well away from the kinks.
    let y = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let y = y.map(|v| if (v - 0.1).abs() < 0.02 { v + 0.05 } else { v });
    assert_grad(&y, |g, v| {
        let t = g.threshold(v, 0.1);
        let r = g.relu(v);
        let s = g.add(t, r);
        weighted_sum(g, s, 28)
    });
}

#[test]
fn zero_row_normalizes_to_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
    let n = g.l2_normalize(x);
    assert_eq!(g.value(n).data(), &[0.0, 0.0, 0.6, 0.8]);
    let s = g.sum(n);
    let grads = g.backward(s);
    let gx = grads.get(x).unwrap();
    assert_eq!(&gx.data()[..2], &[0.0, 0.0]);
}

#[test]
fn shape_ops() {
    let x = rand_tensor(&[2, 3, 4], 29);
    assert_grad(&x, |g, v| {
        let p = g.permute(v, &[2, 0, 1]);
        let r = g.reshape(p, &[4, 6]);
        let t = g.tile_rows(r, 3);
        weighted_sum(g, t, 30)
    });
    let mask = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    assert_grad(&x, |g, v| {
        let p = g.masked_mean_pool(v, &mask);
        weighted_sum(g, p, 31)
    });
}

#[test]
fn embedding_scatter() {
    let table = rand_tensor(&[5, 3], 32);
    assert_grad(&table, |g, v| {
        let e = g.embedding(v, &[1, 3, 1, 0]);
        weighted_sum(g, e, 33)
    });
}

#[test]
fn conv_and_pool() {
    let x = rand_tensor(&[2, 6, 6, 2], 34);
    let w = rand_tensor(&[3 * 3 * 2, 3], 35);
    let b = rand_tensor(&[3], 36);
    for padding in [0, 1] {
        assert_grad(&x, |g, v| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(v, wv, bv, 3, padding);
            weighted_sum(g, y, 37)
        });
        assert_grad(&w, |g, v| {
            let xv = g.constant(x.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(xv, v, bv, 3, padding);
            let p = g.max_pool2(y);
            weighted_sum(g, p, 38)
        });
    }
}

#[test]
fn conv_matches_direct_loop() {
    let x = rand_tensor(&[1, 5, 5, 2], 40);
    let w = rand_tensor(&[3 * 3 * 2, 2], 41);
    let b = rand_tensor(&[2], 42);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, 3, 0);
    let y = g.value(y);
    assert_eq!(y.shape(), &[1, 3, 3, 2]);
    for oy in 0..3 {
        for ox in 0..3 {
            for o in 0..2 {
                let mut s = b.data()[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        for c in 0..2 {
                            s += x.at(&[0, oy + ky, ox + kx, c]) * w.at(&[(ky * 3 + kx) * 2 + c, o]);
                        }
                    }
                }
                assert!((y.at(&[0, oy, ox, o]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shared_node_accumulates() {
    let x = rand_tensor(&[3], 43);
    assert_grad(&x, |g, v| {
        let a = g.mul(v, v);
        let b = g.add(a, v);
        let c = g.mul(b, a);
        g.sum(c)
    });
}
