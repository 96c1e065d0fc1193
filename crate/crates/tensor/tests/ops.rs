use ncc_tensor::{grad_check, Graph, NodeId, Result, SegmentIndex, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn check(name: &str, point: Tensor<f64>, f: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>) {
    let report = grad_check(f, &point, EPS, TOL).unwrap();
    assert!(report.passed, "{name}: {report:?}");
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::<f32>::new();
    let i = g.constant(Tensor::identity(2)).unwrap();
    let m = g.constant(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap()).unwrap();
    let out = g.matmul(i, m).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn rowwise_max() {
    let mut g = Graph::<f32>::new();
    let m = g.constant(Tensor::from_rows(&[[1.0, 5.0], [4.0, 2.0]]).unwrap()).unwrap();
    let out = g.max_rows(m).unwrap();
    assert_eq!(g.value(out).data(), &[4.0, 5.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::row_vector(&[0.0, 0.0])).unwrap();
    let out = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(out).data(), &[0.5, 0.5]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(2, 3)).unwrap();
    let b = g.constant(Tensor::zeros(2, 3)).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: [2, 3],
            rhs: [2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::scalar(0.0)).unwrap();
    assert_eq!(g.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
}

fn seg_sum(values: &[f64], ids: Vec<usize>, m: usize) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::column(values)).unwrap();
    let s = SegmentIndex::new(ids, m).unwrap();
    let out = g.segment_sum(v, &s).unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn segment_sum_examples() {
    assert_eq!(seg_sum(&[1.0, 2.0, 3.0], vec![0, 0, 1], 2), vec![3.0, 3.0]);
    assert_eq!(seg_sum(&[5.0], vec![0], 1), vec![5.0]);
    assert_eq!(seg_sum(&[1.0, 1.0], vec![1, 1], 2), vec![0.0, 2.0]);
}

#[test]
fn segment_index_out_of_range() {
    assert!(matches!(
        SegmentIndex::new(vec![0, 3], 2),
        Err(TensorError::Index { index: 3, bound: 2, .. })
    ));
}

fn seg_softmax(scores: &[f64], ids: Vec<usize>, m: usize) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::column(scores)).unwrap();
    let s = SegmentIndex::new(ids, m).unwrap();
    let out = g.segment_softmax(v, &s).unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn segment_softmax_examples() {
    assert_eq!(seg_softmax(&[1.0, 1.0, 2.0], vec![0, 0, 1], 2), vec![0.5, 0.5, 1.0]);
    let p = seg_softmax(&[2f64.ln(), 0.0], vec![0, 0], 1);
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(seg_softmax(&[1000.0, 1000.0], vec![0, 0], 1), vec![0.5, 0.5]);
    // segment 1 is empty
    assert_eq!(seg_softmax(&[3.0], vec![0], 2), vec![1.0]);
}

#[test]
fn backward_of_square() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(1, 2)).unwrap();
    assert_eq!(
        g.backward(x).unwrap_err(),
        TensorError::NonScalarLoss { shape: [1, 2] }
    );
}

#[test]
fn segment_sum_routes_ones_back() {
    let mut g = Graph::<f64>::new();
    let x = g.input(random(4, 3, 1)).unwrap();
    let seg = SegmentIndex::new(vec![1, 0, 1, 1], 3).unwrap();
    let s = g.segment_sum(x, &seg).unwrap();
    let l = g.sum(s).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    check("segment_sum", random(4, 3, 1), |g, x| {
        let s = g.segment_sum(x, &seg)?;
        let sq = g.mul(s, s)?;
        g.sum(sq)
    });
}

#[test]
fn gradcheck_elementwise() {
    check("sigmoid", random(2, 3, 2), |g, x| {
        let y = g.sigmoid(x)?;
        g.sum(y)
    });
    check("tanh", random(2, 3, 3), |g, x| {
        let y = g.tanh(x)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    check("relu", random(3, 3, 4), |g, x| {
        let y = g.relu(x)?;
        let y = g.mul(y, x)?;
        g.sum(y)
    });
    check("exp_log", random(2, 2, 5), |g, x| {
        let e = g.exp(x)?;
        let l = g.log(e)?;
        let s = g.scale(l, 0.5)?;
        let y = g.mul(s, e)?;
        g.sum(y)
    });
    check("add_sub", random(2, 2, 6), |g, x| {
        let c = g.constant(random(2, 2, 60))?;
        let a = g.add(x, c)?;
        let b = g.sub(a, x)?;
        let b2 = g.sub(c, x)?;
        let y = g.mul(b, b2)?;
        let y = g.mul(y, x)?;
        g.sum(y)
    });
}

#[test]
fn gradcheck_matmul_and_broadcasts() {
    let w = random(3, 4, 7);
    check("matmul_left", random(2, 3, 8), |g, x| {
        let w = g.constant(w.clone())?;
        let y = g.matmul(x, w)?;
        let y = g.tanh(y)?;
        g.sum(y)
    });
    let a = random(2, 3, 9);
    check("matmul_right", random(3, 4, 10), |g, x| {
        let a = g.constant(a.clone())?;
        let y = g.matmul(a, x)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    check("transpose", random(2, 3, 11), |g, x| {
        let t = g.transpose(x)?;
        let y = g.matmul(x, t)?;
        let y = g.sigmoid(y)?;
        g.sum(y)
    });
    let m = random(3, 4, 12);
    check("add_row", random(1, 4, 13), |g, r| {
        let m = g.constant(m.clone())?;
        let y = g.add_row(m, r)?;
        let y = g.tanh(y)?;
        g.sum(y)
    });
    check("add_row_lhs", random(3, 4, 14), |g, x| {
        let r = g.constant(random(1, 4, 15))?;
        let y = g.add_row(x, r)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    check("mul_col", random(3, 1, 16), |g, c| {
        let m = g.constant(m.clone())?;
        let y = g.mul_col(m, c)?;
        let y = g.tanh(y)?;
        g.sum(y)
    });
    check("mul_col_lhs", random(3, 4, 17), |g, x| {
        let c = g.constant(random(3, 1, 18))?;
        let y = g.mul_col(x, c)?;
        let y = g.mul(y, x)?;
        g.sum(y)
    });
    check("row_sum", random(3, 4, 19), |g, x| {
        let s = g.row_sum(x)?;
        let s = g.mul(s, s)?;
        g.mean(s)
    });
}

#[test]
fn gradcheck_structural() {
    check("concat_slice", random(2, 3, 20), |g, x| {
        let c = g.constant(random(2, 2, 21))?;
        let cat = g.concat_cols(&[x, c, x])?;
        let s = g.slice_cols(cat, 2, 5)?;
        let s = g.tanh(s)?;
        g.sum(s)
    });
    check("concat_rows", random(2, 3, 22), |g, x| {
        let c = g.constant(random(1, 3, 23))?;
        let cat = g.concat_rows(&[c, x, x])?;
        let y = g.sigmoid(cat)?;
        let y = g.mul(y, cat)?;
        g.sum(y)
    });
    check("gather", random(4, 3, 24), |g, x| {
        let rows = g.gather_rows(x, &[3, 0, 3, 1])?;
        let y = g.tanh(rows)?;
        g.sum(y)
    });
    check("embedding_gather_sum", random(5, 2, 25), |g, x| {
        let rows = g.gather_rows(x, &[1, 1, 4])?;
        g.sum(rows)
    });
    check("select_rows", random(3, 2, 26), |g, x| {
        let other = g.tanh(x)?;
        let y = g.select_rows(&[true, false, true], x, other)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    check("layer_norm", random(3, 5, 27), |g, x| {
        let gain = g.constant(random(1, 5, 28))?;
        let bias = g.constant(random(1, 5, 29))?;
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        let w = g.constant(random(3, 5, 30))?;
        let y = g.mul(y, w)?;
        g.sum(y)
    });
    check("layer_norm_gain", random(1, 5, 31), |g, gain| {
        let x = g.constant(random(3, 5, 32))?;
        let bias = g.input(random(1, 5, 33))?;
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        let y = g.tanh(y)?;
        g.sum(y)
    });
}

#[test]
fn gradcheck_pooling_and_conv() {
    check("segment_max", random(5, 3, 40), |g, x| {
        let seg = SegmentIndex::new(vec![0, 1, 0, 1, 0], 2).unwrap();
        let m = g.segment_max(x, &seg)?;
        let m = g.mul(m, m)?;
        g.sum(m)
    });
    check("mean_rows", random(4, 3, 41), |g, x| {
        let m = g.mean_rows(x)?;
        let m = g.tanh(m)?;
        g.sum(m)
    });
    let kernel = random(3 * 2, 4, 42);
    check("conv1d_maxpool", random(6, 2, 43), |g, x| {
        let k = g.constant(kernel.clone())?;
        let u = g.unfold(x, 3)?;
        let c = g.matmul(u, k)?;
        let c = g.relu(c)?;
        let p = g.max_rows(c)?;
        g.sum(p)
    });
    check("conv1d_kernel", kernel.clone(), |g, k| {
        let x = g.constant(random(6, 2, 44))?;
        let u = g.unfold(x, 3)?;
        let c = g.matmul(u, k)?;
        let c = g.tanh(c)?;
        let p = g.max_rows(c)?;
        g.sum(p)
    });
}

#[test]
fn gradcheck_softmaxes() {
    check("softmax_rows", random(2, 4, 50), |g, x| {
        let p = g.softmax_rows(x)?;
        let w = g.constant(random(2, 4, 51))?;
        let y = g.mul(p, w)?;
        g.sum(y)
    });
    let seg = SegmentIndex::new(vec![0, 0, 2, 2, 2, 0], 3).unwrap();
    check("segment_softmax", random(6, 1, 52), |g, x| {
        let p = g.segment_softmax(x, &seg)?;
        let w = g.constant(random(6, 1, 53))?;
        let y = g.mul(p, w)?;
        g.sum(y)
    });
    check("segment_log_softmax", random(6, 1, 54), |g, x| {
        let p = g.segment_log_softmax(x, &seg)?;
        let picked = g.gather_rows(p, &[1, 3])?;
        g.sum(picked)
    });
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(8, 6, 70).cast()).unwrap();
        let w = g.constant(random(6, 5, 71).cast()).unwrap();
        let y = g.matmul(x, w).unwrap();
        let y = g.tanh(y).unwrap();
        let seg = SegmentIndex::new(vec![0, 1, 2, 0, 1, 2, 0, 1], 3).unwrap();
        let y = g.segment_sum(y, &seg).unwrap();
        g.value(y).data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

fn arb_segments() -> impl Strategy<Value = (Vec<f32>, Vec<usize>, usize, usize)> {
    (1usize..6, 1usize..4, 1usize..20).prop_flat_map(|(m, k, n)| {
        (
            prop::collection::vec(-10.0f32..10.0, n * k),
            prop::collection::vec(0..m, n),
            Just(m),
            Just(k),
        )
    })
}

proptest! {
    #[test]
    fn segment_sum_matches_naive_loop((values, ids, m, k) in arb_segments()) {
        let n = ids.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(n, k, values.clone()).unwrap()).unwrap();
        let seg = SegmentIndex::new(ids.clone(), m).unwrap();
        let out = g.segment_sum(x, &seg).unwrap();
        let mut naive = vec![0.0f32; m * k];
        for seg_id in 0..m {
            for r in 0..n {
                if ids[r] == seg_id {
                    for c in 0..k {
                        naive[seg_id * k + c] += values[r * k + c];
                    }
                }
            }
        }
        prop_assert_eq!(g.value(out).data(), &naive[..]);
    }

    #[test]
    fn segment_softmax_sums_to_one((values, ids, m, _k) in arb_segments()) {
        let n = ids.len();
        let scores: Vec<f64> = values.iter().take(n).map(|&v| v as f64 * 30.0).collect();
        let p = seg_softmax(&scores, ids.clone(), m);
        for s in 0..m {
            let members: Vec<usize> = (0..n).filter(|&r| ids[r] == s).collect();
            if !members.is_empty() {
                let total: f64 = members.iter().map(|&r| p[r]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}
