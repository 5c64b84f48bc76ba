//! Finite-difference checks of every backward rule on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{gelu, sigmoid, Graph, RowSpan, SeqLayout, Var};
use super::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0))
}

/// Compares tape gradients of `sum(w * f(inputs))` with central differences.
fn check(inputs: Vec<Tensor>, tol: f32, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |ins: &[Tensor], weights: Option<&Tensor>| -> (f64, Option<Vec<Tensor>>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let shape = g.value(out).shape();
        let w = weights
            .cloned()
            .unwrap_or_else(|| Tensor::full(shape.0, shape.1, 1.0));
        let weighted = g.mul_const(out, w.clone());
        let loss = g.sum_all(weighted);
        let val = g.value(loss).item() as f64;
        let grads = g.backward(&[(loss, 1.0)]);
        let gs = vars
            .iter()
            .map(|&v| {
                grads.wrt(v).cloned().unwrap_or_else(|| {
                    let (r, c) = g.value(v).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect();
        (val, Some(gs), w)
    };
    let (_, _, w0) = eval(&inputs, None);
    let weights = rand_tensor(&mut rng, w0.rows(), w0.cols());
    let (_, analytic, _) = eval(&inputs, Some(&weights));
    let analytic = analytic.unwrap();
    let h = 1e-2f32;
    for (i, inp) in inputs.iter().enumerate() {
        for k in 0..inp.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= h;
            let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h as f64);
            let an = analytic[i].data()[k] as f64;
            let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
            assert!(
                err < tol as f64,
                "input {i} elem {k}: analytic {an} vs numeric {fd}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_and_bias() {
    let mut r = rng();
    check(
        vec![rand_tensor(&mut r, 3, 4), rand_tensor(&mut r, 4, 2), rand_tensor(&mut r, 1, 2)],
        2e-3,
        |g, v| {
            let y = g.matmul(v[0], v[1]);
            g.add_row(y, v[2])
        },
    );
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    check(
        vec![rand_tensor(&mut r, 3, 3), rand_tensor(&mut r, 3, 3)],
        2e-3,
        |g, v| {
            let a = g.gelu(v[0]);
            let b = g.tanh(v[1]);
            let c = g.mul(a, b);
            let d = g.sigmoid(c);
            let e = g.sub(d, v[0]);
            let f = g.scale(e, 1.5);
            g.add(f, v[1])
        },
    );
}

#[test]
fn layer_norm_backward() {
    let mut r = rng();
    check(
        vec![rand_tensor(&mut r, 4, 5), rand_tensor(&mut r, 1, 5), rand_tensor(&mut r, 1, 5)],
        5e-3,
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn group_norm_backward_with_padding() {
    let mut r = rng();
    let layout = SeqLayout {
        batch: 2,
        time: 4,
        lens: vec![4, 3],
    };
    check(
        vec![rand_tensor(&mut r, 8, 4), rand_tensor(&mut r, 1, 4), rand_tensor(&mut r, 1, 4)],
        5e-3,
        move |g, v| {
            let y = g.group_norm(v[0], v[1], v[2], &layout, 2);
            // drop padded rows from the objective, as the losses do
            g.gather(y, vec![0, 1, 2, 3, 4, 5, 6])
        },
    );
}

#[test]
fn im2col_gather_concat_slice() {
    let mut r = rng();
    let layout = SeqLayout {
        batch: 2,
        time: 3,
        lens: vec![3, 2],
    };
    check(vec![rand_tensor(&mut r, 6, 2)], 2e-3, move |g, v| {
        let c = g.im2col(v[0], &layout, 3);
        let s = g.slice_cols(c, 1, 5);
        let gt = g.gather(s, vec![0, 0, 2, 4, 5]);
        let gt2 = g.gather(v[0], vec![1, 1, 3, 2, 0]);
        g.concat_cols(&[gt, gt2])
    });
}

#[test]
fn lstm_backward_both_directions() {
    for reverse in [false, true] {
        let mut r = rng();
        let layout = SeqLayout {
            batch: 2,
            time: 4,
            lens: vec![4, 2],
        };
        let h = 3;
        check(
            vec![rand_tensor(&mut r, 8, 4 * h), rand_tensor(&mut r, h, 4 * h)],
            5e-3,
            move |g, v| g.lstm(v[0], v[1], &layout, reverse),
        );
    }
}

#[test]
fn lstm_forward_matches_naive_recurrence() {
    let mut r = rng();
    let h = 2;
    let t = 5;
    let xp = rand_tensor(&mut r, t, 4 * h);
    let whh = rand_tensor(&mut r, h, 4 * h);
    let mut g = Graph::new();
    let xv = g.constant(xp.clone());
    let wv = g.constant(whh.clone());
    let out = g.lstm(xv, wv, &SeqLayout::single(t), true);
    let got = g.value(out).clone();

    let mut hs = vec![0.0f32; h];
    let mut cs = vec![0.0f32; h];
    for step in (0..t).rev() {
        let mut pre = xp.row(step).to_vec();
        for (j, p) in pre.iter_mut().enumerate() {
            *p += (0..h).map(|k| hs[k] * whh.get(k, j)).sum::<f32>();
        }
        for j in 0..h {
            let i = sigmoid(pre[j]);
            let f = sigmoid(pre[h + j]);
            let gg = pre[2 * h + j].tanh();
            let o = sigmoid(pre[3 * h + j]);
            cs[j] = f * cs[j] + i * gg;
            hs[j] = o * cs[j].tanh();
            assert!((got.get(step, j) - hs[j]).abs() < 1e-6);
        }
    }
}

#[test]
fn lstm_padding_matches_unbatched() {
    let mut r = rng();
    let h = 2;
    let xp = rand_tensor(&mut r, 10, 4 * h);
    let whh = rand_tensor(&mut r, h, 4 * h);
    let layout = SeqLayout {
        batch: 2,
        time: 5,
        lens: vec![5, 3],
    };
    let mut g = Graph::new();
    let xv = g.constant(xp.clone());
    let wv = g.constant(whh.clone());
    let batched = g.lstm(xv, wv, &layout, true);
    let second = g.constant(xp.slice_rows(5, 8));
    let single = g.lstm(second, wv, &SeqLayout::single(3), true);
    for t in 0..3 {
        assert_eq!(g.value(batched).row(5 + t), g.value(single).row(t));
    }
    assert!(g.value(batched).row(8).iter().all(|&v| v == 0.0));
}

#[test]
fn loss_ops_backward() {
    let mut r = rng();
    let target = rand_tensor(&mut r, 3, 4);
    check(vec![rand_tensor(&mut r, 3, 4)], 2e-3, move |g, v| {
        g.masked_mse(v[0], target.clone(), vec![0.5, 0.0, 0.25])
    });
    let spans = vec![
        RowSpan { start: 0, end: 2, weight: 0.5 },
        RowSpan { start: 1, end: 4, weight: 1.0 },
        RowSpan { start: 3, end: 4, weight: 0.0 },
    ];
    check(
        vec![rand_tensor(&mut r, 3, 4), rand_tensor(&mut r, 3, 4)],
        2e-3,
        move |g, v| g.slice_l1(v[0], v[1], spans.clone()),
    );
    check(vec![rand_tensor(&mut r, 3, 4)], 2e-3, |g, v| g.softmax_ce(v[0], vec![1, 3, 0]));
}

#[test]
fn gelu_reference_values() {
    // Phi(1) = 0.841344746
    assert!((gelu(1.0) - 0.841_344_7).abs() < 1e-6);
    assert_eq!(gelu(0.0), 0.0);
}
