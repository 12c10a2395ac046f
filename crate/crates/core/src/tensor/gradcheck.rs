//! Central-difference checks for every differentiable op on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Reduces `x` to a scalar as `Σ x ⊙ r` for a fixed random `r`.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let (rows, cols) = g.value(x).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(Matrix::uniform(rows, cols, 1.0, &mut rng));
    let prod = g.mul(x, r);
    let left = g.input(Matrix::filled(1, rows, 1.0));
    let right = g.input(Matrix::filled(cols, 1, 1.0));
    let t = g.matmul(left, prod);
    g.matmul(t, right)
}

fn check<F>(inputs: Vec<Matrix>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let store = ParamStore::new();
    let eval = |vals: &[Matrix]| -> f64 {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = vals.iter().map(|m| g.leaf(m.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let h = 1e-5;
    for (i, m) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
        for j in 0..m.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let tol = 1e-6 * (1.0 + fd.abs().max(a.abs()));
            assert!(
                (fd - a).abs() <= tol,
                "input {i} entry {j}: analytic {a} vs finite difference {fd}"
            );
        }
    }
}

fn rand_m(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::uniform(rows, cols, 1.0, &mut rng)
}

#[test]
fn matmul_add_row_and_tanh() {
    check(vec![rand_m(3, 4, 1), rand_m(4, 2, 2), rand_m(1, 2, 3)], |g, v| {
        let m = g.matmul(v[0], v[1]);
        let a = g.add_row(m, v[2]);
        let t = g.tanh(a);
        project(g, t, 9)
    });
}

#[test]
fn elementwise_ops() {
    check(vec![rand_m(2, 3, 4), rand_m(2, 3, 5)], |g, v| {
        let a = g.add(v[0], v[1]);
        let m = g.mul(a, v[1]);
        let s = g.scale(m, -1.7);
        let e = g.gelu(s);
        project(g, e, 10)
    });
}

#[test]
fn layer_norm() {
    check(vec![rand_m(3, 5, 6), rand_m(1, 5, 7), rand_m(1, 5, 8)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]);
        project(g, y, 11)
    });
}

#[test]
fn gather_concat_slice_and_mean() {
    check(vec![rand_m(4, 3, 12), rand_m(2, 3, 13)], |g, v| {
        let a = g.gather(v[0], &[3, 0, 3, 1]);
        let c = g.concat_rows(&[a, v[1]]);
        let w = g.concat_cols(&[c, c]);
        let s = g.slice_cols(w, 2, 3);
        let m = g.segment_mean(s, &[(0, 2), (2, 3), (5, 1)]);
        project(g, m, 14)
    });
}

#[test]
fn group_max_routes_to_argmax() {
    check(vec![rand_m(6, 4, 15)], |g, v| {
        let m = g.group_max(v[0], &[(0, 4), (4, 2)]);
        project(g, m, 16)
    });
}

#[test]
fn attention_blocks_causal_and_cross() {
    check(
        vec![rand_m(5, 4, 17), rand_m(7, 4, 18), rand_m(7, 4, 19)],
        |g, v| {
            let blocks = [
                AttnBlock {
                    q_start: 0,
                    q_len: 3,
                    k_start: 0,
                    k_len: 4,
                    causal: true,
                },
                AttnBlock {
                    q_start: 3,
                    q_len: 2,
                    k_start: 4,
                    k_len: 3,
                    causal: false,
                },
            ];
            let o = g.attention(v[0], v[1], v[2], 2, &blocks);
            project(g, o, 20)
        },
    );
}

#[test]
fn bce_and_cross_entropy() {
    check(vec![rand_m(2, 3, 21)], |g, v| {
        let t = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let w = [1.0, 1.0, 0.5, 2.0, 0.0, 1.0];
        g.bce_with_logits(v[0], &t, &w)
    });
    check(vec![rand_m(3, 5, 22)], |g, v| {
        g.cross_entropy(v[0], &[Some(4), None, Some(0)], 0.5)
    });
}

#[test]
fn bce_clamped_entries_have_no_gradient() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.leaf(Matrix::row_vector(vec![40.0, -40.0, 0.3]));
    let l = g.bce_with_logits(x, &[0.0, 1.0, 1.0], &[1.0, 1.0, 1.0]);
    let grads = g.backward(l);
    let gx = grads.get(x).unwrap();
    assert_eq!(gx.data()[0], 0.0);
    assert_eq!(gx.data()[1], 0.0);
    assert!(gx.data()[2] < 0.0);
    // clamped terms still contribute -log(PROB_CLAMP)
    assert!((g.scalar(l) - (2.0 * -(PROB_CLAMP.ln()) + (1.0 + (-0.3f64).exp()).ln())).abs() < 1e-6);
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("enc.w", rand_m(2, 2, 30));
    let b = store.add("dec.w", rand_m(2, 2, 31));
    store.freeze_prefix("enc.");
    let mut g = Graph::new(&store);
    let va = g.param(a);
    let vb = g.param(b);
    let m = g.matmul(va, vb);
    let out = project(&mut g, m, 3);
    let grads = g.backward(out);
    let ids: Vec<ParamId> = grads.param_grads().map(|(p, _)| p).collect();
    assert_eq!(ids, vec![b]);
}

#[test]
fn adam_moves_against_gradient_and_clips() {
    let mut store = ParamStore::new();
    let p = store.add("w", Matrix::row_vector(vec![1.0, -1.0]));
    let mut g = Graph::new(&store);
    let v = g.param(p);
    let out = project(&mut g, v, 1);
    let grads = g.backward(out);
    let gp = grads.param_grads().next().unwrap().1.clone();
    let mut acc = GradAccumulator::new(store.len());
    acc.add(&grads);
    drop(g);
    let mut adam = Adam::new(0.1, Some(1e-3));
    let before = store.get(p).clone();
    adam.step(&mut store, &acc);
    for i in 0..2 {
        let delta = store.get(p).data()[i] - before.data()[i];
        assert!(delta * gp.data()[i] < 0.0);
        // first Adam step has magnitude ~lr regardless of scale
        assert!((delta.abs() - 0.1).abs() < 1e-3);
    }
}
