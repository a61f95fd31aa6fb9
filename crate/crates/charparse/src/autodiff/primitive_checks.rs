//! Finite-difference checks for every differentiable primitive, over random
//! shapes. These are the base-level correctness guarantees the model code
//! builds on.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::init::uniform;
use super::{grad_check, ParamStore, Result, Tape, Var};

const TRIALS: usize = 50;
const TOL: f64 = 1e-5;

fn check(
    name: &str,
    seed: u64,
    build: impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Vec<super::ParamId>,
    fragment: impl Fn(&Tape<f64>, &ParamStore<f64>, &[super::ParamId]) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..TRIALS {
        let mut store = ParamStore::new();
        let ids = build(&mut store, &mut rng);
        let err = grad_check(&mut store, |t, s| fragment(t, s, &ids), 1e-5, 6, &mut rng)
            .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
        assert!(err < TOL, "{name} trial {trial}: relative error {err}");
    }
}

fn rand_dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

#[test]
fn gradcheck_elementwise_binary() {
    for op in ["add", "sub", "mul"] {
        check(
            op,
            100,
            |store, rng| {
                // random broadcast pair: full shape and a suffix with some dims collapsed
                let shape = vec![rand_dim(rng), rand_dim(rng), rand_dim(rng)];
                let mut small: Vec<usize> = shape[rng.gen_range(0..3)..].to_vec();
                for d in small.iter_mut() {
                    if rng.gen_bool(0.5) {
                        *d = 1;
                    }
                }
                if small.is_empty() {
                    small.push(1);
                }
                vec![
                    store.register("a", uniform(&shape, 1.0, rng)).unwrap(),
                    store.register("b", uniform(&small, 1.0, rng)).unwrap(),
                ]
            },
            |tape, store, ids| {
                let a = tape.param(ids[0], store);
                let b = tape.param(ids[1], store);
                let y = match op {
                    "add" => tape.add(a, b)?,
                    "sub" => tape.sub(a, b)?,
                    _ => tape.mul(a, b)?,
                };
                // square so the gradient depends on the values
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
        );
    }
}

#[test]
fn gradcheck_activations() {
    for op in ["relu", "sigmoid", "tanh", "gelu"] {
        check(
            op,
            101,
            |store, rng| {
                let shape = vec![rand_dim(rng), rand_dim(rng)];
                // keep relu inputs away from the kink at 0
                let t =
                    uniform::<f64>(&shape, 2.0, rng)
                        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
                vec![store.register("x", t).unwrap()]
            },
            |tape, store, ids| {
                let x = tape.param(ids[0], store);
                let y = match op {
                    "relu" => tape.relu(x),
                    "sigmoid" => tape.sigmoid(x),
                    "tanh" => tape.tanh(x),
                    _ => tape.gelu(x),
                };
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
        );
    }
}

#[test]
fn gradcheck_matmuls() {
    check(
        "matmul",
        102,
        |store, rng| {
            let (m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
            vec![
                store.register("a", uniform(&[m, k], 1.0, rng)).unwrap(),
                store.register("b", uniform(&[k, n], 1.0, rng)).unwrap(),
            ]
        },
        |tape, store, ids| {
            let y = tape.matmul(tape.param(ids[0], store), tape.param(ids[1], store))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
    );
    check(
        "matmul_tb",
        103,
        |store, rng| {
            let (m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
            vec![
                store.register("a", uniform(&[m, k], 1.0, rng)).unwrap(),
                store.register("b", uniform(&[n, k], 1.0, rng)).unwrap(),
            ]
        },
        |tape, store, ids| {
            let y = tape.matmul_tb(tape.param(ids[0], store), tape.param(ids[1], store))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
    );
    check(
        "batched_matmul",
        104,
        |store, rng| {
            let (m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
            let batch = rng.gen_range(1..=3);
            let (ba, bb) = match rng.gen_range(0..3) {
                0 => (batch, batch),
                1 => (1, batch),
                _ => (batch, 1),
            };
            vec![
                store.register("a", uniform(&[ba, m, k], 1.0, rng)).unwrap(),
                store.register("b", uniform(&[bb, k, n], 1.0, rng)).unwrap(),
            ]
        },
        |tape, store, ids| {
            let y = tape.batched_matmul(tape.param(ids[0], store), tape.param(ids[1], store))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
    );
    check(
        "batched_matmul_tb",
        105,
        |store, rng| {
            let (m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
            let batch = rng.gen_range(1..=3);
            let (ba, bb) = match rng.gen_range(0..3) {
                0 => (batch, batch),
                1 => (1, batch),
                _ => (batch, 1),
            };
            vec![
                store.register("a", uniform(&[ba, m, k], 1.0, rng)).unwrap(),
                store.register("b", uniform(&[bb, n, k], 1.0, rng)).unwrap(),
            ]
        },
        |tape, store, ids| {
            let y = tape.batched_matmul_tb(tape.param(ids[0], store), tape.param(ids[1], store))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
    );
}

#[test]
fn gradcheck_shape_and_reduce_ops() {
    check(
        "concat_slice_swap",
        106,
        |store, rng| {
            let d = rand_dim(rng);
            vec![
                store
                    .register("a", uniform(&[rand_dim(rng), d], 1.0, rng))
                    .unwrap(),
                store
                    .register("b", uniform(&[rand_dim(rng), d], 1.0, rng))
                    .unwrap(),
            ]
        },
        |tape, store, ids| {
            let a = tape.param(ids[0], store);
            let b = tape.param(ids[1], store);
            let cat = tape.concat(&[a, b], 0)?;
            let rows = tape.value(cat).shape()[0];
            let sl = tape.slice(cat, 0, 0, rows)?;
            let sw = tape.swap_axes(sl, 0, 1)?;
            let sq = tape.mul(sw, sw)?;
            Ok(tape.sum_all(sq))
        },
    );
    check(
        "sum_mean_axis",
        107,
        |store, rng| {
            let shape = vec![rand_dim(rng), rand_dim(rng), rand_dim(rng)];
            vec![store.register("x", uniform(&shape, 1.0, rng)).unwrap()]
        },
        |tape, store, ids| {
            let x = tape.param(ids[0], store);
            let axis = tape.value(x).rank() - 1;
            let s = tape.sum_axis(x, 0)?;
            let m = tape.mean_axis(x, axis)?;
            let a = tape.sum_all(s);
            let b = tape.sum_all(m);
            let bb = tape.mul(b, b)?;
            tape.add(a, bb)
        },
    );
    check(
        "reshape",
        108,
        |store, rng| {
            let (a, b) = (rand_dim(rng), rand_dim(rng));
            vec![store.register("x", uniform(&[a, b], 1.0, rng)).unwrap()]
        },
        |tape, store, ids| {
            let x = tape.param(ids[0], store);
            let n = tape.value(x).numel();
            let flat = tape.reshape(x, &[n])?;
            let sq = tape.mul(flat, flat)?;
            Ok(tape.sum_all(sq))
        },
    );
}

#[test]
fn gradcheck_nn_primitives() {
    check(
        "gather_rows",
        109,
        |store, rng| {
            let v = rng.gen_range(2..=6);
            let d = rand_dim(rng);
            vec![store.register("emb", uniform(&[v, d], 1.0, rng)).unwrap()]
        },
        |tape, store, ids| {
            let v = tape.value(tape.param(ids[0], store)).shape()[0];
            let table = tape.param(ids[0], store);
            let rows = tape.gather_rows(table, &[0, v - 1, 0])?;
            let sq = tape.mul(rows, rows)?;
            Ok(tape.sum_all(sq))
        },
    );
    check(
        "conv1d_max_over_time",
        110,
        |store, rng| {
            let n = rng.gen_range(1..=3);
            let cin = rand_dim(rng);
            let len = rng.gen_range(3..=7);
            let width = rng.gen_range(1..=3);
            let cout = rand_dim(rng);
            vec![
                store
                    .register("x", uniform(&[n, len, cin], 1.0, rng))
                    .unwrap(),
                store
                    .register("w", uniform(&[width, cin, cout], 1.0, rng))
                    .unwrap(),
                store.register("b", uniform(&[cout], 1.0, rng)).unwrap(),
            ]
        },
        |tape, store, ids| {
            let x = tape.param(ids[0], store);
            let w = tape.param(ids[1], store);
            let b = tape.param(ids[2], store);
            let conv = tape.conv1d_valid(x, w, b)?;
            let act = tape.tanh(conv);
            let pooled = tape.max_over_time(act)?;
            let sq = tape.mul(pooled, pooled)?;
            Ok(tape.sum_all(sq))
        },
    );
    check(
        "softmax_log_softmax",
        111,
        |store, rng| {
            let shape = vec![rand_dim(rng), rng.gen_range(2..=6)];
            vec![store.register("x", uniform(&shape, 2.0, rng)).unwrap()]
        },
        |tape, store, ids| {
            let x = tape.param(ids[0], store);
            let s = tape.softmax(x)?;
            let l = tape.log_softmax(x)?;
            let prod = tape.mul(s, l)?; // entropy-like mix of both paths
            Ok(tape.sum_all(prod))
        },
    );
    check(
        "layer_norm",
        112,
        |store, rng| {
            let d = rng.gen_range(2..=6);
            let rows = rand_dim(rng);
            // spread the rows out so no variance gets close to zero, where
            // central differences lose too much precision to be a fair oracle
            let base = uniform::<f64>(&[rows, d], 1.0, rng);
            let spread: Vec<f64> = base
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + (i % d) as f64)
                .collect();
            let x = super::Tensor::from_vec(vec![rows, d], spread).unwrap();
            vec![
                store.register("x", x).unwrap(),
                store.register("g", uniform(&[d], 1.0, rng)).unwrap(),
                store.register("b", uniform(&[d], 1.0, rng)).unwrap(),
            ]
        },
        |tape, store, ids| {
            let y = tape.layer_norm(
                tape.param(ids[0], store),
                tape.param(ids[1], store),
                tape.param(ids[2], store),
            )?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
    );
    check(
        "masked_cross_entropy",
        113,
        |store, rng| {
            let n = rng.gen_range(1..=5);
            let k = rng.gen_range(2..=6);
            vec![store
                .register("logits", uniform(&[n, k], 2.0, rng))
                .unwrap()]
        },
        |tape, store, ids| {
            let logits = tape.param(ids[0], store);
            let shape = tape.value(logits).shape().to_vec();
            let (n, k) = (shape[0], shape[1]);
            let targets: Vec<usize> = (0..n).map(|i| i % k).collect();
            let mask: Vec<bool> = (0..n).map(|i| i != 1).collect();
            tape.masked_cross_entropy(logits, &targets, &mask)
        },
    );
}

#[test]
fn forward_determinism_bitwise() {
    // identical seeds and inputs -> bit-identical outputs within a precision
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tape = Tape::<f32>::new();
        let x = tape.constant(uniform(&[4, 8], 1.0, &mut rng));
        let w = tape.constant(uniform(&[8, 8], 1.0, &mut rng));
        let h = tape.matmul(x, w).unwrap();
        let a = tape.gelu(h);
        let d = tape.dropout(a, 0.5, true, &mut rng);
        let s = tape.softmax(d).unwrap();
        tape.value(s)
    };
    let a = run();
    let b = run();
    assert!(a.bits_equal(&b));
}
