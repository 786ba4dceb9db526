//! Finite-difference verification utilities.
//!
//! The reference side is computed in f64 through small straight-line
//! re-implementations of each op, independent of the tape in
//! [`crate::autodiff`]. Central differences with h = 1e-3 on an f64 function
//! leave the comparison dominated by the engine's own f32 rounding, which the
//! 1e-3 relative tolerance absorbs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::layers::{self, LstmCellParams, LstmState};

/// Central finite differences of a scalar f64 function.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest element-wise relative error with an absolute floor.
pub fn max_rel_err(analytic: &[f32], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a as f64 - r).abs() / r.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Panic with context unless `analytic` matches `reference` element-wise.
pub fn assert_close(name: &str, analytic: &[f32], reference: &[f64], rel: f64, floor: f64) {
    assert_eq!(analytic.len(), reference.len(), "{name}: length mismatch");
    let err = max_rel_err(analytic, reference, floor);
    assert!(
        err < rel,
        "{name}: gradient mismatch, max relative error {err:.3e} (tolerance {rel:.1e})"
    );
}

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Run `loss = mean(op(x, fixed...))` through the engine, pull x's gradient,
/// and compare against central differences of the f64 reference `f`.
fn check_unary<B, F>(name: &'static str, shape: &[usize], rng: &mut ChaCha8Rng, build: B, f: F) -> OpCheck
where
    B: Fn(&mut Graph, &Tensor) -> Tensor,
    F: Fn(&[f64]) -> f64,
{
    let n: usize = shape.iter().product();
    let mut x = Tensor::param(shape.to_vec(), rand_vec(n, rng)).unwrap();
    let mut g = Graph::new();
    g.watch(&mut x);
    let out = build(&mut g, &x);
    let loss = g.mean(&out).unwrap();
    g.backward(&loss).unwrap();
    x.accumulate_grad(&g);
    let fd = central_diff(&f, &to_f64(x.data()), 1e-3);
    OpCheck {
        name,
        max_rel_err: max_rel_err(x.grad().unwrap(), &fd, 1e-5),
    }
}

fn mean64(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Gradient-check every registered op kind on randomized small shapes.
/// Returns one entry per check; callers assert `max_rel_err < 1e-3`.
pub fn check_all_ops(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();

    // matmul: check both factors.
    {
        let (m, k, n) = (3, 4, 2);
        let mut a = Tensor::param(vec![m, k], rand_vec(m * k, &mut rng)).unwrap();
        let mut b = Tensor::param(vec![k, n], rand_vec(k * n, &mut rng)).unwrap();
        let mut g = Graph::new();
        g.watch(&mut a);
        g.watch(&mut b);
        let prod = g.matmul(&a, &b).unwrap();
        let loss = g.mean(&prod).unwrap();
        g.backward(&loss).unwrap();
        a.accumulate_grad(&g);
        b.accumulate_grad(&g);
        let (av, bv) = (to_f64(a.data()), to_f64(b.data()));
        let f = |xs: &[f64], ys: &[f64]| {
            let mut vals = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += xs[i * k + p] * ys[p * n + j];
                    }
                    vals.push(s);
                }
            }
            mean64(&vals)
        };
        let fd_a = central_diff(|p| f(p, &bv), &av, 1e-3);
        let fd_b = central_diff(|p| f(&av, p), &bv, 1e-3);
        report.push(OpCheck {
            name: "matmul/lhs",
            max_rel_err: max_rel_err(a.grad().unwrap(), &fd_a, 1e-5),
        });
        report.push(OpCheck {
            name: "matmul/rhs",
            max_rel_err: max_rel_err(b.grad().unwrap(), &fd_b, 1e-5),
        });
    }

    // add / mul / concat / bias: binary ops, check the varying side against a
    // frozen partner.
    {
        let shape = [3, 4];
        let partner = rand_vec(12, &mut rng);
        let pv = to_f64(&partner);
        let pt = Tensor::from_vec(shape.to_vec(), partner.clone()).unwrap();
        report.push(check_unary(
            "add",
            &shape,
            &mut rng,
            |g, x| g.add(x, &pt).unwrap(),
            |xs| mean64(&xs.iter().zip(&pv).map(|(a, b)| a + b).collect::<Vec<_>>()),
        ));
        let pt2 = Tensor::from_vec(shape.to_vec(), partner.clone()).unwrap();
        let pv2 = pv.clone();
        report.push(check_unary(
            "mul-elementwise",
            &shape,
            &mut rng,
            |g, x| g.mul(x, &pt2).unwrap(),
            |xs| mean64(&xs.iter().zip(&pv2).map(|(a, b)| a * b).collect::<Vec<_>>()),
        ));
        let other = rand_vec(6, &mut rng);
        let ot = Tensor::from_vec(vec![3, 2], other.clone()).unwrap();
        let ov = to_f64(&other);
        report.push(check_unary(
            "concat-last-dim",
            &shape,
            &mut rng,
            |g, x| g.concat_last_dim(x, &ot).unwrap(),
            |xs| {
                let mut all = Vec::new();
                for r in 0..3 {
                    all.extend_from_slice(&xs[r * 4..(r + 1) * 4]);
                    all.extend_from_slice(&ov[r * 2..(r + 1) * 2]);
                }
                mean64(&all)
            },
        ));
        // broadcast-add-bias: gradient w.r.t. the bias vector.
        let xs = rand_vec(12, &mut rng);
        let xv = to_f64(&xs);
        let xt = Tensor::from_vec(vec![3, 4], xs).unwrap();
        report.push(check_unary(
            "broadcast-add-bias",
            &[4],
            &mut rng,
            |g, b| g.add_bias(&xt, b).unwrap(),
            |bs| {
                let mut all = Vec::new();
                for r in 0..3 {
                    for c in 0..4 {
                        all.push(xv[r * 4 + c] + bs[c]);
                    }
                }
                mean64(&all)
            },
        ));
    }

    // slice of [2, 3, 4], step 1.
    report.push(check_unary(
        "slice",
        &[2, 3, 4],
        &mut rng,
        |g, x| g.slice_step(x, 1).unwrap(),
        |xs| {
            let mut vals = Vec::new();
            for b in 0..2 {
                for j in 0..4 {
                    vals.push(xs[(b * 3 + 1) * 4 + j]);
                }
            }
            mean64(&vals)
        },
    ));

    // pointwise nonlinearities.
    report.push(check_unary(
        "sigmoid",
        &[3, 4],
        &mut rng,
        |g, x| g.sigmoid(x).unwrap(),
        |xs| mean64(&xs.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect::<Vec<_>>()),
    ));
    report.push(check_unary(
        "tanh",
        &[3, 4],
        &mut rng,
        |g, x| g.tanh(x).unwrap(),
        |xs| mean64(&xs.iter().map(|v| v.tanh()).collect::<Vec<_>>()),
    ));
    report.push(check_unary(
        "exp",
        &[3, 4],
        &mut rng,
        |g, x| g.exp(x).unwrap(),
        |xs| mean64(&xs.iter().map(|v| v.exp()).collect::<Vec<_>>()),
    ));
    // log needs a positive domain: shift inputs into [0.5, 4.5].
    {
        let mut x = Tensor::param(
            vec![3, 4],
            (0..12).map(|_| rng.random_range(0.5f32..4.5)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        g.watch(&mut x);
        let y = g.log(&x).unwrap();
        let loss = g.mean(&y).unwrap();
        g.backward(&loss).unwrap();
        x.accumulate_grad(&g);
        let fd = central_diff(
            |xs| mean64(&xs.iter().map(|v| v.ln()).collect::<Vec<_>>()),
            &to_f64(x.data()),
            1e-3,
        );
        report.push(OpCheck {
            name: "log",
            max_rel_err: max_rel_err(x.grad().unwrap(), &fd, 1e-5),
        });
    }

    // softmax cross-entropy over 4 rows x 5 classes.
    {
        let targets = [3u32, 0, 4, 1];
        report.push(check_unary(
            "softmax-cross-entropy-with-logits",
            &[4, 5],
            &mut rng,
            |g, x| g.softmax_cross_entropy(x, &targets).unwrap(),
            |xs| {
                let mut vals = Vec::new();
                for (r, &t) in targets.iter().enumerate() {
                    let row = &xs[r * 5..(r + 1) * 5];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    vals.push(lse - row[t as usize]);
                }
                mean64(&vals)
            },
        ));
    }

    // embedding gather with a repeated id.
    {
        let ids = [2u32, 0, 2, 1];
        report.push(check_unary(
            "embedding-gather",
            &[3, 4],
            &mut rng,
            |g, x| g.gather(x, &ids, &[4]).unwrap(),
            |xs| {
                let mut vals = Vec::new();
                for &id in &ids {
                    vals.extend_from_slice(&xs[id as usize * 4..(id as usize + 1) * 4]);
                }
                mean64(&vals)
            },
        ));
    }

    // dropout with a fixed mask (p = 0.5, inverted scaling).
    {
        let mask: Vec<f32> = (0..12)
            .map(|_| if rng.random_bool(0.5) { 2.0 } else { 0.0 })
            .collect();
        let mv = to_f64(&mask);
        report.push(check_unary(
            "dropout-with-mask",
            &[3, 4],
            &mut rng,
            |g, x| g.dropout(x, &mask).unwrap(),
            |xs| mean64(&xs.iter().zip(&mv).map(|(a, m)| a * m).collect::<Vec<_>>()),
        ));
    }

    // reductions.
    report.push(check_unary(
        "sum",
        &[3, 4],
        &mut rng,
        |g, x| g.sum(x).unwrap(),
        |xs| xs.iter().sum::<f64>(),
    ));
    report.push(check_unary(
        "sum-rows",
        &[3, 4],
        &mut rng,
        |g, x| g.sum_rows(x).unwrap(),
        |xs| {
            let rows: Vec<f64> = (0..3).map(|r| xs[r * 4..(r + 1) * 4].iter().sum()).collect();
            mean64(&rows)
        },
    ));
    report.push(check_unary(
        "mean",
        &[3, 4],
        &mut rng,
        |g, x| g.mean(x).unwrap(),
        |xs| mean64(xs),
    ));

    report
}

// ── LSTM reference ───────────────────────────────────────────────────────

/// Straight-line f64 re-implementation of the LSTM cell gate equations.
/// Layout matches `LstmCellParams`: gates ordered [i, f, o, g].
pub fn lstm_step_f64(
    input_dim: usize,
    hidden_dim: usize,
    batch: usize,
    w: &[Vec<f64>; 4],
    u: &[Vec<f64>; 4],
    b: &[Vec<f64>; 4],
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h_new = vec![0.0; batch * hidden_dim];
    let mut c_new = vec![0.0; batch * hidden_dim];
    for bi in 0..batch {
        for j in 0..hidden_dim {
            let mut pre = [0.0f64; 4];
            for (gate, p) in pre.iter_mut().enumerate() {
                let mut s = b[gate][j];
                for k in 0..input_dim {
                    s += x[bi * input_dim + k] * w[gate][k * hidden_dim + j];
                }
                for k in 0..hidden_dim {
                    s += h[bi * hidden_dim + k] * u[gate][k * hidden_dim + j];
                }
                *p = s;
            }
            let i_g = sigmoid(pre[0]);
            let f_g = sigmoid(pre[1]);
            let o_g = sigmoid(pre[2]);
            let g_g = pre[3].tanh();
            let c_v = f_g * c[bi * hidden_dim + j] + i_g * g_g;
            c_new[bi * hidden_dim + j] = c_v;
            h_new[bi * hidden_dim + j] = o_g * c_v.tanh();
        }
    }
    (h_new, c_new)
}

/// Finite-difference check of `lstm_step` over all 12 parameter tensors.
/// Returns (tensor name, max relative error) pairs.
pub fn check_lstm_step(seed: u64, batch: usize, input_dim: usize, hidden_dim: usize) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = LstmCellParams::new(input_dim, hidden_dim, &mut rng);
    // Randomize biases too so the forget-gate offset does not hide errors.
    for gate in 0..4 {
        let b = params.bias[gate].data_mut();
        for v in b.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let x = Tensor::from_vec(
        vec![batch, input_dim],
        rand_vec(batch * input_dim, &mut rng),
    )
    .unwrap();
    let h0 = Tensor::from_vec(
        vec![batch, hidden_dim],
        rand_vec(batch * hidden_dim, &mut rng),
    )
    .unwrap();
    let c0 = Tensor::from_vec(
        vec![batch, hidden_dim],
        rand_vec(batch * hidden_dim, &mut rng),
    )
    .unwrap();

    let mut g = Graph::new();
    params.watch(&mut g);
    let state = LstmState {
        h: h0.clone(),
        c: c0.clone(),
    };
    let next = layers::lstm_step(&mut g, &params, &x, &state).unwrap();
    let hsum = g.sum(&next.h).unwrap();
    let csum = g.sum(&next.c).unwrap();
    let loss = g.add(&hsum, &csum).unwrap();
    g.backward(&loss).unwrap();

    let wv: [Vec<f64>; 4] = std::array::from_fn(|i| to_f64(params.input_weights[i].data()));
    let uv: [Vec<f64>; 4] = std::array::from_fn(|i| to_f64(params.recurrent_weights[i].data()));
    let bv: [Vec<f64>; 4] = std::array::from_fn(|i| to_f64(params.bias[i].data()));
    let xv = to_f64(x.data());
    let hv = to_f64(h0.data());
    let cv = to_f64(c0.data());

    let eval = |wv: &[Vec<f64>; 4], uv: &[Vec<f64>; 4], bv: &[Vec<f64>; 4]| -> f64 {
        let (h_new, c_new) = lstm_step_f64(input_dim, hidden_dim, batch, wv, uv, bv, &xv, &hv, &cv);
        h_new.iter().sum::<f64>() + c_new.iter().sum::<f64>()
    };

    let mut out = Vec::new();
    let gate_names = ["i", "f", "o", "g"];
    for gate in 0..4 {
        for (kind, tensor) in [
            ("w", &params.input_weights[gate]),
            ("u", &params.recurrent_weights[gate]),
            ("b", &params.bias[gate]),
        ] {
            let analytic = g.grad(tensor).expect("gradient present").to_vec();
            let base = match kind {
                "w" => wv[gate].clone(),
                "u" => uv[gate].clone(),
                _ => bv[gate].clone(),
            };
            let fd = central_diff(
                |p| {
                    let mut wv2 = wv.clone();
                    let mut uv2 = uv.clone();
                    let mut bv2 = bv.clone();
                    match kind {
                        "w" => wv2[gate] = p.to_vec(),
                        "u" => uv2[gate] = p.to_vec(),
                        _ => bv2[gate] = p.to_vec(),
                    }
                    eval(&wv2, &uv2, &bv2)
                },
                &base,
                1e-3,
            );
            out.push((
                format!("{}_{}", kind, gate_names[gate]),
                max_rel_err(&analytic, &fd, 1e-5),
            ));
        }
    }
    out
}
