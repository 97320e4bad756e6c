use noble::gradcheck::{grad_check, DEFAULT_EPS};
use noble::rng::rng_for;
use noble::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(shape: &[usize], seed: u64, label: &str) -> Tensor<f64> {
    let mut rng = rng_for(seed, label);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// `Σ y ⊙ c` with fixed random `c`, so every output entry matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let c = tape.constant(randn(tape.shape(y), seed, "projection"));
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

fn check<B>(build: B, params: &[Tensor<f64>]) -> f64
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check(build, params, DEFAULT_EPS).unwrap().max_rel_error
}

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn matmul_and_transposed(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let a = randn(&[m, k], seed, "a");
        let b = randn(&[k, n], seed, "b");
        let bt = randn(&[n, k], seed, "bt");
        let e = check(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), b]);
        prop_assert!(e <= TOL, "matmul {e}");
        let e = check(|t, v| { let y = t.matmul_nt(v[0], v[1])?; project(t, y, seed) }, &[a, bt]);
        prop_assert!(e <= TOL, "matmul_nt {e}");
    }

    #[test]
    fn broadcast_arithmetic(r in 1usize..4, c in 1usize..5, seed in any::<u64>()) {
        let a = randn(&[r, c], seed, "a");
        let b = randn(&[c], seed, "b");
        for op in 0..3 {
            let e = check(|t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, y, seed)
            }, &[a.clone(), b.clone()]);
            prop_assert!(e <= TOL, "op {op}: {e}");
        }
        let e = check(|t, v| { let y = t.scale(v[0], -1.7); project(t, y, seed) }, &[a]);
        prop_assert!(e <= TOL, "scale {e}");
    }

    #[test]
    fn pointwise_and_cosine(n in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
        let x = randn(&[n, d], seed, "x");
        for kind in 0..3 {
            let e = check(|t, v| {
                let y = match kind { 0 => t.tanh(v[0]), 1 => t.leaky_relu(v[0]), _ => t.gelu(v[0]) };
                project(t, y, seed)
            }, std::slice::from_ref(&x));
            prop_assert!(e <= TOL, "kind {kind}: {e}");
        }
        let om = randn(&[d], seed, "omega");
        let ph = randn(&[d], seed, "phi");
        let e = check(|t, v| { let y = t.cosine_map(v[0], v[1], v[2])?; project(t, y, seed) }, &[x, om, ph]);
        prop_assert!(e <= TOL, "cosine {e}");
    }

    #[test]
    fn reductions_and_reshape(n in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
        let x = randn(&[n, d], seed, "x");
        let e = check(|t, v| { let s = t.mean(v[0]); let q = t.mul(s, s)?; Ok(t.sum(q)) }, std::slice::from_ref(&x));
        prop_assert!(e <= TOL);
        let e = check(|t, v| { let y = t.reshape(v[0], &[d * n])?; project(t, y, seed) }, &[x]);
        prop_assert!(e <= TOL);
    }

    #[test]
    fn cross_entropy_and_rmsnorm(n in 1usize..5, c in 2usize..6, seed in any::<u64>()) {
        let logits = randn(&[n, c], seed, "logits");
        let mut rng = rng_for(seed, "targets");
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let e = check(|t, v| t.softmax_cross_entropy(v[0], &targets), &[logits.clone()]);
        prop_assert!(e <= TOL, "ce {e}");
        let gain = randn(&[c], seed, "gain");
        let e = check(|t, v| { let y = t.rmsnorm(v[0], v[1])?; project(t, y, seed) }, &[logits, gain]);
        prop_assert!(e <= TOL, "rmsnorm {e}");
    }

    #[test]
    fn attention_stack(b in 1usize..3, h in 1usize..3, tl in 1usize..5, half in 1usize..3, seed in any::<u64>()) {
        let hd = 2 * half;
        let x = randn(&[b, tl, h * hd], seed, "x");
        let wk = randn(&[h * hd, h * hd], seed, "wk");
        let positions: Vec<usize> = (0..tl).collect();
        let e = check(|t, v| {
            let k = t.matmul(v[0], v[1])?;
            let q = t.split_heads(v[0], h)?;
            let k = t.split_heads(k, h)?;
            let val = t.split_heads(v[0], h)?;
            let q = t.rope(q, &positions)?;
            let k = t.rope(k, &positions)?;
            let a = t.causal_attention(q, k, val)?;
            let y = t.merge_heads(a)?;
            project(t, y, seed)
        }, &[x, wk]);
        prop_assert!(e <= TOL, "attention {e}");
    }

    #[test]
    fn embedding_gather(v in 2usize..7, d in 1usize..4, seed in any::<u64>()) {
        let table = randn(&[v, d], seed, "table");
        let mut rng = rng_for(seed, "ids");
        let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..v)).collect();
        let e = check(|t, p| { let y = t.embedding(p[0], &ids, &[2, 3])?; project(t, y, seed) }, &[table]);
        prop_assert!(e <= TOL);
    }

    #[test]
    fn backward_is_linear(n in 1usize..6, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let x0 = randn(&[n], seed, "x");
        let grad_of = |which: u8| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(x0.clone(), true);
            let f = { let s = t.tanh(x); t.sum(s) };
            let g = { let q = t.mul(x, x).unwrap(); t.sum(q) };
            let loss = match which {
                0 => f,
                1 => g,
                _ => { let fa = t.scale(f, a); let gb = t.scale(g, b); t.add(fa, gb).unwrap() }
            };
            t.backward(loss).unwrap();
            t.grad(x).unwrap().into_data()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..n {
            prop_assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-6);
        }
    }
}

#[test]
fn linear_layer_is_exact() {
    let x = randn(&[4, 3], 1, "x");
    let w = randn(&[3, 2], 1, "w");
    let b = randn(&[2], 1, "b");
    let e = check(|t, v| { let y = t.matmul(v[0], v[1])?; let y = t.add(y, v[2])?; project(t, y, 1) }, &[x, w, b]);
    assert!(e <= 1e-9, "{e}");
}

#[test]
fn corrupted_backward_is_detected() {
    let x = randn(&[5], 2, "x");
    let e = check(|t, v| { let y = t.map(v[0], f64::sin, |z| 1.5 * z.cos()); project(t, y, 2) }, &[x]);
    assert!(e > 1e-2, "{e}");
}

#[test]
fn determinism() {
    let run = || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(randn(&[3, 4], 9, "x").cast(), true);
        let w = t.leaf(randn(&[4, 4], 9, "w").cast(), true);
        let y = t.matmul(x, w).unwrap();
        let y = t.gelu(y);
        let l = t.sum(y);
        t.backward(l).unwrap();
        (t.value(y).clone(), t.grad(w).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let mut t = Tape::<f32>::new();
    let l = t.constant(Tensor::from_f64([2, 3], &[80.0, -80.0, 0.0, -80.0, -80.0, 80.0]).unwrap());
    let loss = t.softmax_cross_entropy(l, &[1, 0]).unwrap();
    let v = t.value(loss).item().unwrap();
    assert!(v.is_finite() && v > 0.0);
}

#[test]
fn rmsnorm_examples() {
    let mut t = Tape::<f64>::new();
    let g = t.constant(Tensor::full([4], 1.0));
    let c = t.constant(Tensor::full([2, 4], 3.5));
    let y = t.rmsnorm(c, g).unwrap();
    assert!(t.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    let z = t.constant(Tensor::zeros([1, 4]));
    let y = t.rmsnorm(z, g).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    let r = t.constant(randn(&[5, 16], 3, "r"));
    let g16 = t.constant(Tensor::full([16], 1.0));
    let y = t.rmsnorm(r, g16).unwrap();
    for row in t.value(y).data().chunks(16) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-3, "{rms}");
    }
}

#[test]
fn rope_properties() {
    let mut t = Tape::<f64>::new();
    let x = randn(&[1, 2, 3, 6], 4, "x");
    let xv = t.constant(x.clone());
    let y = t.rope(xv, &[0, 0, 0]).unwrap();
    assert_eq!(t.value(y).data(), x.data());
    let y = t.rope(xv, &[3, 17, 250]).unwrap();
    for (a, b) in x.data().chunks(2).zip(t.value(y).data().chunks(2)) {
        assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
    }
}

#[test]
fn attention_examples() {
    let mut t = Tape::<f64>::new();
    // single position: output is v
    let q = t.constant(randn(&[1, 1, 1, 4], 5, "q"));
    let v = t.constant(randn(&[1, 1, 1, 4], 5, "v"));
    let y = t.causal_attention(q, q, v).unwrap();
    assert_eq!(t.value(y).data(), t.value(v).data());

    // uniform scores: prefix means
    let z = t.constant(Tensor::zeros([1, 1, 3, 2]));
    let vals = Tensor::from_f64([1, 1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
    let vv = t.constant(vals);
    let y = t.causal_attention(z, z, vv).unwrap();
    let want = [1.0, 2.0, 2.0, 3.0, 3.0, 5.0];
    for (a, b) in t.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }

    // two tokens, brute force
    let qd = [0.3, -1.2, 0.7, 0.4];
    let kd = [1.1, 0.5, -0.6, 2.0];
    let vd = [1.0, -2.0, 0.5, 3.0];
    let q = t.constant(Tensor::from_f64([1, 1, 2, 2], &qd).unwrap());
    let k = t.constant(Tensor::from_f64([1, 1, 2, 2], &kd).unwrap());
    let v = t.constant(Tensor::from_f64([1, 1, 2, 2], &vd).unwrap());
    let y = t.causal_attention(q, k, v).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let s0 = (qd[2] * kd[0] + qd[3] * kd[1]) * s;
    let s1 = (qd[2] * kd[2] + qd[3] * kd[3]) * s;
    let (e0, e1) = (s0.exp(), s1.exp());
    let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    let out = t.value(y).data();
    assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] + 2.0).abs() < 1e-12);
    assert!((out[2] - (p0 * vd[0] + p1 * vd[2])).abs() < 1e-12);
    assert!((out[3] - (p0 * vd[1] + p1 * vd[3])).abs() < 1e-12);
}
