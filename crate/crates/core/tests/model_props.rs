use noble::model::{Transformer, TransformerConfig};
use noble::optim::RoleTag;
use noble::rng::rng_for;
use noble::{ActivationKind, NobleSpec, ParamStore, Real, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

fn cfg(width: usize, heads: usize, vocab: usize, depth: usize, noble: Option<NobleSpec>) -> TransformerConfig {
    TransformerConfig { depth, width, n_heads: heads, vocab_size: vocab, seq_len: 16, noble, ..TransformerConfig::default() }
}

fn logits<F: Real>(model: &Transformer, store: &ParamStore<F>, ids: &[usize], batch: usize, t: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let y = model.forward_lm(&mut tape, &p, ids, batch, t).unwrap();
    tape.value(y).to_f64_vec()
}

fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = rng_for(seed, "jitter");
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).role == RoleTag::BiasOrGain {
            let mut v = store.value(id).clone();
            for e in v.data_mut() {
                *e += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            store.set(id, v).unwrap();
        }
    }
}

fn ids(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, "ids");
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

// Straight-line reference implementation of one pre-norm block.

fn linear(x: &[f64], rows: usize, w: &[f64], b: Option<&[f64]>, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        for j in 0..d_out {
            let mut s = b.map_or(0.0, |b| b[j]);
            for i in 0..d_in {
                s += x[r * d_in + i] * w[i * d_out + j];
            }
            y[r * d_out + j] = s;
        }
    }
    y
}

fn rmsnorm(x: &[f64], g: &[f64]) -> Vec<f64> {
    let d = g.len();
    x.chunks(d)
        .flat_map(|row| {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + 1e-6).sqrt();
            row.iter().zip(g).map(move |(v, g)| v / rms * g)
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference(store: &ParamStore<f64>, c: &TransformerConfig, tokens: &[usize]) -> Vec<f64> {
    let val = |name: &str| store.value(store.find(name).unwrap()).data().to_vec();
    let (d, t, v, f) = (c.width, tokens.len(), c.vocab_size, c.ffn());
    let (h, hd) = (c.n_heads, c.head_dim());
    let emb = val("embed");
    let mut x: Vec<f64> = tokens.iter().flat_map(|&id| emb[id * d..(id + 1) * d].to_vec()).collect();
    let lin = |x: &[f64], name: &str, i: usize, o: usize| {
        linear(x, t, &val(&format!("blocks.0.{name}.weight")), Some(&val(&format!("blocks.0.{name}.bias"))), i, o)
    };

    let n = rmsnorm(&x, &val("blocks.0.attn_norm"));
    let (mut q, mut k, vv) = (lin(&n, "q", d, d), lin(&n, "k", d, d), lin(&n, "v", d, d));
    for pos in 0..t {
        for head in 0..h {
            for i in 0..hd / 2 {
                let ang = pos as f64 * 10000f64.powf(-2.0 * i as f64 / hd as f64);
                let at = pos * d + head * hd + 2 * i;
                for m in [&mut q, &mut k] {
                    let (a, b) = (m[at], m[at + 1]);
                    m[at] = a * ang.cos() - b * ang.sin();
                    m[at + 1] = a * ang.sin() + b * ang.cos();
                }
            }
        }
    }
    let mut att = vec![0.0; t * d];
    for head in 0..h {
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..hd).map(|e| q[i * d + head * hd + e] * k[j * d + head * hd + e]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let p = (s - mx).exp() / z;
                for e in 0..hd {
                    att[i * d + head * hd + e] += p * vv[j * d + head * hd + e];
                }
            }
        }
    }
    let o = lin(&att, "o", d, d);
    x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

    let n = rmsnorm(&x, &val("blocks.0.ffn_norm"));
    let g = lin(&n, "gate", d, f);
    let u = lin(&n, "val", d, f);
    let m: Vec<f64> = g.iter().zip(&u).map(|(g, u)| gelu(*g) * u).collect();
    let out = lin(&m, "out", f, d);
    x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);

    let n = rmsnorm(&x, &val("final_norm"));
    linear(&n, t, &val("head"), None, d, v)
}

#[test]
fn matches_straight_line_reference() {
    let c = cfg(8, 2, 11, 1, None);
    let (mut store, model) = Transformer::init::<f64>(c.clone(), 4).unwrap();
    jitter(&mut store, 4);
    let tokens = ids(6, 11, 4);
    let got = logits(&model, &store, &tokens, 1, 6);
    let want = reference(&store, &c, &tokens);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn logits_are_causal() {
    let (batch, t, vocab) = (2, 8, 13);
    for seed in 0..10 {
        let spec = NobleSpec { alpha: 1.0, ..NobleSpec::with(4, ActivationKind::CosNet2Layer) };
        let (store, model) = Transformer::init::<f64>(cfg(16, 2, vocab, 2, Some(spec)), seed).unwrap();
        let base = ids(batch * t, vocab, seed);
        let before = logits(&model, &store, &base, batch, t);
        for p in 0..t {
            let mut changed = base.clone();
            for b in 0..batch {
                changed[b * t + p] = (changed[b * t + p] + 1) % vocab;
            }
            let after = logits(&model, &store, &changed, batch, t);
            for b in 0..batch {
                for s in 0..t {
                    let row = (b * t + s) * vocab..(b * t + s + 1) * vocab;
                    let same = before[row.clone()] == after[row];
                    assert_eq!(same, s < p, "seed {seed}: change at {p} seen at {s}: {same}");
                }
            }
        }
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let vocab = 32;
    let uniform = (vocab as f64).ln();
    for noble in [None, Some(NobleSpec::with(16, ActivationKind::CosNet2Layer))] {
        for seed in 0..3 {
            let (store, model) = Transformer::init::<f32>(cfg(64, 4, vocab, 2, noble), seed).unwrap();
            let tokens = ids(4 * 16, vocab, seed);
            let targets = ids(4 * 16, vocab, seed + 100);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let loss = model.loss(&mut tape, &p, &tokens, &targets, 4, 16).unwrap();
            let l = f64::from(tape.value(loss).item().unwrap());
            assert!((l - uniform).abs() <= 0.05 * uniform, "{l} vs {uniform}");
        }
    }
}

#[test]
fn zero_branches_reduce_to_plain_model() {
    let vocab = 17;
    for act in ActivationKind::ALL {
        let (plain, plain_model) = Transformer::init::<f32>(cfg(16, 2, vocab, 2, None), 9).unwrap();
        let (mut aug, aug_model) = Transformer::init::<f32>(cfg(16, 2, vocab, 2, Some(NobleSpec::with(4, act))), 9).unwrap();
        for id in aug.ids().collect::<Vec<_>>() {
            let p = aug.get(id);
            if p.role == RoleTag::WUp {
                let z = Tensor::zeros(p.value.shape().to_vec());
                aug.set(id, z).unwrap();
            } else if let Some(src) = plain.find(&p.name) {
                aug.set(id, plain.value(src).clone()).unwrap();
            }
        }
        let tokens = ids(2 * 10, vocab, 1);
        let a = logits(&plain_model, &plain, &tokens, 2, 10);
        let b = logits(&aug_model, &aug, &tokens, 2, 10);
        let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-5, "{act}: {err}");
    }
}

#[test]
fn precisions_agree() {
    let c = cfg(16, 2, 13, 2, Some(NobleSpec::with(4, ActivationKind::CosNet3Layer)));
    let (store, model) = Transformer::init::<f64>(c, 2).unwrap();
    let single: ParamStore<f32> = store.cast();
    let tokens = ids(12, 13, 2);
    let a = logits(&model, &store, &tokens, 1, 12);
    let b = logits(&model, &single, &tokens, 1, 12);
    let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-4, "{err}");
}
