use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Either a seeded Markov source over `vocab_size` symbols or a fixed text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Context length of the chain; 0 is an i.i.d. uniform source.
    pub order: usize,
    pub vocab_size: usize,
    /// Successors with nonzero probability per context (order ≥ 1).
    pub branching: usize,
    pub train_len: usize,
    pub eval_len: usize,
    /// When set, replaces the Markov source; split positionally.
    pub text: Option<String>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            order: 2,
            vocab_size: 32,
            branching: 3,
            train_len: 200_000,
            eval_len: 20_000,
            text: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Row-major `[batch, t]` inputs with next-symbol targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub t: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    pub vocab_size: usize,
    pub train: Vec<u8>,
    pub eval: Vec<u8>,
    /// Entropy rate of the source in nats per symbol (for text: the
    /// empirical unigram entropy, an upper bound).
    pub entropy: f64,
}

/// Transition table of an order-`k` chain: successors and probabilities per
/// context index.
struct Chain {
    vocab: usize,
    order: usize,
    next: Vec<Vec<(u8, f64)>>,
}

impl Chain {
    fn new(spec: &CorpusSpec, seed: u64) -> Self {
        let (v, k) = (spec.vocab_size, spec.order);
        let contexts = v.pow(k as u32);
        let mut rng = rng_for(seed, "corpus/chain");
        let mut next = Vec::with_capacity(contexts);
        for _ in 0..contexts {
            if k == 0 {
                next.push((0..v).map(|s| (s as u8, 1.0 / v as f64)).collect());
                continue;
            }
            let mut succ: Vec<u8> = Vec::with_capacity(spec.branching);
            while succ.len() < spec.branching {
                let s = rng.random_range(0..v) as u8;
                if !succ.contains(&s) {
                    succ.push(s);
                }
            }
            let w: Vec<f64> = succ.iter().map(|_| Exp1.sample(&mut rng)).collect();
            let z: f64 = w.iter().sum();
            next.push(succ.into_iter().zip(w).map(|(s, w)| (s, w / z)).collect());
        }
        Self { vocab: v, order: k, next }
    }

    fn shift(&self, ctx: usize, s: u8) -> usize {
        if self.order == 0 {
            0
        } else {
            (ctx * self.vocab + s as usize) % self.next.len()
        }
    }

    fn sample(&self, ctx: usize, rng: &mut impl Rng) -> u8 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &self.next[ctx];
        for &(s, p) in row {
            acc += p;
            if u < acc {
                return s;
            }
        }
        row[row.len() - 1].0
    }

    /// `Σ_c π(c) H(next | c)` with `π` from power iteration, averaged over
    /// the last iterations so periodic chains still converge.
    fn entropy_rate(&self) -> f64 {
        let n = self.next.len();
        let mut pi = vec![1.0 / n as f64; n];
        let mut avg = vec![0.0; n];
        let (iters, tail) = (2000, 500);
        for it in 0..iters {
            let mut nxt = vec![0.0; n];
            for (c, row) in self.next.iter().enumerate() {
                for &(s, p) in row {
                    nxt[self.shift(c, s)] += pi[c] * p;
                }
            }
            pi = nxt;
            if it >= iters - tail {
                for (a, &p) in avg.iter_mut().zip(&pi) {
                    *a += p / tail as f64;
                }
            }
        }
        self.next
            .iter()
            .zip(&avg)
            .map(|(row, &w)| w * row.iter().map(|&(_, p)| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum::<f64>())
            .sum()
    }
}

fn unigram_entropy(data: &[u8]) -> f64 {
    let mut counts = [0usize; 256];
    for &b in data {
        counts[b as usize] += 1;
    }
    let n = data.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(text) = &self.text {
            if text.is_empty() {
                return Err(Error::config("corpus text source is empty"));
            }
            return Ok(());
        }
        if self.vocab_size < 2 || self.vocab_size > 256 {
            return Err(Error::config(format!("vocab_size must be in [2, 256], got {}", self.vocab_size)));
        }
        if self.order > 3 {
            return Err(Error::config(format!("order {} too large (max 3)", self.order)));
        }
        if self.order > 0 && (self.branching == 0 || self.branching > self.vocab_size) {
            return Err(Error::config(format!(
                "branching must be in [1, {}], got {}",
                self.vocab_size, self.branching
            )));
        }
        if self.train_len == 0 || self.eval_len == 0 {
            return Err(Error::config("corpus is empty: train_len and eval_len must be positive"));
        }
        Ok(())
    }
}

impl CharCorpus {
    pub fn generate(spec: &CorpusSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if let Some(text) = &spec.text {
            return Self::from_text(text.as_bytes(), spec.eval_len);
        }
        let chain = Chain::new(spec, seed);
        let mut rng = rng_for(seed, "corpus/walk");
        let mut ctx = 0usize;
        let burn = 1000;
        let total = spec.train_len + spec.eval_len;
        let mut out = Vec::with_capacity(total);
        for i in 0..burn + total {
            let s = chain.sample(ctx, &mut rng);
            ctx = chain.shift(ctx, s);
            if i >= burn {
                out.push(s);
            }
        }
        let eval = out.split_off(spec.train_len);
        Ok(Self {
            vocab_size: spec.vocab_size,
            train: out,
            eval,
            entropy: chain.entropy_rate(),
        })
    }

    /// Maps distinct bytes to dense ids and holds out the last `eval_len`
    /// symbols (or a tenth when `eval_len` does not fit).
    pub fn from_text(bytes: &[u8], eval_len: usize) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::config("corpus text source is empty or too short"));
        }
        let mut seen = [false; 256];
        for &b in bytes {
            seen[b as usize] = true;
        }
        let mut map = [0u8; 256];
        let mut vocab = 0usize;
        for (b, &s) in seen.iter().enumerate() {
            if s {
                map[b] = vocab as u8;
                vocab += 1;
            }
        }
        let ids: Vec<u8> = bytes.iter().map(|&b| map[b as usize]).collect();
        let eval_len = if eval_len > 0 && eval_len < ids.len() / 2 { eval_len } else { ids.len() / 10 };
        let eval_len = eval_len.max(2);
        let mut train = ids;
        let eval = train.split_off(train.len() - eval_len);
        let entropy = unigram_entropy(&train);
        Ok(Self { vocab_size: vocab.max(2), train, eval, entropy })
    }

    pub fn split(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    pub fn sha256_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(&self.train);
        h.update(&self.eval);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Random training windows; a pure function of `(seed, step)`.
    pub fn train_batch(&self, batch: usize, t: usize, seed: u64, step: u64) -> Result<TokenBatch> {
        let data = &self.train;
        if data.len() < t + 1 {
            return Err(Error::config(format!("train split shorter than window {}", t + 1)));
        }
        let mut rng = rng_for(seed, &format!("corpus/train/{step}"));
        let starts: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=data.len() - t - 1)).collect();
        Ok(Self::windows(data, &starts, t, step))
    }

    /// The first `batches × batch` disjoint windows of the eval split, in order.
    pub fn eval_batches(&self, batches: usize, batch: usize, t: usize) -> Result<Vec<TokenBatch>> {
        let data = &self.eval;
        let need = batches * batch * (t + 1);
        if data.len() < need {
            return Err(Error::config(format!(
                "eval split has {} symbols, {need} needed for {batches}×{batch} windows of {}",
                data.len(),
                t + 1
            )));
        }
        Ok((0..batches)
            .map(|bi| {
                let starts: Vec<usize> = (0..batch).map(|j| (bi * batch + j) * (t + 1)).collect();
                Self::windows(data, &starts, t, 0)
            })
            .collect())
    }

    fn windows(data: &[u8], starts: &[usize], t: usize, step: u64) -> TokenBatch {
        let mut ids = Vec::with_capacity(starts.len() * t);
        let mut targets = Vec::with_capacity(starts.len() * t);
        for &s in starts {
            ids.extend(data[s..s + t].iter().map(|&b| b as usize));
            targets.extend(data[s + 1..s + t + 1].iter().map(|&b| b as usize));
        }
        TokenBatch { ids, targets, batch: starts.len(), t, step }
    }

    /// Writes `corpus.bin` (train then eval bytes) and `corpus.manifest`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = self.train.clone();
        bytes.extend(&self.eval);
        let bin = dir.join("corpus.bin");
        fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
        let manifest = format!(
            "sha256\t{}\nvocab_size\t{}\ntrain_len\t{}\neval_len\t{}\nentropy\t{}\n",
            self.sha256_hex(),
            self.vocab_size,
            self.train.len(),
            self.eval.len(),
            self.entropy
        );
        let mpath = dir.join("corpus.manifest");
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    /// Reads a corpus written by [`CharCorpus::save`], verifying its hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("corpus.manifest");
        let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let field = |key: &str| -> Result<&str> {
            manifest
                .lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
                .ok_or_else(|| Error::Format(format!("corpus manifest lacks {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?.parse().map_err(|_| Error::Format(format!("bad {key} in corpus manifest")))
        };
        let bin = dir.join("corpus.bin");
        let mut train = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let train_len = num("train_len")?;
        if train.len() != train_len + num("eval_len")? {
            return Err(Error::Format("corpus.bin length disagrees with manifest".into()));
        }
        let eval = train.split_off(train_len);
        let corpus = Self {
            vocab_size: num("vocab_size")?,
            train,
            eval,
            entropy: field("entropy")?.parse().map_err(|_| Error::Format("bad entropy".into()))?,
        };
        if corpus.sha256_hex() != field("sha256")? {
            return Err(Error::Format("corpus hash mismatch".into()));
        }
        Ok(corpus)
    }
}
