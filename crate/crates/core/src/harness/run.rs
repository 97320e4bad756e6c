//! One training run: a model variant, a seed, a metric log.

use std::time::Instant;

use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::harness::config::{Clock, RunConfig, TaskKind};
use crate::harness::metrics::{trimmed_mean, MetricLog, MetricRow};
use crate::model::{ParamCounts, RegressionNet, Transformer};
use crate::noble::{ActivationKind, NobleSpec};
use crate::optim::{AdamW, RoleTag};
use crate::params::{Bound, ParamStore};
use crate::rng::{derive_seed, rng_for};
use crate::tape::{Tape, Var};
use crate::tasks::{
    gen_spectral_batch, mixup_blend, CharCorpus, RegressionBatch, SpectralDiagnostics, SpectralTarget, TokenBatch,
};

/// Step timings before this index are excluded from the mean step time.
pub const TIMING_SKIP: usize = 50;
const TIMING_TRIM: f64 = 0.1;

/// A model variant: the plain baseline or a branch configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub noble: Option<NobleSpec>,
}

impl Variant {
    pub fn baseline() -> Self {
        Self { noble: None }
    }

    pub fn with(spec: NobleSpec) -> Self {
        Self { noble: Some(spec) }
    }

    pub fn name(&self) -> String {
        match &self.noble {
            None => "baseline".into(),
            Some(s) => format!("{}-r{}", s.activation, s.rank),
        }
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-s{seed}", self.name())
    }

    pub fn activation(&self) -> Option<ActivationKind> {
        self.noble.map(|s| s.activation)
    }

    pub fn rank(&self) -> usize {
        self.noble.map_or(0, |s| s.rank)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Finished,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub status: RunStatus,
    pub log: MetricLog,
    /// Seconds per training step, in order.
    pub step_times: Vec<f64>,
    pub params: ParamCounts,
    /// Present for the spectral task after a finished run.
    pub diagnostics: Option<SpectralDiagnostics>,
}

impl RunOutcome {
    pub fn run_id(&self) -> &str {
        &self.log.run_id
    }

    pub fn finished(&self) -> bool {
        self.status == RunStatus::Finished
    }

    pub fn mean_step_time(&self) -> Option<f64> {
        trimmed_mean(&self.step_times, TIMING_SKIP, TIMING_TRIM)
    }
}

/// Data for one seed; a pure function of the task section and the seed.
pub enum TaskData {
    Spectral { target: SpectralTarget, eval: RegressionBatch },
    Lm { corpus: CharCorpus, eval: Vec<TokenBatch> },
}

enum Batch {
    Regression(RegressionBatch),
    Tokens(TokenBatch),
}

enum Net {
    Mlp(RegressionNet),
    Lm(Transformer),
}

impl TaskData {
    pub fn build(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let task = &cfg.task;
        match task.kind {
            TaskKind::Spectral => {
                let target = SpectralTarget::generate(&task.spectral, seed)?;
                let eval = gen_spectral_batch(&target, task.spectral.eval_size, derive_seed(seed, "spectral/eval"))?;
                Ok(TaskData::Spectral { target, eval })
            }
            TaskKind::CharLm => {
                let corpus = CharCorpus::generate(&task.corpus, seed)?;
                let t = cfg.model.transformer.seq_len;
                let eval = corpus.eval_batches(task.lm_eval_batches, task.lm_batch, t)?;
                Ok(TaskData::Lm { corpus, eval })
            }
        }
    }

    fn train_batch(&self, cfg: &RunConfig, seed: u64, step: u64) -> Result<Batch> {
        match self {
            TaskData::Spectral { target, .. } => {
                let s = &cfg.task.spectral;
                let n = s.batch_size;
                let a = gen_spectral_batch(target, n, derive_seed(seed, &format!("spectral/train/{step}")))?;
                let batch = if s.mixup {
                    let b = gen_spectral_batch(target, n, derive_seed(seed, &format!("spectral/mix/{step}")))?;
                    let beta = Beta::new(s.mixup_alpha, s.mixup_alpha)
                        .map_err(|e| Error::config(format!("mixup_alpha: {e}")))?;
                    let lambda = beta.sample(&mut rng_for(seed, &format!("spectral/lambda/{step}")));
                    mixup_blend(&a, &b, lambda)?
                } else {
                    a
                };
                Ok(Batch::Regression(RegressionBatch { step, ..batch }))
            }
            TaskData::Lm { corpus, .. } => {
                let t = cfg.model.transformer.seq_len;
                Ok(Batch::Tokens(corpus.train_batch(cfg.task.lm_batch, t, seed, step)?))
            }
        }
    }
}

impl Net {
    fn loss(&self, tape: &mut Tape<f32>, p: &Bound, batch: &Batch) -> Result<Var> {
        match (self, batch) {
            (Net::Mlp(net), Batch::Regression(b)) => {
                let x = tape.constant(b.x.cast());
                net.loss(tape, p, x, &b.y.cast())
            }
            (Net::Lm(m), Batch::Tokens(b)) => m.loss(tape, p, &b.ids, &b.targets, b.batch, b.t),
            _ => Err(Error::config("task and model kinds do not match")),
        }
    }

    fn eval_loss(&self, store: &ParamStore<f32>, data: &TaskData) -> Result<f64> {
        let one = |batch: &Batch| -> Result<f64> {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let l = self.loss(&mut tape, &p, batch)?;
            Ok(tape.value(l).item().expect("scalar loss") as f64)
        };
        match data {
            TaskData::Spectral { eval, .. } => one(&Batch::Regression(eval.clone())),
            TaskData::Lm { eval, .. } => {
                let mut total = 0.0;
                for b in eval {
                    total += one(&Batch::Tokens(b.clone()))?;
                }
                Ok(total / eval.len() as f64)
            }
        }
    }

    fn diagnose(&self, store: &ParamStore<f32>, data: &TaskData) -> Result<Option<SpectralDiagnostics>> {
        let (Net::Mlp(net), TaskData::Spectral { target, eval }) = (self, data) else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(eval.x.cast());
        let y = net.forward(&mut tape, &p, x)?;
        let pred: Vec<f64> = tape.value(y).to_f64_vec();
        target.diagnose(&eval.x, &pred).map(Some)
    }
}

fn build_net(cfg: &RunConfig, variant: &Variant, data: &TaskData, seed: u64) -> Result<(ParamStore<f32>, Net, ParamCounts)> {
    match data {
        TaskData::Spectral { .. } => {
            let (store, net) = RegressionNet::init::<f32>(cfg.mlp(variant.noble), seed)?;
            let counts = ParamCounts {
                base: store.count_where(|r| !r.is_branch()),
                branch: store.count_where(RoleTag::is_branch),
            };
            Ok((store, Net::Mlp(net), counts))
        }
        TaskData::Lm { corpus, .. } => {
            let tcfg = cfg.transformer(variant.noble, corpus.vocab_size);
            let counts = tcfg.count_params(true);
            let (store, m) = Transformer::init::<f32>(tcfg, seed)?;
            Ok((store, Net::Lm(m), counts))
        }
    }
}

/// Trains one variant for one seed. Never panics on divergence: the outcome
/// records the failure and the partial log.
pub fn train_run(cfg: &RunConfig, variant: &Variant, seed: u64) -> RunOutcome {
    let data = TaskData::build(cfg, seed);
    match data {
        Ok(data) => train_with_data(cfg, variant, seed, &data),
        Err(e) => RunOutcome {
            variant: variant.clone(),
            seed,
            status: RunStatus::Failed(e.to_string()),
            log: MetricLog::new(variant.run_id(seed), seed),
            step_times: Vec::new(),
            params: ParamCounts { base: 0, branch: 0 },
            diagnostics: None,
        },
    }
}

pub fn train_with_data(cfg: &RunConfig, variant: &Variant, seed: u64, data: &TaskData) -> RunOutcome {
    let mut out = RunOutcome {
        variant: variant.clone(),
        seed,
        status: RunStatus::Finished,
        log: MetricLog::new(variant.run_id(seed), seed),
        step_times: Vec::new(),
        params: ParamCounts { base: 0, branch: 0 },
        diagnostics: None,
    };
    if let Err(e) = train_inner(cfg, variant, seed, data, &mut out) {
        out.status = RunStatus::Failed(e.to_string());
    }
    out
}

fn train_inner(cfg: &RunConfig, variant: &Variant, seed: u64, data: &TaskData, out: &mut RunOutcome) -> Result<()> {
    let (mut store, net, counts) = build_net(cfg, variant, data, seed)?;
    out.params = counts;
    let mut opt = AdamW::with_default_groups(cfg.optim.adamw(), &store)?;
    let total = cfg.optim.total_steps;
    let every = cfg.run.eval_every;

    out.log.push(MetricRow { step: 0, train_loss: None, eval_loss: net.eval_loss(&store, data)?, wallclock_s: 0.0 })?;
    let (mut flops, mut elapsed) = (0u64, 0.0f64);
    let (mut loss_sum, mut loss_n) = (0.0f64, 0u64);
    for step in 1..=total {
        let batch = data.train_batch(cfg, seed, step)?;
        let started = Instant::now();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let loss = net.loss(&mut tape, &p, &batch)?;
        let value = tape.value(loss).item().expect("scalar loss") as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        tape.backward(loss)?;
        let grads = store.grads(&tape, &p);
        opt.step(&mut store, &grads)?;
        let dt = started.elapsed().as_secs_f64();
        out.step_times.push(dt);
        elapsed += dt;
        flops += tape.flops();
        loss_sum += value;
        loss_n += 1;

        if step % every == 0 {
            let wallclock_s = match cfg.run.clock {
                Clock::Modeled => flops as f64 / 1e9,
                Clock::Measured => elapsed,
            };
            out.log.push(MetricRow {
                step,
                train_loss: Some(loss_sum / loss_n as f64),
                eval_loss: net.eval_loss(&store, data)?,
                wallclock_s,
            })?;
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    out.diagnostics = net.diagnose(&store, data)?;
    Ok(())
}

/// Mean eval loss of a freshly initialized model (no training).
pub fn initial_eval_loss(cfg: &RunConfig, variant: &Variant, seed: u64) -> Result<f64> {
    let data = TaskData::build(cfg, seed)?;
    let (store, net, _) = build_net(cfg, variant, &data, seed)?;
    net.eval_loss(&store, &data)
}

