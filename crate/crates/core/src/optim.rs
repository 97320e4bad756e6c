//! AdamW with per-group learning-rate multipliers and a linear warmup /
//! linear decay schedule.
//!
//! Low-rank branch parameters train at elevated rates: `W_up` at
//! `(min(d_in, d_out) / r)^(2γ)`, mixing matrices at
//! `(min(d_in, d_out) / r)^γ_M`, frequencies and phases at flat multipliers.
//! Everything else uses the base rate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    MainWeight,
    BiasOrGain,
    WDown,
    WUp,
    MixingM,
    Frequency,
    Phase,
    Embedding,
}

impl RoleTag {
    pub const ALL: [RoleTag; 8] = [
        RoleTag::MainWeight,
        RoleTag::BiasOrGain,
        RoleTag::WDown,
        RoleTag::WUp,
        RoleTag::MixingM,
        RoleTag::Frequency,
        RoleTag::Phase,
        RoleTag::Embedding,
    ];

    /// Biases, norm gains, frequencies and phases are exempt from weight decay.
    pub fn decays(self) -> bool {
        !matches!(self, RoleTag::BiasOrGain | RoleTag::Frequency | RoleTag::Phase)
    }

    /// True for parameters that exist only because of a low-rank branch.
    pub fn is_branch(self) -> bool {
        matches!(
            self,
            RoleTag::WDown | RoleTag::WUp | RoleTag::MixingM | RoleTag::Frequency | RoleTag::Phase
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::MainWeight => "main_weight",
            RoleTag::BiasOrGain => "bias_or_gain",
            RoleTag::WDown => "w_down",
            RoleTag::WUp => "w_up",
            RoleTag::MixingM => "mixing_M",
            RoleTag::Frequency => "frequency",
            RoleTag::Phase => "phase",
            RoleTag::Embedding => "embedding",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoleTag::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown role tag {s:?}")))
    }
}

/// Hyperparameters that shape the per-role multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiplierRule {
    pub gamma: f64,
    pub gamma_m: f64,
    pub freq_mult: f64,
    pub phase_mult: f64,
}

impl Default for MultiplierRule {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            gamma_m: 0.45,
            freq_mult: 3.0,
            phase_mult: 5.0,
        }
    }
}

/// Learning-rate multiplier for a parameter of role `tag` in a layer of shape
/// `d_in × d_out` with bottleneck rank `rank`.
pub fn lr_multiplier(
    tag: RoleTag,
    d_in: usize,
    d_out: usize,
    rank: usize,
    rule: &MultiplierRule,
) -> Result<f64> {
    if rank == 0 {
        return Err(Error::config("rank must be at least 1"));
    }
    let narrow = d_in.min(d_out);
    if rank > narrow {
        return Err(Error::config(format!(
            "rank {rank} exceeds min(d_in, d_out) = {narrow}"
        )));
    }
    let ratio = narrow as f64 / rank as f64;
    Ok(match tag {
        RoleTag::WUp => ratio.powf(2.0 * rule.gamma),
        RoleTag::MixingM => ratio.powf(rule.gamma_m),
        RoleTag::Frequency => rule.freq_mult,
        RoleTag::Phase => rule.phase_mult,
        _ => 1.0,
    })
}

/// Linear warmup to 1 over `warmup` steps, then linear decay to 0 at `total`.
pub fn schedule(t: u64, warmup: u64, total: u64) -> f64 {
    if t < warmup {
        t as f64 / warmup as f64
    } else if t >= total {
        0.0
    } else {
        (total - t) as f64 / (total - warmup) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub role: RoleTag,
    pub members: Vec<ParamId>,
    pub lr_mult: f64,
    pub weight_decay_enabled: bool,
}

impl ParamGroup {
    /// One group per distinct `(role, multiplier)` pair.
    pub fn partition<F: Real>(store: &ParamStore<F>) -> Vec<ParamGroup> {
        let mut map: BTreeMap<(RoleTag, u64), Vec<ParamId>> = BTreeMap::new();
        for (id, p) in store.iter() {
            map.entry((p.role, p.lr_mult.to_bits())).or_default().push(id);
        }
        map.into_iter()
            .map(|((role, bits), members)| ParamGroup {
                role,
                members,
                lr_mult: f64::from_bits(bits),
                weight_decay_enabled: role.decays(),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 2000,
            total_steps: 250_000,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::config("weight_decay must be >= 0 and eps > 0"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    cfg: AdamWConfig,
    groups: Vec<ParamGroup>,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    /// Fails unless `groups` partition the parameters of `store`.
    pub fn new(cfg: AdamWConfig, store: &ParamStore<F>, groups: Vec<ParamGroup>) -> Result<Self> {
        cfg.validate()?;
        let mut seen = vec![0usize; store.len()];
        for g in &groups {
            if !(g.lr_mult > 0.0) {
                return Err(Error::config(format!("group {} has non-positive multiplier", g.role)));
            }
            for id in &g.members {
                match seen.get_mut(id.index()) {
                    Some(c) => *c += 1,
                    None => return Err(Error::config(format!("group member {id:?} not in store"))),
                }
            }
        }
        if let Some((i, &c)) = seen.iter().enumerate().find(|(_, &c)| c != 1) {
            let name = &store.get(ParamId(i)).name;
            return Err(Error::config(format!(
                "parameter {name} appears in {c} groups; groups must partition the parameters"
            )));
        }
        let zeros = || store.iter().map(|(_, p)| vec![F::zero(); p.value.numel()]).collect();
        Ok(Self {
            cfg,
            groups,
            t: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn with_default_groups(cfg: AdamWConfig, store: &ParamStore<F>) -> Result<Self> {
        Self::new(cfg, store, ParamGroup::partition(store))
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(&mut self, t: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Result<()> {
        let same = |a: &[Vec<F>], b: &[Vec<F>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Format("optimizer moments do not match parameter shapes".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Learning rate a group would use at step `t` (1-based).
    pub fn effective_lr(&self, group: &ParamGroup, t: u64) -> f64 {
        self.cfg.base_lr
            * schedule(t, self.cfg.warmup_steps, self.cfg.total_steps)
            * group.lr_mult
    }

    /// One update. Rejected without touching any state if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Vec<F>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::config(format!(
                "expected {} gradient buffers, got {}",
                store.len(),
                grads.len()
            )));
        }
        for (id, p) in store.iter() {
            let g = &grads[id.index()];
            if g.len() != p.value.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    left: p.value.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} (role {})",
                    p.name, p.role
                )));
            }
        }

        self.t += 1;
        let t = self.t;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let (fb1, fb2) = (F::of(b1), F::of(b2));
        let eps = F::of(self.cfg.eps);
        for gi in 0..self.groups.len() {
            let lr = self.effective_lr(&self.groups[gi], t);
            let decay = if self.groups[gi].weight_decay_enabled {
                F::of(1.0 - lr * self.cfg.weight_decay)
            } else {
                F::one()
            };
            let (flr, fbc1, fbc2) = (F::of(lr), F::of(bc1), F::of(bc2));
            for &id in &self.groups[gi].members {
                let i = id.index();
                let g = &grads[i];
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                let theta = store.get_mut(id).value.data_mut();
                for j in 0..theta.len() {
                    m[j] = fb1 * m[j] + (F::one() - fb1) * g[j];
                    v[j] = fb2 * v[j] + (F::one() - fb2) * g[j] * g[j];
                    let mhat = m[j] / fbc1;
                    let vhat = v[j] / fbc2;
                    theta[j] = theta[j] * decay - flr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
