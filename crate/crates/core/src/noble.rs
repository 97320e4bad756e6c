//! Linear layers augmented with a nonlinear low-rank branch.
//!
//! A [`NobleLinear`] computes
//!
//! ```text
//! y = x W + b + σ(x W_down) W_up
//! ```
//!
//! with `W_down ∈ R^{d_in×r}`, `W_up ∈ R^{r×d_out}` and `σ` chosen from
//! [`ActivationKind`]. The cosine family stacks learnable-frequency,
//! learnable-phase cosines with `r×r` mixing matrices in between:
//!
//! ```text
//! h₁ = cos(ω₁ ⊙ h + φ₁)
//! h₂ = cos(ω₂ ⊙ (M₁ h₁) + φ₂)
//! h₃ = cos(ω₃ ⊙ (M₂ h₂) + φ₃)
//! ```
//!
//! `cosine_1layer` stops at `h₁`, `cosnet_2layer` at `h₂` and
//! `cosnet_3layer` at `h₃`.
//!
//! Initialization keeps the branch nearly silent: `W_up ~ N(0, (α/√r)²)`
//! with `α = 0.01`, while the main weight starts at half the usual fan-in
//! scale.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{lr_multiplier, MultiplierRule, RoleTag};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Unary, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "tanh")]
    Tanh,
    #[serde(rename = "leaky_relu")]
    LeakyRelu,
    #[serde(rename = "gelu")]
    Gelu,
    #[serde(rename = "cosine_1layer")]
    Cosine1Layer,
    #[serde(rename = "cosnet_2layer")]
    CosNet2Layer,
    #[serde(rename = "cosnet_3layer")]
    CosNet3Layer,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 7] = [
        ActivationKind::Identity,
        ActivationKind::Tanh,
        ActivationKind::LeakyRelu,
        ActivationKind::Gelu,
        ActivationKind::Cosine1Layer,
        ActivationKind::CosNet2Layer,
        ActivationKind::CosNet3Layer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Tanh => "tanh",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Cosine1Layer => "cosine_1layer",
            ActivationKind::CosNet2Layer => "cosnet_2layer",
            ActivationKind::CosNet3Layer => "cosnet_3layer",
        }
    }

    /// Number of learnable cosine stages.
    pub fn cosine_layers(self) -> usize {
        match self {
            ActivationKind::Cosine1Layer => 1,
            ActivationKind::CosNet2Layer => 2,
            ActivationKind::CosNet3Layer => 3,
            _ => 0,
        }
    }

    pub fn mixing_matrices(self) -> usize {
        self.cosine_layers().saturating_sub(1)
    }

    pub fn is_cosine(self) -> bool {
        self.cosine_layers() > 0
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActivationKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown activation {s:?}")))
    }
}

/// Branch hyperparameters independent of the host layer's shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NobleSpec {
    pub rank: usize,
    pub activation: ActivationKind,
    /// `W_up` init std is `alpha / sqrt(rank)`.
    pub alpha: f64,
    /// Main `W` init std is `main_init_scale / sqrt(d_in)`.
    pub main_init_scale: f64,
    pub gamma: f64,
    pub gamma_m: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub sigma_phi: f64,
    pub freq_lr_mult: f64,
    pub phase_lr_mult: f64,
}

impl Default for NobleSpec {
    fn default() -> Self {
        Self {
            rank: 64,
            activation: ActivationKind::CosNet2Layer,
            alpha: 0.01,
            main_init_scale: 0.5,
            gamma: 0.3,
            gamma_m: 0.45,
            omega_min: 0.8,
            omega_max: 1.2,
            sigma_phi: 0.1,
            freq_lr_mult: 3.0,
            phase_lr_mult: 5.0,
        }
    }
}

impl NobleSpec {
    pub fn with(rank: usize, activation: ActivationKind) -> Self {
        Self {
            rank,
            activation,
            ..Self::default()
        }
    }

    pub fn multiplier_rule(&self) -> MultiplierRule {
        MultiplierRule {
            gamma: self.gamma,
            gamma_m: self.gamma_m,
            freq_mult: self.freq_lr_mult,
            phase_mult: self.phase_lr_mult,
        }
    }

    /// Shape-independent checks.
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if !(self.omega_min > 0.0 && self.omega_min <= self.omega_max) {
            return Err(Error::config(format!(
                "omega range [{}, {}] must be positive and ordered",
                self.omega_min, self.omega_max
            )));
        }
        let positive = [
            ("main_init_scale", self.main_init_scale),
            ("freq_lr_mult", self.freq_lr_mult),
            ("phase_lr_mult", self.phase_lr_mult),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha >= 0.0) || !(self.sigma_phi >= 0.0) {
            return Err(Error::config("alpha and sigma_phi must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NobleConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub spec: NobleSpec,
}

impl NobleConfig {
    pub fn new(d_in: usize, d_out: usize, spec: NobleSpec) -> Self {
        Self { d_in, d_out, spec }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::config("layer extents must be positive"));
        }
        let narrow = self.d_in.min(self.d_out);
        if self.spec.rank > narrow {
            return Err(Error::config(format!(
                "rank {} exceeds min(d_in, d_out) = {narrow}",
                self.spec.rank
            )));
        }
        Ok(())
    }
}

/// Parameters added by the branch (excluding the host layer's `W` and `b`).
pub fn branch_param_count(cfg: &NobleConfig) -> usize {
    let r = cfg.spec.rank;
    let act = cfg.spec.activation;
    (cfg.d_in + cfg.d_out) * r + act.mixing_matrices() * r * r + 2 * r * act.cosine_layers()
}

fn normal_tensor<F: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| F::of(dist.sample(rng))).collect()
    } else {
        vec![F::zero(); n]
    };
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn uniform_tensor<F: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = if hi > lo {
        let dist = Uniform::new_inclusive(lo, hi).expect("ordered bounds");
        (0..n).map(|_| F::of(dist.sample(rng))).collect()
    } else {
        vec![F::of(lo); n]
    };
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Plain affine layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `W ~ N(0, (init_scale / sqrt(d_in))²)`, zero bias.
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init_scale: f64,
        weight_role: RoleTag,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::config(format!("{name}: layer extents must be positive")));
        }
        let w = normal_tensor(&[d_in, d_out], init_scale / (d_in as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), weight_role, w, 1.0)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), RoleTag::BiasOrGain, Tensor::zeros([d_out]), 1.0)?)
        } else {
            None
        };
        Ok(Self { d_in, d_out, weight, bias })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// The learnable cosine stack of a branch: one `(ω, φ)` pair per stage and a
/// mixing matrix between consecutive stages.
#[derive(Clone, Debug)]
pub struct CosNet {
    pub omegas: Vec<ParamId>,
    pub phis: Vec<ParamId>,
    pub mixing: Vec<ParamId>,
}

impl CosNet {
    pub fn depth(&self) -> usize {
        self.omegas.len()
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, h: Var) -> Result<Var> {
        let var = |ids: &[ParamId]| ids.iter().map(|&i| p.var(i)).collect::<Vec<_>>();
        cosnet_apply(tape, h, &var(&self.omegas), &var(&self.phis), &var(&self.mixing))
    }
}

/// Applies `depth = omegas.len()` cosine stages to `h[..., r]`, mixing with
/// `M_ℓ` (as `h ↦ M_ℓ h` per row) between stages.
pub fn cosnet_apply<F: Real>(
    tape: &mut Tape<F>,
    h: Var,
    omegas: &[Var],
    phis: &[Var],
    mixing: &[Var],
) -> Result<Var> {
    let depth = omegas.len();
    if depth == 0 || phis.len() != depth {
        return Err(Error::config(format!(
            "cosine stack needs matching frequency/phase lists, got {} and {}",
            depth,
            phis.len()
        )));
    }
    if mixing.len() < depth - 1 {
        return Err(Error::config(format!(
            "depth {depth} needs {} mixing matrices, got {}",
            depth - 1,
            mixing.len()
        )));
    }
    let mut cur = tape.cosine_map(h, omegas[0], phis[0])?;
    for l in 1..depth {
        let mixed = tape.matmul_nt(cur, mixing[l - 1])?;
        cur = tape.cosine_map(mixed, omegas[l], phis[l])?;
    }
    Ok(cur)
}

#[derive(Clone, Debug)]
pub struct NobleLinear {
    pub cfg: NobleConfig,
    pub main: Linear,
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub cosnet: Option<CosNet>,
}

impl NobleLinear {
    /// Draws parameters in a fixed order (main weight first, so the main
    /// path shares its raw draws with a plain [`Linear`] on the same stream).
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: NobleConfig,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let NobleConfig { d_in, d_out, spec } = cfg;
        let r = spec.rank;
        let rule = spec.multiplier_rule();
        let mult = |tag| lr_multiplier(tag, d_in, d_out, r, &rule);

        let main = Linear::init(store, name, d_in, d_out, bias, spec.main_init_scale, RoleTag::MainWeight, rng)?;
        let wd = normal_tensor(&[d_in, r], 1.0 / (d_in as f64).sqrt(), rng);
        let w_down = store.add(format!("{name}.w_down"), RoleTag::WDown, wd, mult(RoleTag::WDown)?)?;
        let wu = normal_tensor(&[r, d_out], spec.alpha / (r as f64).sqrt(), rng);
        let w_up = store.add(format!("{name}.w_up"), RoleTag::WUp, wu, mult(RoleTag::WUp)?)?;

        let layers = spec.activation.cosine_layers();
        let cosnet = if layers > 0 {
            let mut omegas = Vec::with_capacity(layers);
            let mut phis = Vec::with_capacity(layers);
            for l in 0..layers {
                let om = uniform_tensor(&[r], spec.omega_min, spec.omega_max, rng);
                omegas.push(store.add(format!("{name}.omega{}", l + 1), RoleTag::Frequency, om, mult(RoleTag::Frequency)?)?);
                let ph = normal_tensor(&[r], spec.sigma_phi, rng);
                phis.push(store.add(format!("{name}.phi{}", l + 1), RoleTag::Phase, ph, mult(RoleTag::Phase)?)?);
            }
            let bound = (6.0 / (2 * r) as f64).sqrt();
            let mut mixing = Vec::with_capacity(layers - 1);
            for l in 0..layers - 1 {
                let m = uniform_tensor(&[r, r], -bound, bound, rng);
                mixing.push(store.add(format!("{name}.mix{}", l + 1), RoleTag::MixingM, m, mult(RoleTag::MixingM)?)?);
            }
            Some(CosNet { omegas, phis, mixing })
        } else {
            None
        };
        Ok(Self { cfg, main, w_down, w_up, cosnet })
    }

    /// `σ(x W_down)` for `x[..., d_in]`.
    pub fn bottleneck<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.w_down))?;
        Ok(match self.cfg.spec.activation {
            ActivationKind::Identity => h,
            ActivationKind::Tanh => tape.unary(h, Unary::Tanh),
            ActivationKind::LeakyRelu => tape.unary(h, Unary::LeakyRelu),
            ActivationKind::Gelu => tape.unary(h, Unary::Gelu),
            ActivationKind::Cosine1Layer | ActivationKind::CosNet2Layer | ActivationKind::CosNet3Layer => {
                let cos = self.cosnet.as_ref().ok_or_else(|| Error::config("cosine branch without parameters"))?;
                cos.apply(tape, p, h)?
            }
        })
    }

    /// `σ(x W_down) W_up`
    pub fn branch<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let s = self.bottleneck(tape, p, x)?;
        tape.matmul(s, p.var(self.w_up))
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let d = tape.value(x).last_dim();
        if d != self.cfg.d_in {
            return Err(Error::ShapeMismatch {
                op: "noble_forward",
                left: tape.shape(x).to_vec(),
                right: vec![self.cfg.d_in, self.cfg.d_out],
            });
        }
        let main = self.main.forward(tape, p, x)?;
        let br = self.branch(tape, p, x)?;
        tape.add(main, br)
    }

    pub fn branch_param_count(&self) -> usize {
        branch_param_count(&self.cfg)
    }

    /// Every parameter id owned by the layer, main path first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.main.weight];
        ids.extend(self.main.bias);
        ids.push(self.w_down);
        ids.push(self.w_up);
        if let Some(c) = &self.cosnet {
            ids.extend(&c.omegas);
            ids.extend(&c.phis);
            ids.extend(&c.mixing);
        }
        ids
    }
}

/// A projection that is either plain or branch-augmented.
#[derive(Clone, Debug)]
pub enum Projection {
    Plain(Linear),
    Noble(NobleLinear),
}

impl Projection {
    /// Branch-augmented when `spec` is given, plain (fan-in init) otherwise.
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        spec: Option<&NobleSpec>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match spec {
            Some(s) => Ok(Projection::Noble(NobleLinear::init(
                store,
                name,
                NobleConfig::new(d_in, d_out, *s),
                bias,
                rng,
            )?)),
            None => Ok(Projection::Plain(Linear::init(
                store,
                name,
                d_in,
                d_out,
                bias,
                1.0,
                RoleTag::MainWeight,
                rng,
            )?)),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Projection::Plain(l) => l.forward(tape, p, x),
            Projection::Noble(n) => n.forward(tape, p, x),
        }
    }

    pub fn base_param_count(&self) -> usize {
        match self {
            Projection::Plain(l) => l.param_count(),
            Projection::Noble(n) => n.main.param_count(),
        }
    }

    pub fn branch_param_count(&self) -> usize {
        match self {
            Projection::Plain(_) => 0,
            Projection::Noble(n) => n.branch_param_count(),
        }
    }

    pub fn as_noble(&self) -> Option<&NobleLinear> {
        match self {
            Projection::Noble(n) => Some(n),
            Projection::Plain(_) => None,
        }
    }
}
