//! Finite-difference checks of the branch layer and the full transformer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::model::{Transformer, TransformerConfig};
use crate::noble::{ActivationKind, NobleConfig, NobleLinear, NobleSpec};
use crate::params::{Bound, ParamStore};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const LAYER_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;
pub const LAYER_RANKS: [usize; 3] = [2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteModule {
    All,
    Noble,
    Model,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tol
    }
}

fn randn(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Checks every parameter of a branch layer (`d_in = 10`, `d_out = 9`) under
/// the loss `Σ y ⊙ c` for a fixed random `c`. The up-projection starts at
/// unit scale so branch gradients are not negligible.
pub fn check_noble_layer(activation: ActivationKind, rank: usize, seed: u64) -> Result<GradCheckReport> {
    let (d_in, d_out, batch) = (10, 9, 3);
    let spec = NobleSpec { alpha: 1.0, ..NobleSpec::with(rank, activation) };
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_for(seed, "suite/layer");
    let layer = NobleLinear::init(&mut store, "l", NobleConfig::new(d_in, d_out, spec), true, &mut rng)?;
    if let Some(b) = layer.main.bias {
        store.set(b, randn(&[d_out], 0.1, &mut rng))?;
    }
    let x = randn(&[batch, d_in], 1.0, &mut rng);
    let c = randn(&[batch, d_out], 1.0, &mut rng);
    let build = |tape: &mut crate::tape::Tape<f64>, vars: &[crate::tape::Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let xv = tape.constant(x.clone());
        let y = layer.forward(tape, &p, xv)?;
        let cv = tape.constant(c.clone());
        let prod = tape.mul(y, cv)?;
        Ok(tape.sum(prod))
    };
    grad_check(build, &store.values(), DEFAULT_EPS)
}

/// Depth 2, width 16, vocabulary 13, eight positions, branches on every
/// projection.
pub fn check_transformer(activation: ActivationKind, seed: u64) -> Result<GradCheckReport> {
    let spec = NobleSpec { alpha: 1.0, ..NobleSpec::with(4, activation) };
    let cfg = TransformerConfig {
        depth: 2,
        width: 16,
        n_heads: 2,
        vocab_size: 13,
        seq_len: 8,
        noble: Some(spec),
        ..TransformerConfig::default()
    };
    let (mut store, model) = Transformer::init::<f64>(cfg, seed)?;
    let mut rng = rng_for(seed, "suite/model");
    // Perturb gains and biases away from their exact initial values.
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).role == crate::optim::RoleTag::BiasOrGain {
            let mut v = store.value(id).clone();
            for e in v.data_mut() {
                *e += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            store.set(id, v)?;
        }
    }
    let (batch, t) = (2, 8);
    let ids: Vec<usize> = (0..batch * t).map(|_| rng.random_range(0..13)).collect();
    let targets: Vec<usize> = (0..batch * t).map(|_| rng.random_range(0..13)).collect();
    let build = |tape: &mut crate::tape::Tape<f64>, vars: &[crate::tape::Var]| {
        let p = Bound::from_vars(vars.to_vec());
        model.loss(tape, &p, &ids, &targets, batch, t)
    };
    grad_check(build, &store.values(), DEFAULT_EPS)
}

pub fn run_suite(module: SuiteModule) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(module, SuiteModule::All | SuiteModule::Noble) {
        for act in ActivationKind::ALL {
            for r in LAYER_RANKS {
                out.push(CheckResult {
                    name: format!("noble_linear {act} r={r}"),
                    report: check_noble_layer(act, r, r as u64)?,
                    tol: LAYER_TOL,
                });
            }
        }
    }
    if matches!(module, SuiteModule::All | SuiteModule::Model) {
        for act in [ActivationKind::CosNet2Layer, ActivationKind::Gelu] {
            out.push(CheckResult {
                name: format!("transformer depth=2 d=16 {act}"),
                report: check_transformer(act, 3)?,
                tol: MODEL_TOL,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::config("no checks selected"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_checks_pass_for_every_kind() {
        for act in ActivationKind::ALL {
            for r in LAYER_RANKS {
                let rep = check_noble_layer(act, r, 11).unwrap();
                assert!(rep.max_rel_error <= LAYER_TOL, "{act} r={r}: {rep:?}");
                let n = branch_entries(act, r);
                assert_eq!(rep.entries, 10 * 9 + 9 + n);
            }
        }
    }

    fn branch_entries(act: ActivationKind, r: usize) -> usize {
        crate::noble::branch_param_count(&NobleConfig::new(10, 9, NobleSpec::with(r, act)))
    }

    #[test]
    fn transformer_check_passes() {
        let rep = check_transformer(ActivationKind::CosNet3Layer, 5).unwrap();
        assert!(rep.max_rel_error <= MODEL_TOL, "{rep:?}");
    }
}
