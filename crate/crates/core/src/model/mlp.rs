use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noble::{NobleConfig, NobleSpec, Projection};
use crate::params::{Bound, ParamStore};
use crate::rng::rng_for;
use crate::tape::{Tape, Unary, Var};
use crate::tensor::{Real, Tensor};

/// Fully connected regression network with scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub bias: bool,
    #[serde(skip)]
    pub noble: Option<NobleSpec>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![64, 64],
            bias: true,
            noble: None,
        }
    }
}

impl MlpConfig {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(1);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::config("mlp widths must be positive"));
        }
        if let Some(spec) = &self.noble {
            spec.validate()?;
            if !self.widths().windows(2).any(|w| spec.rank <= w[0].min(w[1])) {
                return Err(Error::config(format!("no layer is wide enough for rank {}", spec.rank)));
            }
        }
        Ok(())
    }

    /// A layer receives a branch only when the rank fits both of its extents.
    fn spec_for(&self, d_in: usize, d_out: usize) -> Option<NobleSpec> {
        self.noble
            .filter(|s| NobleConfig::new(d_in, d_out, *s).validate().is_ok())
    }
}

#[derive(Clone, Debug)]
pub struct RegressionNet {
    pub cfg: MlpConfig,
    pub layers: Vec<Projection>,
}

impl RegressionNet {
    pub fn init<F: Real>(cfg: MlpConfig, seed: u64) -> Result<(ParamStore<F>, Self)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let widths = cfg.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let name = format!("layers.{i}");
            let mut rng = rng_for(seed, &name);
            let spec = cfg.spec_for(w[0], w[1]);
            layers.push(Projection::init(&mut store, &name, w[0], w[1], cfg.bias, spec.as_ref(), &mut rng)?);
        }
        Ok((store, Self { cfg, layers }))
    }

    /// `x[n, input_dim] → [n, 1]`, GELU between layers.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i < last {
                h = tape.unary(h, Unary::Gelu);
            }
        }
        Ok(h)
    }

    /// Mean squared error against `y[n]`.
    pub fn loss<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, y: &Tensor<F>) -> Result<Var> {
        let pred = self.forward(tape, p, x)?;
        let n = tape.value(pred).numel();
        if y.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "mse",
                left: tape.shape(pred).to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let pred = tape.reshape(pred, &[n])?;
        let target = tape.constant(y.reshape([n])?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.mean(sq))
    }

    pub fn branch_sites(&self) -> usize {
        self.layers.iter().filter(|l| l.as_noble().is_some()).count()
    }
}
