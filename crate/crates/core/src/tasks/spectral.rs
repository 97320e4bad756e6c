use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// `amp · sin(π · freq · (dir · x) + phase)`
#[derive(Clone, Debug, PartialEq)]
pub struct Sinusoid {
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
    pub dir: Vec<f64>,
}

impl Sinusoid {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let proj: f64 = self.dir.iter().zip(x).map(|(a, b)| a * b).sum();
        self.amp * (PI * self.freq * proj + self.phase).sin()
    }
}

/// Generator parameters for a random [`SpectralTarget`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralSpec {
    pub input_dim: usize,
    /// Number of low-frequency sinusoids in the smooth part.
    pub smooth_terms: usize,
    pub smooth_max_freq: f64,
    pub residual_terms: usize,
    pub residual_freq_min: f64,
    pub residual_freq_max: f64,
    /// Upper bound on residual amplitudes.
    pub residual_amp: f64,
    pub noise_std: f64,
    pub batch_size: usize,
    pub eval_size: usize,
    /// Blend each training batch with a second batch (mixup).
    pub mixup: bool,
    /// `λ ~ Beta(mixup_alpha, mixup_alpha)`
    pub mixup_alpha: f64,
}

impl Default for SpectralSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            smooth_terms: 3,
            smooth_max_freq: 1.0,
            residual_terms: 6,
            residual_freq_min: 3.0,
            residual_freq_max: 6.0,
            residual_amp: 0.2,
            noise_std: 0.0,
            batch_size: 128,
            eval_size: 2048,
            mixup: false,
            mixup_alpha: 0.8,
        }
    }
}

impl SpectralSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.batch_size == 0 || self.eval_size == 0 {
            return Err(Error::config("input_dim, batch_size and eval_size must be positive"));
        }
        if !(0.0..=0.2).contains(&self.residual_amp) {
            return Err(Error::config(format!("residual_amp must be in [0, 0.2], got {}", self.residual_amp)));
        }
        if !(self.residual_freq_min > 0.0 && self.residual_freq_min <= self.residual_freq_max) {
            return Err(Error::config("residual frequency range must be positive and ordered"));
        }
        if !(self.noise_std >= 0.0 && self.smooth_max_freq >= 0.0) {
            return Err(Error::config("noise_std and smooth_max_freq must be non-negative"));
        }
        if self.mixup && !(self.mixup_alpha > 0.0) {
            return Err(Error::config("mixup_alpha must be positive"));
        }
        Ok(())
    }
}

/// `f(x) = smooth(x) + residual(x)`; smooth is a quadratic plus
/// low-frequency sinusoids, residual is high-frequency sinusoids.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTarget {
    pub input_dim: usize,
    pub bias: f64,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
    pub smooth_waves: Vec<Sinusoid>,
    pub residual_waves: Vec<Sinusoid>,
    pub noise_std: f64,
}

fn unit_dir(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

impl SpectralTarget {
    pub fn generate(spec: &SpectralSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.input_dim;
        let mut rng = rng_for(seed, "spectral/target");
        let linear = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let quadratic = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let smooth_waves = (0..spec.smooth_terms)
            .map(|_| Sinusoid {
                amp: rng.random_range(0.3..0.6),
                freq: rng.random_range(0.25..=spec.smooth_max_freq.max(0.25)),
                phase: rng.random_range(0.0..2.0 * PI),
                dir: unit_dir(d, &mut rng),
            })
            .collect();
        let residual_waves = (0..spec.residual_terms)
            .map(|_| Sinusoid {
                amp: spec.residual_amp * rng.random_range(0.5..=1.0),
                freq: rng.random_range(spec.residual_freq_min..=spec.residual_freq_max),
                phase: rng.random_range(0.0..2.0 * PI),
                dir: unit_dir(d, &mut rng),
            })
            .collect();
        Ok(Self {
            input_dim: d,
            bias: 0.0,
            linear,
            quadratic,
            smooth_waves,
            residual_waves,
            noise_std: spec.noise_std,
        })
    }

    pub fn smooth(&self, x: &[f64]) -> f64 {
        let poly: f64 = self.bias
            + x.iter()
                .zip(&self.linear)
                .zip(&self.quadratic)
                .map(|((&xi, &a), &b)| a * xi + b * xi * xi)
                .sum::<f64>();
        poly + self.smooth_waves.iter().map(|w| w.eval(x)).sum::<f64>()
    }

    pub fn residual(&self, x: &[f64]) -> f64 {
        self.residual_waves.iter().map(|w| w.eval(x)).sum()
    }

    /// Noise-free target.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.smooth(x) + self.residual(x)
    }

    /// Error of `pred` (one value per row of `x`) against the full target,
    /// and least-squares gains of `pred` on the two components.
    pub fn diagnose(&self, x: &Tensor<f64>, pred: &[f64]) -> Result<SpectralDiagnostics> {
        let rows = x.numel() / self.input_dim;
        if pred.len() != rows {
            return Err(Error::ShapeMismatch { op: "diagnose", left: x.shape().to_vec(), right: vec![pred.len()] });
        }
        let mut s = Vec::with_capacity(rows);
        let mut r = Vec::with_capacity(rows);
        for row in x.data().chunks(self.input_dim) {
            s.push(self.smooth(row));
            r.push(self.residual(row));
        }
        let mse = pred.iter().zip(s.iter().zip(&r)).map(|(p, (a, b))| (p - a - b).powi(2)).sum::<f64>() / rows as f64;
        let (smooth_gain, residual_gain) = two_gain_fit(pred, &s, &r);
        Ok(SpectralDiagnostics { mse, smooth_gain, residual_gain })
    }
}

/// Regression of `y` on centered `a` and `b`; returns both slopes.
fn two_gain_fit(y: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (my, ma, mb) = (mean(y), mean(a), mean(b));
    let (mut saa, mut sbb, mut sab, mut say, mut sby) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..y.len() {
        let (yy, aa, bb) = (y[i] - my, a[i] - ma, b[i] - mb);
        saa += aa * aa;
        sbb += bb * bb;
        sab += aa * bb;
        say += aa * yy;
        sby += bb * yy;
    }
    let det = saa * sbb - sab * sab;
    if det.abs() < 1e-12 {
        return (if saa > 0.0 { say / saa } else { 0.0 }, 0.0);
    }
    ((say * sbb - sby * sab) / det, (sby * saa - say * sab) / det)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralDiagnostics {
    pub mse: f64,
    /// Slope of the prediction on the smooth component (1 = fully captured).
    pub smooth_gain: f64,
    /// Slope of the prediction on the residual component.
    pub residual_gain: f64,
}

/// Inputs `x[n, dim]` and targets `y[n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionBatch {
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub step: u64,
}

/// `n` points uniform on `[-1, 1]^dim` with noisy targets; a pure function
/// of `(target, n, seed)`.
pub fn gen_spectral_batch(target: &SpectralTarget, n: usize, seed: u64) -> Result<RegressionBatch> {
    if n == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let d = target.input_dim;
    let mut rng = rng_for(seed, "spectral/batch");
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let noise = if target.noise_std > 0.0 {
        Some(Normal::new(0.0, target.noise_std).expect("finite std"))
    } else {
        None
    };
    let y: Vec<f64> = x
        .chunks(d)
        .map(|row| target.eval(row) + noise.map_or(0.0, |nd| nd.sample(&mut rng)))
        .collect();
    Ok(RegressionBatch {
        x: Tensor::new(vec![n, d], x)?,
        y: Tensor::new(vec![n], y)?,
        step: 0,
    })
}

/// `λ·a + (1−λ)·b` on inputs and targets.
pub fn mixup_blend(a: &RegressionBatch, b: &RegressionBatch, lambda: f64) -> Result<RegressionBatch> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("mixup weight must be in [0, 1], got {lambda}")));
    }
    if a.x.shape() != b.x.shape() || a.y.shape() != b.y.shape() {
        return Err(Error::ShapeMismatch { op: "mixup_blend", left: a.x.shape().to_vec(), right: b.x.shape().to_vec() });
    }
    let blend = |p: &Tensor<f64>, q: &Tensor<f64>| {
        let data = p.data().iter().zip(q.data()).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect();
        Tensor::new(p.shape().to_vec(), data)
    };
    Ok(RegressionBatch { x: blend(&a.x, &b.x)?, y: blend(&a.y, &b.y)?, step: a.step })
}
