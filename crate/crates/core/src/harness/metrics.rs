//! Loss curves and the efficiency ratios derived from them.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    /// Mean training loss since the previous row; absent at step 0.
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricLog {
    pub run_id: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn new(run_id: impl Into<String>, seed: u64) -> Self {
        Self { run_id: run_id.into(), seed, rows: Vec::new() }
    }

    /// Appends a row, enforcing increasing steps and finite losses.
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::config(format!("metric steps must increase: {} after {}", row.step, last.step)));
            }
        }
        if !row.eval_loss.is_finite() || row.train_loss.is_some_and(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("{} loss at step {}", self.run_id, row.step)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn final_eval_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eval_loss)
    }

    pub fn total_steps(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.step)
    }

    pub fn eval_curve(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.step as f64, r.eval_loss)).collect()
    }

    fn wallclock_curve(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.wallclock_s, r.eval_loss)).collect()
    }
}

/// First abscissa at which the curve reaches `target`, interpolating
/// linearly inside the crossing segment. `Ok(None)` when never reached.
///
/// ```
/// use noble::harness::steps_to_reach;
/// let curve = [(100.0, 3.0), (200.0, 2.8)];
/// assert_eq!(steps_to_reach(&curve, 2.9).unwrap(), Some(150.0));
/// ```
pub fn steps_to_reach(curve: &[(f64, f64)], target: f64) -> Result<Option<f64>> {
    if curve.is_empty() {
        return Err(Error::config("empty metric log"));
    }
    if target.is_nan() || curve.iter().any(|(s, l)| s.is_nan() || l.is_nan()) {
        return Err(Error::NonFinite("NaN in metric log or target".into()));
    }
    let (s0, l0) = curve[0];
    if l0 <= target {
        return Ok(Some(s0));
    }
    for w in curve.windows(2) {
        let ((sa, la), (sb, lb)) = (w[0], w[1]);
        if lb <= target {
            // la > target ≥ lb here, so the segment strictly descends.
            let frac = (la - target) / (la - lb);
            return Ok(Some(sa + frac * (sb - sa)));
        }
    }
    Ok(None)
}

/// Efficiency of one run against the baseline of the same seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Speedup {
    pub target: f64,
    pub steps_to_reach: Option<f64>,
    pub step_speedup: Option<f64>,
    pub wallclock_speedup: Option<f64>,
}

/// Step and wallclock ratios for `variant` reaching `baseline`'s final eval
/// loss. The baseline's own crossing point is the numerator, so a log
/// compared with itself yields exactly 1.
pub fn compare(baseline: &MetricLog, variant: &MetricLog) -> Result<Speedup> {
    let target = baseline
        .final_eval_loss()
        .ok_or_else(|| Error::config(format!("baseline {} has no eval rows", baseline.run_id)))?;
    let base_steps = steps_to_reach(&baseline.eval_curve(), target)?.expect("baseline reaches its own final loss");
    let base_wall = steps_to_reach(&baseline.wallclock_curve(), target)?.expect("baseline reaches its own final loss");
    let steps = steps_to_reach(&variant.eval_curve(), target)?;
    let wall = steps_to_reach(&variant.wallclock_curve(), target)?;
    let ratio = |num: f64, den: Option<f64>| den.filter(|&d| d > 0.0).map(|d| num / d);
    Ok(Speedup {
        target,
        steps_to_reach: steps,
        step_speedup: ratio(base_steps, steps),
        wallclock_speedup: ratio(base_wall, wall),
    })
}

/// `baseline total wallclock / variant wallclock at the crossing` for the
/// given target.
pub fn wallclock_speedup(baseline: &MetricLog, variant: &MetricLog, target: f64) -> Result<Option<f64>> {
    let base = baseline
        .rows
        .last()
        .ok_or_else(|| Error::config("empty baseline log"))?
        .wallclock_s;
    Ok(steps_to_reach(&variant.wallclock_curve(), target)?.filter(|&w| w > 0.0).map(|w| base / w))
}

/// Wallclock ratio implied by a step speedup and a relative per-step time
/// overhead (0.076 for +7.6%).
pub fn wallclock_from_overhead(step_speedup: f64, step_time_overhead: f64) -> f64 {
    step_speedup / (1.0 + step_time_overhead)
}

/// Mean after dropping the first `skip` samples and `trim` of each tail.
pub fn trimmed_mean(samples: &[f64], skip: usize, trim: f64) -> Option<f64> {
    let mut v: Vec<f64> = samples.iter().skip(skip).copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let cut = ((v.len() as f64) * trim).floor() as usize;
    let kept = &v[cut..v.len() - cut];
    if kept.is_empty() {
        return None;
    }
    Some(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Median of the present values; `None` when fewer than half are present.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() || 2 * v.len() < values.len() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
