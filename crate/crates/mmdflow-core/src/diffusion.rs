//! Variance-preserving forward noising `x_t = alpha_t x_0 + beta_t eps` on a
//! discrete schedule table with a continuous-t lookup rule.

use crate::error::{Error, Result};
use crate::particles::Particles;

/// Discrete noise schedule over `levels` steps.
///
/// The beta ramp is linear from `beta_start` to `beta_end`; cumulative
/// products give `alpha_bar`. Lookups index a table whose entry 0 is the
/// exact noiseless pair `(1, 0)` and whose entry `l >= 1` is
/// `(sqrt(alpha_bar_l), sqrt(1 - alpha_bar_l))`; `t = 1` returns the exact
/// pair `(0, 1)` regardless of the tabulated tail.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    levels: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Lookup table `(alpha_t, beta_t)`, entry 0 = (1, 0).
    table: Vec<(f64, f64)>,
}

/// Build a schedule; see [`DiffusionSchedule`].
pub fn make_schedule(levels: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if levels < 2 {
        return Err(Error::Config(format!(
            "schedule needs at least 2 levels, got {levels}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let mut betas = Vec::with_capacity(levels);
    for l in 0..levels {
        let frac = if levels == 1 {
            0.0
        } else {
            l as f64 / (levels - 1) as f64
        };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let mut alpha_bars = Vec::with_capacity(levels);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    let mut table = Vec::with_capacity(levels);
    table.push((1.0, 0.0));
    for &ab in alpha_bars.iter().take(levels - 1) {
        table.push((ab.sqrt(), (1.0 - ab).sqrt()));
    }
    Ok(DiffusionSchedule {
        levels,
        betas,
        alpha_bars,
        table,
    })
}

impl DiffusionSchedule {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products of `1 - beta_l`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `(alpha_t, beta_t)` at continuous `t in [0, 1]` by rounding onto the
    /// table; `t = 0` and `t = 1` return the exact boundary pairs.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("t must lie in [0, 1], got {t}")));
        }
        if t == 0.0 {
            return Ok((1.0, 0.0));
        }
        if t == 1.0 {
            return Ok((0.0, 1.0));
        }
        let idx = (t * (self.levels - 1) as f64).round() as usize;
        Ok(self.table[idx.min(self.levels - 1)])
    }

    /// Snap a continuous draw onto the discrete level grid, returning the
    /// grid value of `t` together with its coefficients.
    pub fn snap(&self, t: f64) -> Result<(f64, f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("t must lie in [0, 1], got {t}")));
        }
        let idx = (t * (self.levels - 1) as f64).round() as usize;
        let t_grid = idx as f64 / (self.levels - 1) as f64;
        let (a, b) = self.coefficients(t_grid)?;
        Ok((t_grid, a, b))
    }

    /// Every tabulated `t` value of the lookup grid.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.levels)
            .map(|l| l as f64 / (self.levels - 1) as f64)
            .collect()
    }
}

/// `alpha_t x0 + beta_t eps` elementwise; `eps` is caller-supplied so runs
/// stay reproducible.
pub fn noise(
    x0: &Particles,
    t: f64,
    eps: &Particles,
    schedule: &DiffusionSchedule,
) -> Result<Particles> {
    if x0.len() != eps.len() || x0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "x0 is {}x{}, eps is {}x{}",
            x0.len(),
            x0.dim(),
            eps.len(),
            eps.dim()
        )));
    }
    let (a, b) = schedule.coefficients(t)?;
    let data: Vec<f64> = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Particles::from_flat(x0.len(), x0.dim(), data)
}

/// 2-D defaults: 1000 levels ramping from 1e-4 to 2e-4.
pub fn default_2d_schedule() -> DiffusionSchedule {
    make_schedule(1000, 1e-4, 2e-4).expect("valid default schedule")
}
