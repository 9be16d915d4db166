//! Closed-form diffusion math: linear noise schedules, forward noising and
//! deterministic (eta = 0) DDIM stepping together with its inversion.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Beta / cumulative-alpha tables indexed by timestep. `alpha_bar(0) == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn linear_beta_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(ScheduleParams {
        timesteps,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn linear(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            timesteps,
            beta_start,
            beta_end,
        } = params;
        if timesteps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(timesteps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            params,
            betas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// Beta at timestep `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `alpha_bar[0..=T]`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::OutOfRange(format!(
                "timestep {t} outside 0..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("f64 representable in scalar type")
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
///
/// `t = 0` is accepted and returns `x0` (alpha_bar[0] = 1).
pub fn q_sample<F: Float>(x0: &[F], t: usize, eps: &[F], s: &NoiseSchedule) -> Result<Vec<F>> {
    s.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape(x0.len(), eps.len()));
    }
    let ab = s.alpha_bar(t);
    let a: F = cast(ab.sqrt());
    let b: F = cast((1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

fn check_pair(s: &NoiseSchedule, t: usize, t_prev: usize, a: usize, b: usize) -> Result<()> {
    if t <= t_prev {
        return Err(Error::OutOfRange(format!(
            "DDIM step requires t > t_prev, got t = {t}, t_prev = {t_prev}"
        )));
    }
    s.check_t(t)?;
    if a != b {
        return Err(Error::shape(a, b));
    }
    Ok(())
}

/// Move `x` from `from` to `to` along the deterministic DDIM path implied by
/// `eps`: predict x0 from the `from` state, then re-noise it to level `to`.
fn ddim_transfer<F: Float>(x: &[F], eps: &[F], from: usize, to: usize, s: &NoiseSchedule) -> Vec<F> {
    let ab_from = s.alpha_bar(from);
    let ab_to = s.alpha_bar(to);
    let sq_from: F = cast(ab_from.sqrt());
    let sq1m_from: F = cast((1.0 - ab_from).sqrt());
    let sq_to: F = cast(ab_to.sqrt());
    let sq1m_to: F = cast((1.0 - ab_to).sqrt());
    x.iter()
        .zip(eps)
        .map(|(&xv, &e)| {
            let x0 = (xv - sq1m_from * e) / sq_from;
            sq_to * x0 + sq1m_to * e
        })
        .collect()
}

/// One deterministic DDIM denoising step from `t` down to `t_prev`.
pub fn ddim_step<F: Float>(
    x_t: &[F],
    eps_pred: &[F],
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Vec<F>> {
    check_pair(s, t, t_prev, x_t.len(), eps_pred.len())?;
    Ok(ddim_transfer(x_t, eps_pred, t, t_prev, s))
}

/// Inverse of [`ddim_step`] for the same `eps_pred`: maps a state at `t_prev`
/// up to `t`.
pub fn ddim_invert_step<F: Float>(
    x_tprev: &[F],
    eps_pred: &[F],
    t_prev: usize,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Vec<F>> {
    check_pair(s, t, t_prev, x_tprev.len(), eps_pred.len())?;
    Ok(ddim_transfer(x_tprev, eps_pred, t_prev, t, s))
}

/// Strictly increasing timestep subsequence `0 = s_0 < ... < s_n = T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule(Vec<usize>);

impl StepSchedule {
    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn num_steps(&self) -> usize {
        self.0.len() - 1
    }

    /// `(t_prev, t)` pairs in increasing order.
    pub fn pairs(&self) -> impl DoubleEndedIterator<Item = (usize, usize)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }
}

pub fn make_step_schedule(timesteps: usize, num_steps: usize) -> Result<StepSchedule> {
    if num_steps == 0 || num_steps > timesteps {
        return Err(Error::OutOfRange(format!(
            "num_steps must be in 1..={timesteps}, got {num_steps}"
        )));
    }
    let mut steps: Vec<usize> = (0..=num_steps)
        .map(|i| (i as f64 * timesteps as f64 / num_steps as f64).round() as usize)
        .collect();
    steps.dedup();
    // Spacing is >= 1 so rounding cannot collide; the padding below only
    // guards against that assumption breaking.
    let mut next = 1;
    while steps.len() < num_steps + 1 {
        while steps.contains(&next) {
            next += 1;
        }
        steps.push(next);
        steps.sort_unstable();
    }
    Ok(StepSchedule(steps))
}
