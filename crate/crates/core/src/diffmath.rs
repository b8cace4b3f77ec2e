//! Noise schedules and deterministic DDIM arithmetic.
//!
//! Timestep `0` is a virtual clean state with `alpha_bar[0] = 1`, so the
//! forward process at `t = 0` is the identity. Training timesteps are
//! `1..=num_train_steps`.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Per-step beta linear in `t` from 1e-4 to 0.02.
    Linear,
    /// Squared-cosine cumulative schedule with offset 0.008.
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Linear => f.write_str("linear"),
            ScheduleKind::Cosine => f.write_str("cosine"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Cumulative signal coefficients `alpha_bar[t]` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

/// The unclipped squared-cosine cumulative curve, `f(t) / f(0)`.
pub fn cosine_alpha_bar(t: f64, num_train_steps: usize) -> f64 {
    let f = |t: f64| {
        let x = (t / num_train_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    f(t) / f(0.0)
}

pub fn make_schedule(num_train_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if num_train_steps < 2 {
        return Err(Error::invalid(format!(
            "num_train_steps must be at least 2, got {num_train_steps}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let span = (num_train_steps - 1) as f64;
            (0..num_train_steps)
                .map(|i| {
                    LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / span
                })
                .collect()
        }
        ScheduleKind::Cosine => (1..=num_train_steps)
            .map(|t| {
                let prev = cosine_alpha_bar((t - 1) as f64, num_train_steps);
                let cur = cosine_alpha_bar(t as f64, num_train_steps);
                (1.0 - cur / prev).min(COSINE_MAX_BETA)
            })
            .collect(),
    };
    let mut alpha_bar = Vec::with_capacity(num_train_steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for beta in betas {
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, alpha_bar })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn num_train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.num_train_steps() })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }
}

fn zip_map<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor<T>> {
    a.ensure_same_shape(b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let v = f(x.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
            T::from(v).unwrap_or_else(T::nan)
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * z`.
pub fn forward_noise<T: Float>(
    x0: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (signal, noise) = s.coefficients(t)?;
    zip_map(x0, z, |x, z| signal * x + noise * z)
}

/// Solve the forward process for the clean sample given the noise.
pub fn predict_x0<T: Float>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (signal, noise) = s.coefficients(t)?;
    zip_map(x_t, eps, |x, e| (x - noise * e) / signal)
}

fn ddim_move<T: Float>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    from: usize,
    to: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (sig_from, noise_from) = s.coefficients(from)?;
    let (sig_to, noise_to) = s.coefficients(to)?;
    zip_map(x, eps, |x, e| {
        let x0_hat = (x - noise_from * e) / sig_from;
        sig_to * x0_hat + noise_to * e
    })
}

/// One deterministic (eta = 0) DDIM update from `t` down to `t_prev`.
pub fn ddim_step<T: Float>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t <= t_prev {
        return Err(Error::invalid(format!("ddim_step needs t > t_prev, got {t} -> {t_prev}")));
    }
    ddim_move(x_t, eps, t, t_prev, s)
}

/// The DDIM update run upwards, from `t` to the noisier `t_next`.
pub fn ddim_invert_step<T: Float>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_next: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_next <= t {
        return Err(Error::invalid(format!(
            "ddim_invert_step needs t_next > t, got {t} -> {t_next}"
        )));
    }
    ddim_move(x_t, eps, t, t_next, s)
}

/// Sampling timesteps from high noise down to the clean state.
///
/// `timesteps` holds `count + 1` strictly decreasing entries whose last entry
/// is `0`. Sampling step `i` evaluates the denoiser at `timesteps[i]` and moves
/// to `timesteps[i + 1]`; the final move lands on `t = 0`, where the DDIM
/// update reduces to the predicted clean sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    timesteps: Vec<usize>,
}

impl TimestepPlan {
    pub fn from_timesteps(timesteps: Vec<usize>) -> Result<Self> {
        if timesteps.len() < 2 || timesteps.last() != Some(&0) {
            return Err(Error::invalid("a plan needs at least one step and must end at 0"));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("plan timesteps must be strictly decreasing"));
        }
        Ok(Self { timesteps })
    }

    /// `n_steps` evenly spaced steps from `t_start` down to 0.
    pub fn starting_at(t_start: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || n_steps > t_start {
            return Err(Error::invalid(format!(
                "n_steps must be in 1..={t_start}, got {n_steps}"
            )));
        }
        let timesteps = (0..=n_steps)
            .map(|i| {
                let num = (n_steps - i) * t_start;
                (num + n_steps / 2) / n_steps
            })
            .collect();
        Self::from_timesteps(timesteps)
    }

    /// All entries including the terminal `0`.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Number of sampling steps.
    pub fn count(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// Timesteps at which the denoiser is evaluated while sampling.
    pub fn sampling_timesteps(&self) -> &[usize] {
        &self.timesteps[..self.count()]
    }

    pub fn first(&self) -> usize {
        self.timesteps[0]
    }

    /// `(t, t_prev)` pairs in sampling order.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps.windows(2).map(|w| (w[0], w[1]))
    }

    /// `(t, t_next)` pairs in inversion order, from the clean state upwards.
    pub fn inversion_transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps.windows(2).rev().map(|w| (w[1], w[0]))
    }

    /// Index of the sampling step whose timestep is `t`.
    pub fn step_of(&self, t: usize) -> Option<usize> {
        self.sampling_timesteps().iter().position(|&x| x == t)
    }
}

pub fn make_plan(s: &NoiseSchedule, n_steps: usize) -> Result<TimestepPlan> {
    let total = s.num_train_steps();
    if n_steps == 0 || n_steps > total {
        return Err(Error::invalid(format!("n_steps must be in 1..={total}, got {n_steps}")));
    }
    TimestepPlan::starting_at(total, n_steps)
}
