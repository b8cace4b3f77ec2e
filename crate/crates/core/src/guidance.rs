//! Classifier-free guidance and negative-prompt blending.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `w * eps_cond + (1 - w) * eps_ref`. With `w == 1` returns `eps_cond` exactly.
pub fn cfg(eps_cond: &Tensor<f64>, eps_ref: &Tensor<f64>, w: f64) -> Result<Tensor<f64>> {
    eps_cond.ensure_same_shape(eps_ref)?;
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_cond.axpby(w, eps_ref, 1.0 - w)
}

/// `alpha * eps_empty + (1 - alpha) * eps_neg`, exact at both endpoints.
pub fn negative_mix(eps_empty: &Tensor<f64>, eps_neg: &Tensor<f64>, alpha: f64) -> Result<Tensor<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    eps_empty.ensure_same_shape(eps_neg)?;
    if alpha == 1.0 {
        return Ok(eps_empty.clone());
    }
    if alpha == 0.0 {
        return Ok(eps_neg.clone());
    }
    eps_empty.axpby(alpha, eps_neg, 1.0 - alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegScheduleKind {
    /// `alpha0 - t_frac`, clamped.
    Linear,
    /// `e^(-6 t_frac)`; `alpha0` is unused.
    Exponential,
    Constant,
}

impl fmt::Display for NegScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegScheduleKind::Linear => "linear",
            NegScheduleKind::Exponential => "exponential",
            NegScheduleKind::Constant => "constant",
        })
    }
}

impl FromStr for NegScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "exponential" => Ok(Self::Exponential),
            "constant" => Ok(Self::Constant),
            _ => Err(Error::invalid(format!("unknown negative-prompt schedule {s:?}"))),
        }
    }
}

/// Weight of the empty prompt in the reference prediction over a sampling run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegPromptSchedule {
    pub kind: NegScheduleKind,
    pub alpha0: f64,
}

impl NegPromptSchedule {
    pub const NEUTRAL: Self = Self { kind: NegScheduleKind::Constant, alpha0: 1.0 };

    pub fn linear(alpha0: f64) -> Self {
        Self { kind: NegScheduleKind::Linear, alpha0 }
    }

    pub fn exponential() -> Self {
        Self { kind: NegScheduleKind::Exponential, alpha0: 1.0 }
    }

    pub fn constant(alpha0: f64) -> Self {
        Self { kind: NegScheduleKind::Constant, alpha0 }
    }
}

/// `alpha` at sampling progress `t_frac` (0 at the first step, 1 at the last).
pub fn alpha_at(sched: &NegPromptSchedule, t_frac: f64) -> f64 {
    let a = match sched.kind {
        NegScheduleKind::Linear => sched.alpha0 - t_frac,
        NegScheduleKind::Exponential => (-6.0 * t_frac).exp(),
        NegScheduleKind::Constant => sched.alpha0,
    };
    a.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn cfg_endpoints() {
        let c = t(&[0.1, -2.0, 3.3]);
        let r = t(&[1.0, 0.5, -0.25]);
        assert_eq!(cfg(&c, &r, 1.0).unwrap(), c);
        assert!(cfg(&c, &c, 15.0).unwrap().max_abs_diff(&c) < 1e-12);
        assert!(cfg(&c, &t(&[1.0]), 2.0).is_err());
    }

    #[test]
    fn mix_endpoints_and_range() {
        let e = t(&[0.1, -2.0]);
        let n = t(&[1.0, 0.5]);
        assert_eq!(negative_mix(&e, &n, 1.0).unwrap(), e);
        assert_eq!(negative_mix(&e, &n, 0.0).unwrap(), n);
        assert!(negative_mix(&e, &n, 1.5).is_err());
        assert!(negative_mix(&e, &n, -0.1).is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(alpha_at(&NegPromptSchedule::linear(1.0), 0.0), 1.0);
        assert_eq!(alpha_at(&NegPromptSchedule::linear(0.75), 0.9), 0.0);
        assert_eq!(alpha_at(&NegPromptSchedule::exponential(), 0.0), 1.0);
        assert!((alpha_at(&NegPromptSchedule::exponential(), 1.0) - 0.002_478_752_176_666_358_4).abs() < 1e-15);
        assert_eq!(alpha_at(&NegPromptSchedule::NEUTRAL, 0.4), 1.0);
        for k in ["linear", "exponential", "constant"] {
            assert_eq!(k.parse::<NegScheduleKind>().unwrap().to_string(), k);
        }
    }
}
