//! Confidence-based early exit.
//!
//! After every timestep the edge sees the decision logits (running mean of
//! the per-step logits so far), turns them into probabilities and stops once
//! the top probability reaches `alpha`. At `t_max` it stops regardless.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExitError {
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    Alpha(f64),
    #[error("t_max must be at least 1")]
    TMax,
    #[error("timestep {t} outside 1..={t_max}")]
    Timestep { t: usize, t_max: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("empty vector")]
    Empty,
    #[error("probabilities sum to {0}, not 1")]
    NotDistribution(f64),
    #[error("expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },
}

/// Default confidence threshold.
pub const DEFAULT_ALPHA: f64 = 0.9;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitPolicy {
    alpha: f64,
    t_max: usize,
}

impl ExitPolicy {
    pub fn new(alpha: f64, t_max: usize) -> Result<Self, ExitError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ExitError::Alpha(alpha));
        }
        if t_max == 0 {
            return Err(ExitError::TMax);
        }
        Ok(Self { alpha, t_max })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }
}

/// How a session decides when to stop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExitRule {
    /// Always run all `t_max` timesteps.
    Fixed { t_max: usize },
    Dynamic(ExitPolicy),
}

impl ExitRule {
    pub fn fixed(t_max: usize) -> Result<Self, ExitError> {
        if t_max == 0 {
            return Err(ExitError::TMax);
        }
        Ok(ExitRule::Fixed { t_max })
    }

    pub fn t_max(&self) -> usize {
        match self {
            ExitRule::Fixed { t_max } => *t_max,
            ExitRule::Dynamic(p) => p.t_max(),
        }
    }

    pub fn decide(&self, cs: f64, t: usize) -> Result<Decision, ExitError> {
        match self {
            ExitRule::Fixed { t_max } => {
                check_t(t, *t_max)?;
                Ok(if t == *t_max {
                    Decision::ForcedExit
                } else {
                    Decision::Continue
                })
            }
            ExitRule::Dynamic(p) => should_exit(cs, t, p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Exit,
    Continue,
    ForcedExit,
}

impl Decision {
    pub fn is_stop(self) -> bool {
        self != Decision::Continue
    }
}

fn check_finite(y: &[f64]) -> Result<(), ExitError> {
    if y.is_empty() {
        return Err(ExitError::Empty);
    }
    match y.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ExitError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_t(t: usize, t_max: usize) -> Result<(), ExitError> {
    if t == 0 || t > t_max {
        return Err(ExitError::Timestep { t, t_max });
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(y: &[f64]) -> Result<Vec<f64>, ExitError> {
    check_finite(y)?;
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

pub fn confidence_score(p: &[f64]) -> Result<f64, ExitError> {
    check_finite(p)?;
    if let Some(i) = p.iter().position(|v| *v < 0.0) {
        return Err(ExitError::NonFinite(i));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(ExitError::NotDistribution(s));
    }
    Ok(p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn should_exit(cs: f64, t: usize, policy: &ExitPolicy) -> Result<Decision, ExitError> {
    check_t(t, policy.t_max)?;
    Ok(if t == policy.t_max {
        Decision::ForcedExit
    } else if cs >= policy.alpha {
        Decision::Exit
    } else {
        Decision::Continue
    })
}

/// `t_exit` for a full confidence sequence of length `t_max`.
pub fn exit_timestep(cs_seq: &[f64], policy: &ExitPolicy) -> Result<usize, ExitError> {
    if cs_seq.len() != policy.t_max {
        return Err(ExitError::Length {
            expected: policy.t_max,
            actual: cs_seq.len(),
        });
    }
    for (i, &cs) in cs_seq.iter().enumerate() {
        if should_exit(cs, i + 1, policy)?.is_stop() {
            return Ok(i + 1);
        }
    }
    unreachable!("t_max always stops")
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Per-timestep logits and their running mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogitsRecord {
    steps: Vec<Vec<f32>>,
    sum: Vec<f64>,
}

impl LogitsRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, y: &[f32]) -> Result<(), ExitError> {
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(ExitError::NonFinite(i));
        }
        if self.steps.is_empty() {
            self.sum = vec![0.0; y.len()];
        } else if y.len() != self.sum.len() {
            return Err(ExitError::Length {
                expected: self.sum.len(),
                actual: y.len(),
            });
        }
        for (s, v) in self.sum.iter_mut().zip(y) {
            *s += *v as f64;
        }
        self.steps.push(y.to_vec());
        Ok(())
    }

    pub fn timesteps(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> Option<&[f32]> {
        self.steps.get(t.wrapping_sub(1)).map(|v| v.as_slice())
    }

    /// Mean of the per-step logits so far, rounded to f32 (the wire type).
    pub fn decision_logits(&self) -> Vec<f32> {
        let n = self.steps.len().max(1) as f64;
        self.sum.iter().map(|s| (s / n) as f32).collect()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.sum.clear();
    }
}

/// Confidence and prediction of a decision-logit vector.
pub fn assess(logits: &[f32]) -> Result<(f64, usize), ExitError> {
    let y: Vec<f64> = logits.iter().map(|v| *v as f64).collect();
    let p = softmax(&y)?;
    let cs = confidence_score(&p)?;
    Ok((cs, argmax(&p).expect("nonempty")))
}
