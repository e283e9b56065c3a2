//! Adam with weight decay, and per-parameter gradient clipping.
//!
//! Parameters and gradients are passed as flat buffers in a fixed order; the
//! optimizer keeps one moment pair per buffer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Where weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// AdamW: `p ← p − lr·wd·p`, separate from the adaptive step.
    #[default]
    Decoupled,
    /// L2 penalty folded into the gradient: `g ← g + wd·p`.
    Coupled,
}

impl fmt::Display for DecayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayMode::Decoupled => "decoupled",
            DecayMode::Coupled => "coupled",
        })
    }
}

impl FromStr for DecayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decoupled" => Ok(Self::Decoupled),
            "coupled" => Ok(Self::Coupled),
            other => Err(format!("unknown optimizer mode {other:?} (expected decoupled or coupled)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mode: DecayMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            mode: DecayMode::Decoupled,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |what: &str| Err(OptimError::Config(what.to_owned()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in {param} at element {index}: {value}")]
    NonFiniteGradient { param: String, index: usize, value: f64 },
    #[error("expected {expected} buffers, got {found}")]
    BufferCount { expected: usize, found: usize },
    #[error("buffer {index}: parameter has {param} elements, gradient has {grad}")]
    BufferLength { index: usize, param: usize, grad: usize },
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real> {
    pub config: OptimConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> OptimState<T> {
    /// Zeroed moments shaped like `sizes`.
    pub fn new(config: OptimConfig, sizes: &[usize]) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            config,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        })
    }

    /// One update of every buffer in `params`.
    ///
    /// All gradients are checked before anything changes, so a rejected step
    /// leaves parameters and moments untouched. `names` labels diagnostics.
    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>], names: &[String]) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::BufferCount {
                expected: self.m.len(),
                found: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(OptimError::BufferLength {
                    index: i,
                    param: p.len(),
                    grad: g.len(),
                });
            }
            if let Some((j, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                    index: j,
                    value: v.as_f64(),
                });
            }
        }

        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, wd, eps) = (T::of(c.lr), T::of(c.weight_decay), T::of(c.eps));
        let shrink = T::one() - lr * wd;

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.len() {
                let mut gk = g[k];
                match c.mode {
                    DecayMode::Coupled => gk += wd * p[k],
                    DecayMode::Decoupled => p[k] *= shrink,
                }
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn l2_norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Rescales each gradient independently so its own L2 norm is at most
/// `max_norm`. Returns the norms measured before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> Vec<f64> {
    grads
        .iter_mut()
        .map(|g| {
            let norm = l2_norm(g);
            if norm > max_norm {
                let scale = T::of(max_norm / (norm + 1e-6));
                g.iter_mut().for_each(|x| *x *= scale);
            }
            norm
        })
        .collect()
}
