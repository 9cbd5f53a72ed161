//! Plug-and-play steering: gradient perturbation of the key/value past
//! toward an attribute, KL-regularized against the unmodified distribution,
//! followed by geometric-mean fusion and top-k sampling.

mod generate;
mod perturb;

pub use generate::{generate_steered, generate_steered_ids, SteeredOutput};
pub use perturb::{perturb_past, steering_loss, PerturbOutcome, PoolContext};

use serde::{Deserialize, Serialize};

use crate::attributes::{AttrError, BowAttribute, LinearHead};
use crate::textmodel::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum SteerError {
    #[error("invalid steering parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite gradient during perturbation")]
    NonFiniteGradient,
    #[error("fused distribution has no mass")]
    DegenerateDistribution,
    #[error("input is not a probability distribution (sums to {0})")]
    NotADistribution(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attr(#[from] AttrError),
}

impl SteerError {
    pub fn name(&self) -> &'static str {
        match self {
            SteerError::InvalidParams(_) => "InvalidParams",
            SteerError::NonFiniteGradient => "NonFiniteGradient",
            SteerError::DegenerateDistribution => "DegenerateDistribution",
            SteerError::NotADistribution(_) => "NotADistribution",
            SteerError::Model(e) => e.name(),
            SteerError::Attr(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringParams {
    /// Step size α.
    pub alpha: f64,
    /// Gradient-norm exponent γ.
    pub gamma: f64,
    /// λ_KL
    pub kl_scale: f64,
    /// γ_gm; 1 samples from the perturbed distribution alone.
    pub gm_scale: f64,
    /// Update steps m per token.
    pub num_iterations: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub max_len: usize,
    /// Lookahead tokens fed to a discriminator.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SteeringParams {
    fn default() -> Self {
        SteeringParams {
            alpha: 0.04,
            gamma: 1.0,
            kl_scale: 0.01,
            gm_scale: 0.95,
            num_iterations: 1,
            top_k: 10,
            temperature: 1.0,
            max_len: 40,
            horizon: 1,
            seed: 0,
        }
    }
}

impl SteeringParams {
    /// α = 0 is accepted and reduces generation to plain sampling.
    pub fn validate(&self) -> Result<(), SteerError> {
        let bad = |m: &str| Err(SteerError::InvalidParams(m.into()));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.gm_scale) {
            return bad("gm_scale must lie in [0, 1]");
        }
        if self.num_iterations == 0 {
            return bad("num_iterations must be at least 1");
        }
        if !(self.kl_scale >= 0.0) {
            return bad("kl_scale must be non-negative");
        }
        if !self.gamma.is_finite() {
            return bad("gamma must be finite");
        }
        Ok(())
    }
}

/// Attribute model used as the steering objective.
#[derive(Debug, Clone, PartialEq)]
pub enum AttributeModel {
    Head(LinearHead),
    Bow(BowAttribute),
}

/// An attribute model plus the class to steer toward (ignored for bags).
#[derive(Debug, Clone, Copy)]
pub struct AttributeTarget<'a> {
    pub model: &'a AttributeModel,
    pub class: usize,
}

impl AttributeTarget<'_> {
    pub fn validate(&self, d_model: usize, vocab_size: usize) -> Result<(), SteerError> {
        match self.model {
            AttributeModel::Head(h) => {
                if h.dim() != d_model {
                    return Err(AttrError::DimensionMismatch { expected: d_model, found: h.dim() }.into());
                }
                if self.class >= h.num_classes() {
                    return Err(AttrError::LabelOutOfRange { label: self.class, classes: h.num_classes() }.into());
                }
            }
            AttributeModel::Bow(b) => {
                if let Some(&bad) = b.ids.iter().find(|&&i| i >= vocab_size) {
                    return Err(AttrError::DimensionMismatch { expected: vocab_size, found: bad }.into());
                }
            }
        }
        Ok(())
    }
}

/// Per generated token diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: usize,
    /// Attribute loss at ΔH = 0 and after the last update.
    pub loss_before: f64,
    pub loss_after: f64,
    /// Attribute loss at every iterate, `num_iterations + 1` entries.
    pub iteration_losses: Vec<f64>,
    /// KL(p̃‖p) of the final perturbed distribution.
    pub kl: f64,
    /// ‖ΔH‖ per layer, keys and values together.
    pub delta_norms: Vec<f64>,
    /// The perturbation failed and the unmodified distribution was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub steps: Vec<StepRecord>,
}

impl StepTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mean_kl(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.kl).sum::<f64>() / self.steps.len() as f64
    }
}

fn check_distribution(p: &[f64]) -> Result<(), SteerError> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|&x| !(x >= 0.0)) {
        return Err(SteerError::NotADistribution(s));
    }
    Ok(())
}

/// `normalize(p_mod^γ · p_unmod^(1−γ))`. The endpoints and identical inputs
/// return the corresponding input unchanged.
pub fn fuse(p_mod: &[f64], p_unmod: &[f64], gm_scale: f64) -> Result<Vec<f64>, SteerError> {
    if p_mod.len() != p_unmod.len() {
        return Err(AttrError::DimensionMismatch { expected: p_unmod.len(), found: p_mod.len() }.into());
    }
    if !(0.0..=1.0).contains(&gm_scale) {
        return Err(SteerError::InvalidParams("gm_scale must lie in [0, 1]".into()));
    }
    check_distribution(p_mod)?;
    check_distribution(p_unmod)?;
    if gm_scale == 1.0 || p_mod == p_unmod {
        return Ok(p_mod.to_vec());
    }
    if gm_scale == 0.0 {
        return Ok(p_unmod.to_vec());
    }
    let logs: Vec<f64> = p_mod
        .iter()
        .zip(p_unmod)
        .map(|(&a, &b)| if a > 0.0 && b > 0.0 { gm_scale * a.ln() + (1.0 - gm_scale) * b.ln() } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(SteerError::DegenerateDistribution);
    }
    let mut out: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_endpoints_and_fixed_point() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.3, 0.1];
        assert_eq!(fuse(&a, &b, 1.0).unwrap(), a);
        assert_eq!(fuse(&a, &b, 0.0).unwrap(), b);
        assert_eq!(fuse(&a, &a, 0.37).unwrap(), a);
        let f = fuse(&a, &b, 0.5).unwrap();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(f[0] > a[0] && f[0] < b[0]);
    }

    #[test]
    fn fuse_degenerate() {
        assert!(matches!(fuse(&[1.0, 0.0], &[0.0, 1.0], 0.5), Err(SteerError::DegenerateDistribution)));
        assert!(matches!(fuse(&[0.7, 0.7], &[0.5, 0.5], 0.5), Err(SteerError::NotADistribution(_))));
    }

    #[test]
    fn params_validation() {
        assert!(SteeringParams::default().validate().is_ok());
        assert!(SteeringParams { gm_scale: 1.5, ..Default::default() }.validate().is_err());
        assert!(SteeringParams { num_iterations: 0, ..Default::default() }.validate().is_err());
        assert!(SteeringParams { alpha: 0.0, ..Default::default() }.validate().is_ok());
    }
}
