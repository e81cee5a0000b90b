//! Adaptive noising: a per-input line search over the SmoothTaylor noise
//! scale that minimizes AUPC or AUTVC.

use serde::{Deserialize, Serialize};

use crate::attribution::{smooth_taylor, NoiseConfig};
use crate::autodiff::{Model, ScoreTarget};
use crate::error::{Error, Result};
use crate::perturbation::{aupc, perturbation_game, PerturbEvalConfig};
use crate::saliency::{autvc, multiscale_tv_curve, to_saliency, PyramidOptions};
use crate::tensor::{Tensor, ValueRange};

/// Smallest noise scale the search will evaluate.
pub const MIN_SIGMA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Aupc,
    Autvc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub learning_decay: f64,
    pub max_stop_count: usize,
    pub objective: Objective,
    pub roots: usize,
    pub seed: u64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            max_iterations: 20,
            learning_rate: 0.1,
            learning_decay: 0.9,
            max_stop_count: 3,
            objective: Objective::Aupc,
            roots: 150,
            seed: 0,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.learning_decay > 0.0 && self.learning_decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_decay must lie in (0, 1), got {}",
                self.learning_decay
            )));
        }
        if self.roots == 0 {
            return Err(Error::InvalidArgument("roots must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub sigma: f64,
    pub auc: f64,
    pub alpha: f64,
    pub stop_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveTrace {
    pub iterations: Vec<TraceRow>,
    pub initial_sigma: f64,
    pub initial_auc: f64,
    pub best_sigma: f64,
    pub best_auc: f64,
    /// Whether the search ended on the stop count rather than `max_iterations`.
    pub stopped_early: bool,
}

impl AdaptiveTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,sigma,auc,alpha,stop_count\n");
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.sigma, r.auc, r.alpha, r.stop_count
            ));
        }
        out
    }
}

/// Settings shared by every objective evaluation of a search.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub perturb: PerturbEvalConfig,
    pub pyramid: PyramidOptions,
    pub range: ValueRange,
}

/// Line search over `sigma` driven by an arbitrary objective.
///
/// Each iteration probes `|σ + α|`; if that is worse than the previous value
/// the search steps to `|σ - α|` instead. When the accepted step is still
/// worse than the previous value, `α` decays by `γ` and the stop count grows;
/// once the stop count exceeds `max_stop_count` the search ends. Any other
/// step resets the stop count and updates the best value seen.
pub fn line_search<F>(initial_sigma: f64, cfg: &AdaptiveConfig, mut objective: F) -> Result<AdaptiveTrace>
where
    F: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    let mut eval = |sigma: f64| -> Result<f64> {
        let v = objective(sigma)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective at sigma {sigma}")));
        }
        Ok(v)
    };
    let mut sigma = initial_sigma.max(MIN_SIGMA);
    let mut auc = eval(sigma)?;
    let (initial_sigma, initial_auc) = (sigma, auc);
    let (mut best_sigma, mut best_auc) = (sigma, auc);
    let mut alpha = cfg.learning_rate;
    let mut stop = 0usize;
    let mut rows = Vec::new();
    let mut stopped_early = false;

    for i in 1..=cfg.max_iterations {
        let mut auc_s = eval((sigma + alpha).abs())?;
        if auc_s > auc {
            sigma = (sigma - alpha).abs().max(MIN_SIGMA);
            auc_s = eval(sigma)?;
        } else {
            sigma = (sigma + alpha).abs();
        }

        let mut halt = false;
        if auc_s > auc {
            if stop <= cfg.max_stop_count {
                alpha *= cfg.learning_decay;
                stop += 1;
            } else {
                halt = true;
            }
        } else {
            stop = 0;
            if auc_s < best_auc {
                best_auc = auc_s;
                best_sigma = sigma;
            }
        }
        rows.push(TraceRow {
            iteration: i,
            sigma,
            auc: auc_s,
            alpha,
            stop_count: stop,
        });
        if halt {
            stopped_early = true;
            break;
        }
        auc = auc_s;
    }
    Ok(AdaptiveTrace {
        iterations: rows,
        initial_sigma,
        initial_auc,
        best_sigma,
        best_auc,
        stopped_early,
    })
}

/// SmoothTaylor map at `sigma`, scored by the chosen objective.
pub fn compute_auc(
    model: &Model,
    x: &Tensor,
    target: ScoreTarget,
    sigma: f64,
    cfg: &AdaptiveConfig,
    ctx: &EvalContext,
) -> Result<f64> {
    let noise = NoiseConfig::new(sigma, cfg.roots, cfg.seed);
    let attr = smooth_taylor(model, x, target, &noise)?;
    evaluate_objective(model, x, target, &attr, cfg.objective, ctx)
}

pub fn evaluate_objective(
    model: &Model,
    x: &Tensor,
    target: ScoreTarget,
    attr: &crate::attribution::AttributionMap,
    objective: Objective,
    ctx: &EvalContext,
) -> Result<f64> {
    match objective {
        Objective::Aupc => aupc(&perturbation_game(model, x, attr, target, &ctx.range, &ctx.perturb)?),
        Objective::Autvc => {
            let s = to_saliency(attr)?;
            if s.degenerate {
                return Ok(0.0);
            }
            autvc(&multiscale_tv_curve(&s, &ctx.pyramid))
        }
    }
}

/// Mean absolute value over all elements of `x`, the starting noise scale.
pub fn initial_sigma(x: &Tensor) -> f64 {
    let mean = x.data().iter().map(|v| (*v as f64).abs()).sum::<f64>() / x.len() as f64;
    mean.max(MIN_SIGMA)
}

/// Searches for the noise scale that minimizes the configured objective on
/// `x`. Every probe reuses the same seeds.
pub fn adaptive_noise_search(
    model: &Model,
    x: &Tensor,
    target: ScoreTarget,
    cfg: &AdaptiveConfig,
    ctx: &EvalContext,
) -> Result<AdaptiveTrace> {
    line_search(initial_sigma(x), cfg, |sigma| {
        compute_auc(model, x, target, sigma, cfg, ctx)
    })
}
