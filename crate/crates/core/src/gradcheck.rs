//! Central-difference verification of analytic gradients.
//!
//! The checker perturbs sampled parameter elements by `+/- epsilon`,
//! re-evaluates the loss forward-only, and compares the quotient against the
//! gradient produced by one reverse pass. Elements whose perturbation flips
//! any discrete decision (a ReLU sign, a clamp, a top-k or landmark
//! selection) straddle a non-differentiable point and are excluded rather
//! than compared.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::DiscreteTrace;
use crate::embed::{fnv1a64, splitmix64};
use crate::error::CoreError;
use crate::params::ParameterStore;
use crate::Result;

/// Whether an evaluation should also populate gradient accumulators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    ForwardOnly,
    WithGradients,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Cap on checked elements; `0` checks every element. When sampling,
    /// every parameter still contributes at least one element.
    pub max_samples: usize,
    pub sample_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            tolerance: 1e-3,
            max_samples: 400,
            sample_seed: 17,
        }
    }
}

/// One element whose analytic/numeric gradients disagree beyond tolerance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ElementReport {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Elements excluded because the perturbation crossed a kink.
    pub skipped_nonsmooth: usize,
    pub max_rel_err: f64,
    pub worst: Option<ElementReport>,
    pub failures: Vec<ElementReport>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with the denominator floored so near-zero gradient pairs
/// compare on an absolute scale.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn sample_elements<F: Float>(
    store: &ParameterStore<F>,
    cfg: &GradCheckConfig,
) -> Vec<(String, usize)> {
    let total = store.element_count();
    let mut picks = Vec::new();
    if cfg.max_samples == 0 || total <= cfg.max_samples {
        for (path, value) in store.iter() {
            for i in 0..value.len() {
                picks.push((String::from(path), i));
            }
        }
        return picks;
    }
    for (path, value) in store.iter() {
        let len = value.len();
        let quota = ((cfg.max_samples * len) / total).max(1).min(len);
        let mut indices: Vec<usize> = (0..len).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(cfg.sample_seed ^ fnv1a64(path.as_bytes())));
        indices.shuffle(&mut rng);
        for &i in indices.iter().take(quota) {
            picks.push((String::from(path), i));
        }
    }
    picks
}

/// Verify every (sampled) parameter element of `store` against central
/// differences of `eval`. The closure must be a deterministic function of
/// the store; with [`GradMode::WithGradients`] it must also accumulate
/// gradients into the store before returning.
pub fn gradient_check<F: Float>(
    store: &mut ParameterStore<F>,
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(&mut ParameterStore<F>, GradMode) -> Result<(F, DiscreteTrace)>,
) -> Result<GradCheckReport> {
    store.zero_grads();
    let (loss0, _) = eval(store, GradMode::WithGradients)?;
    if !loss0.is_finite() {
        return Err(CoreError::numeric(
            "gradient check: loss is non-finite at the evaluation point",
        ));
    }
    let analytic: BTreeMap<String, Vec<f64>> = store
        .paths()
        .into_iter()
        .map(|path| {
            let g = store.grad(&path).expect("registered grad").to_f64();
            (path, g.data().to_vec())
        })
        .collect();

    let eps: F = crate::cast(cfg.epsilon);
    let two_eps = cfg.epsilon * 2.0;
    let mut report = GradCheckReport {
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
        tolerance: cfg.tolerance,
        passed: true,
    };

    for (path, index) in sample_elements(store, cfg) {
        store.nudge(&path, index, eps)?;
        let (loss_plus, trace_plus) = eval(store, GradMode::ForwardOnly)?;
        store.nudge(&path, index, -(eps + eps))?;
        let (loss_minus, trace_minus) = eval(store, GradMode::ForwardOnly)?;
        store.nudge(&path, index, eps)?;

        let lp = loss_plus.to_f64().unwrap_or(f64::NAN);
        let lm = loss_minus.to_f64().unwrap_or(f64::NAN);
        if !lp.is_finite() || !lm.is_finite() {
            let entry = ElementReport {
                path: path.clone(),
                index,
                analytic: analytic[&path][index],
                numeric: f64::NAN,
                rel_err: f64::INFINITY,
            };
            report.failures.push(entry.clone());
            report.worst = Some(entry);
            report.max_rel_err = f64::INFINITY;
            report.passed = false;
            continue;
        }
        if trace_plus != trace_minus {
            report.skipped_nonsmooth += 1;
            continue;
        }

        let numeric = (lp - lm) / two_eps;
        let a = analytic[&path][index];
        let err = rel_err(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(ElementReport {
                path: path.clone(),
                index,
                analytic: a,
                numeric,
                rel_err: err,
            });
        }
        if err > cfg.tolerance {
            report.passed = false;
            report.failures.push(ElementReport {
                path: path.clone(),
                index,
                analytic: a,
                numeric,
                rel_err: err,
            });
        }
    }
    Ok(report)
}
