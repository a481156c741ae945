//! Parametric bootstrap for debiased estimation and confidence intervals.
//!
//! Conditioning on the fitted model, each replicate draws fresh logistic
//! errors, generates outcomes
//!
//! ```text
//! y_i^b = 1{ pbar_hat_i * peer_hat + x_i' beta_hat + mu_hat_g > eps_i^b },
//! ```
//!
//! with the fitted mean peer beliefs held fixed, and re-estimates the slope
//! on the synthetic panel. With `Q*` the empirical quantile function of the
//! centered draws `c'(theta^b - theta_hat)`:
//!
//! ```text
//! debiased  = c' theta_hat - Q*(1/2)
//! interval  = [ c' theta_hat - Q*(1 - alpha/2),  c' theta_hat - Q*(alpha/2) ]
//! ```
//!
//! Replicates that fail to converge are dropped and counted; a report with
//! more than `max_failure_fraction` dropped replicates is marked unreliable.
//! Replicate error streams depend only on `(seed, replicate index)`, so
//! reports are identical for any worker count.

use serde::{Deserialize, Serialize};

use crate::data::{Panel, mean_peer_belief};
use crate::exec;
use crate::npl::{NplConfig, NplFit, NplInit, npl_fit};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Bootstrap knobs.
#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    /// Number of replicates `B`.
    pub replications: usize,
    /// Two-sided interval level (0.05 gives a 95 percent interval).
    pub alpha: f64,
    pub seed: u64,
    /// Fraction of dropped replicates above which the report is flagged.
    pub max_failure_fraction: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { replications: 500, alpha: 0.05, seed: 0, max_failure_fraction: 0.10 }
    }
}

/// Five-number summary of the centered bootstrap draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsSummary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Inference output for one linear contrast of the slope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceReport {
    pub contrast: Vec<f64>,
    /// `c' theta_hat`.
    pub point: f64,
    /// Median-debiased estimate.
    pub debiased: f64,
    pub ci: [f64; 2],
    pub alpha: f64,
    /// Requested replicate count `B`.
    pub replications: usize,
    /// Replicates dropped for non-convergence.
    pub failures: usize,
    pub unreliable: bool,
    pub draws_summary: DrawsSummary,
    /// Centered draws in replicate order (not serialized in reports).
    #[serde(skip)]
    pub draws: Vec<f64>,
}

/// Order-statistic quantile with linear interpolation at position
/// `(m - 1) q + 1` of the sorted draws (one-based).
pub fn empirical_quantile(draws: &[f64], q: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::InvalidConfig("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("quantile level {q} outside [0,1]")));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let w = h - lo as f64;
    Ok(sorted[lo] * (1.0 - w) + sorted[hi] * w)
}

/// Slope estimates from `B` synthetic replicates of the fitted scope.
/// `None` marks a dropped (non-converged or failed) replicate.
fn replicate_slopes(
    panel: &Panel,
    fit: &NplFit,
    config: &BootstrapConfig,
    npl_config: &NplConfig,
) -> Result<Vec<Option<nalgebra::DVector<f64>>>> {
    // Fitted utility indices, fixed across replicates (the fitted mean peer
    // beliefs are frozen; no equilibrium re-solve in data generation).
    let mut indices: Vec<Vec<f64>> = Vec::with_capacity(fit.scope.len());
    for (s, &g) in fit.scope.iter().enumerate() {
        let group = panel.group(g);
        let pbar = mean_peer_belief(group, &fit.ccp[s])?;
        let a = crate::npl::theta_part_indices(group, &fit.slope, &pbar);
        indices.push(a.iter().map(|ai| fit.fixed_effects[s] + ai).collect());
    }
    let warm = NplInit {
        ccp: Some(fit.ccp.clone()),
        slope: Some(fit.slope.clone()),
        fixed_effects: Some(fit.fixed_effects.clone()),
    };
    Ok(exec::map_indexed(config.replications, |b| {
        use rand::RngExt;
        let mut rng = rng::stream(config.seed, &[tag::BOOTSTRAP, b as u64]);
        let outcomes: Vec<Vec<u8>> = indices
            .iter()
            .map(|group_idx| {
                group_idx
                    .iter()
                    .map(|&index| {
                        // Logistic threshold draw by inverse CDF.
                        let u: f64 = rng.random();
                        let eps = u.ln() - (-u).ln_1p();
                        u8::from(index > eps)
                    })
                    .collect()
            })
            .collect();
        let replica = match panel.with_outcomes(&fit.scope, &outcomes) {
            Ok(p) => p,
            Err(_) => return None,
        };
        let scope: Vec<usize> = (0..replica.n_groups()).collect();
        match npl_fit(&replica, &scope, &warm, npl_config) {
            Ok(refit) if refit.converged => Some(refit.slope.as_vector()),
            _ => None,
        }
    }))
}

/// Shared quantile pipeline for one contrast given replicate slopes.
fn report_for_contrast(
    contrast: &[f64],
    point: f64,
    slopes: &[Option<nalgebra::DVector<f64>>],
    config: &BootstrapConfig,
) -> Result<InferenceReport> {
    let draws: Vec<f64> = slopes
        .iter()
        .flatten()
        .map(|theta_b| {
            contrast.iter().zip(theta_b.iter()).map(|(c, t)| c * t).sum::<f64>() - point
        })
        .collect();
    if draws.len() < 2 {
        return Err(Error::NonConvergence(format!(
            "only {} of {} bootstrap replicates converged",
            draws.len(),
            config.replications
        )));
    }
    let failures = config.replications - draws.len();
    let q = |p: f64| empirical_quantile(&draws, p);
    let debiased = point - q(0.5)?;
    let ci = [point - q(1.0 - config.alpha / 2.0)?, point - q(config.alpha / 2.0)?];
    let draws_summary = DrawsSummary {
        min: q(0.0)?,
        q25: q(0.25)?,
        median: q(0.5)?,
        q75: q(0.75)?,
        max: q(1.0)?,
    };
    Ok(InferenceReport {
        contrast: contrast.to_vec(),
        point,
        debiased,
        ci,
        alpha: config.alpha,
        replications: config.replications,
        failures,
        unreliable: (failures as f64) > config.max_failure_fraction * config.replications as f64,
        draws_summary,
        draws,
    })
}

/// Bootstrap inference for the contrast `c' theta` on a fitted scope.
pub fn bootstrap_contrast(
    panel: &Panel,
    fit: &NplFit,
    contrast: &[f64],
    config: &BootstrapConfig,
    npl_config: &NplConfig,
) -> Result<InferenceReport> {
    validate(fit, contrast.len(), config, panel)?;
    if contrast.iter().all(|&c| c == 0.0) {
        return Err(Error::InvalidConfig("zero contrast vector".into()));
    }
    let slopes = replicate_slopes(panel, fit, config, npl_config)?;
    let theta_hat = fit.slope.as_vector();
    let point: f64 = contrast.iter().zip(theta_hat.iter()).map(|(c, t)| c * t).sum();
    report_for_contrast(contrast, point, &slopes, config)
}

/// Coordinate-wise reports for every slope coefficient, sharing one set of
/// replicate refits. Identical to running [`bootstrap_contrast`] with each
/// unit vector.
pub fn bootstrap_coordinates(
    panel: &Panel,
    fit: &NplFit,
    config: &BootstrapConfig,
    npl_config: &NplConfig,
) -> Result<Vec<InferenceReport>> {
    let dim = fit.slope.dim();
    validate(fit, dim, config, panel)?;
    let slopes = replicate_slopes(panel, fit, config, npl_config)?;
    let theta_hat = fit.slope.as_vector();
    (0..dim)
        .map(|j| {
            let mut unit = vec![0.0; dim];
            unit[j] = 1.0;
            report_for_contrast(&unit, theta_hat[j], &slopes, config)
        })
        .collect()
}

fn validate(
    fit: &NplFit,
    contrast_len: usize,
    config: &BootstrapConfig,
    panel: &Panel,
) -> Result<()> {
    if config.replications < 2 {
        return Err(Error::InvalidConfig("bootstrap needs at least 2 replicates".into()));
    }
    if !(0.0 < config.alpha && config.alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {} outside (0,1)", config.alpha)));
    }
    if contrast_len != fit.slope.dim() {
        return Err(Error::Dimension(format!(
            "contrast length {contrast_len} vs slope dimension {}",
            fit.slope.dim()
        )));
    }
    if !fit.converged {
        return Err(Error::NonConvergence(
            "bootstrap requires a converged fit on the scope".into(),
        ));
    }
    for &g in &fit.scope {
        if g >= panel.n_groups() {
            return Err(Error::InvalidConfig(format!("fit scope group {g} out of range")));
        }
    }
    Ok(())
}
