//! Equilibrium choice probabilities for one group.
//!
//! The best-response map sends a belief profile `P` to
//!
//! ```text
//! gamma(P)_i = L(peer_effect * pbar_i(P) + x_i' * slopes + fixed_effect),
//! ```
//!
//! where `pbar_i` averages beliefs over `i`'s influencers. When
//! `|peer_effect| < 4` the map is a sup-norm contraction with modulus at most
//! `|peer_effect| / 4` (the logistic density is bounded by 1/4 and each
//! neighbor row averages to weight one), so plain successive substitution
//! converges geometrically to the unique fixed point. The solver rejects
//! `|peer_effect| >= 4` up front.

use rand::Rng;

use crate::data::{GroupData, mean_peer_belief};
use crate::logit::{GroupParams, logistic_cdf};
use crate::{Error, Result};

/// Solver knobs for the fixed-point iteration.
#[derive(Debug, Clone)]
pub struct EquilibriumConfig {
    /// Sup-norm residual target.
    pub tol: f64,
    /// Iteration budget; generous since convergence is geometric.
    pub max_iter: usize,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 10_000 }
    }
}

/// A solved belief profile with convergence evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct CcpProfile {
    /// Fixed-point beliefs, strictly inside (0, 1).
    pub values: Vec<f64>,
    /// Last sup-norm residual `max_i |P_i - gamma(P)_i|`.
    pub residual: f64,
    /// Iterations used.
    pub iterations: usize,
}

/// One application of the best-response map.
pub fn gamma_map(group: &GroupData, params: &GroupParams, ccp: &[f64]) -> Result<Vec<f64>> {
    let pbar = mean_peer_belief(group, ccp)?;
    if params.slope.covariate_slopes.len() != group.p() {
        return Err(Error::Dimension(format!(
            "{} covariate slopes for {} covariates",
            params.slope.covariate_slopes.len(),
            group.p()
        )));
    }
    let x = group.x();
    let mut out = Vec::with_capacity(group.n());
    for i in 0..group.n() {
        let mut idx = params.fixed_effect + params.slope.peer_effect * pbar[i];
        for j in 0..group.p() {
            idx += x[(i, j)] * params.slope.covariate_slopes[j];
        }
        out.push(logistic_cdf(idx));
    }
    Ok(out)
}

/// Solve `P = gamma(P)` by successive substitution.
///
/// Default start is the flat profile 0.5. Requires `|peer_effect| < 4`, the
/// moderate-interactions region where the fixed point exists and is unique.
pub fn solve_equilibrium(
    group: &GroupData,
    params: &GroupParams,
    init: Option<&[f64]>,
    config: &EquilibriumConfig,
) -> Result<CcpProfile> {
    if params.slope.peer_effect.abs() >= 4.0 {
        return Err(Error::InvalidConfig(format!(
            "peer effect {} outside the contraction region (|peer effect| < 4)",
            params.slope.peer_effect
        )));
    }
    let mut current: Vec<f64> = match init {
        Some(v) => {
            if v.len() != group.n() {
                return Err(Error::Dimension(format!(
                    "initial profile has length {}, group has {} individuals",
                    v.len(),
                    group.n()
                )));
            }
            v.to_vec()
        }
        None => vec![0.5; group.n()],
    };
    for it in 1..=config.max_iter {
        let next = gamma_map(group, params, &current)?;
        let mut residual: f64 = 0.0;
        for (a, b) in current.iter().zip(&next) {
            residual = residual.max((a - b).abs());
        }
        current = next;
        if residual <= config.tol {
            return Ok(CcpProfile { values: current, residual, iterations: it });
        }
    }
    Err(Error::NonConvergence(format!(
        "equilibrium for group '{}' not within {:e} after {} iterations",
        group.group_id(),
        config.tol,
        config.max_iter
    )))
}

/// Draw binary outcomes from the model at the given equilibrium beliefs.
///
/// Each outcome is `1` when the utility index exceeds an independent standard
/// logistic draw, generated by inverse CDF from a uniform variate; this is the
/// Bernoulli(`L(index_i)`) law in latent-threshold form.
pub fn simulate_outcomes<R: Rng>(
    group: &GroupData,
    params: &GroupParams,
    equilibrium_ccp: &[f64],
    rng: &mut R,
) -> Result<Vec<u8>> {
    use rand::RngExt;
    let pbar = mean_peer_belief(group, equilibrium_ccp)?;
    let x = group.x();
    let mut out = Vec::with_capacity(group.n());
    for i in 0..group.n() {
        let mut idx = params.fixed_effect + params.slope.peer_effect * pbar[i];
        for j in 0..group.p() {
            idx += x[(i, j)] * params.slope.covariate_slopes[j];
        }
        let u: f64 = rng.random();
        let eps = u.ln() - (-u).ln_1p();
        out.push(u8::from(idx > eps));
    }
    Ok(out)
}
