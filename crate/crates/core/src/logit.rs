//! Logistic pseudo-likelihood core.
//!
//! For individual `i` in a group, the utility index is
//!
//! ```text
//! index_i = pbar_i * peer_effect + x_i' * covariate_slopes + fixed_effect,
//! ```
//!
//! where `pbar_i` is the mean choice probability over `i`'s influencers. The
//! negative log-likelihood of an observed choice `y_i` is
//!
//! ```text
//! nll_i = -y_i * ln L(index_i) - (1 - y_i) * ln(1 - L(index_i)),
//! ```
//!
//! with `L` the standard logistic CDF. Group and panel objectives average
//! `nll_i` over individuals and groups. Derivatives treat the belief profile
//! as fixed data: the sequential estimator minimizes the pseudo-likelihood at
//! frozen beliefs and updates beliefs in a separate step, so the estimation
//! gradient never differentiates through the equilibrium map.
//!
//! Parameter order in gradients and Hessians is
//! `(fixed_effect, peer_effect, covariate_slopes...)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{GroupData, Panel, mean_peer_belief};
use crate::{Error, Result};

/// Common slope parameters: the peer effect and the covariate slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeParams {
    /// Coefficient on the mean influencer choice probability.
    pub peer_effect: f64,
    /// Coefficients on the individual covariates.
    pub covariate_slopes: DVector<f64>,
}

impl SlopeParams {
    pub fn new(peer_effect: f64, covariate_slopes: DVector<f64>) -> Self {
        Self { peer_effect, covariate_slopes }
    }

    pub fn zeros(p: usize) -> Self {
        Self { peer_effect: 0.0, covariate_slopes: DVector::zeros(p) }
    }

    /// Slope dimension `1 + p`.
    pub fn dim(&self) -> usize {
        1 + self.covariate_slopes.len()
    }

    /// Stacked vector `(peer_effect, covariate_slopes...)`.
    pub fn as_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v[0] = self.peer_effect;
        v.rows_mut(1, self.covariate_slopes.len()).copy_from(&self.covariate_slopes);
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self { peer_effect: v[0], covariate_slopes: v.rows(1, v.len() - 1).into_owned() }
    }
}

/// Per-group parameters: the group fixed effect plus the slope block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub fixed_effect: f64,
    pub slope: SlopeParams,
}

impl GroupParams {
    pub fn new(fixed_effect: f64, slope: SlopeParams) -> Self {
        Self { fixed_effect, slope }
    }
}

/// Standard logistic CDF, stable over the full finite range.
pub fn logistic_cdf(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }
}

/// Negative log-likelihood of one binary observation at the given index.
pub fn nll_individual(y: u8, index: f64) -> f64 {
    if y == 1 { softplus(-index) } else { softplus(index) }
}

/// Utility indices for every individual in a group at the given parameters
/// and (frozen) mean peer beliefs.
pub(crate) fn linear_indices(
    group: &GroupData,
    fixed_effect: f64,
    slope: &SlopeParams,
    pbar: &[f64],
) -> Vec<f64> {
    let x = group.x();
    let p = group.p();
    let mut out = Vec::with_capacity(group.n());
    for i in 0..group.n() {
        let mut idx = fixed_effect + slope.peer_effect * pbar[i];
        for j in 0..p {
            idx += x[(i, j)] * slope.covariate_slopes[j];
        }
        out.push(idx);
    }
    out
}

/// Group objective at frozen `pbar`: the mean individual negative
/// log-likelihood.
pub(crate) fn group_nll_at(
    group: &GroupData,
    fixed_effect: f64,
    slope: &SlopeParams,
    pbar: &[f64],
) -> f64 {
    let y = group.y();
    let idx = linear_indices(group, fixed_effect, slope, pbar);
    let mut acc = 0.0;
    for i in 0..group.n() {
        acc += nll_individual(y[i], idx[i]);
    }
    acc / group.n() as f64
}

/// Analytic gradient and Hessian of the group objective over
/// `(fixed_effect, peer_effect, covariate_slopes)` at frozen `pbar`.
///
/// With `r_i = L(index_i) - y_i`, `w_i = L(index_i)(1 - L(index_i))` and
/// `z_i = (1, pbar_i, x_i)`:
///
/// ```text
/// grad = (1/n) sum_i r_i z_i,      hess = (1/n) sum_i w_i z_i z_i'.
/// ```
pub(crate) fn group_grad_hess_at(
    group: &GroupData,
    fixed_effect: f64,
    slope: &SlopeParams,
    pbar: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let d = 2 + group.p();
    let y = group.y();
    let x = group.x();
    let idx = linear_indices(group, fixed_effect, slope, pbar);
    let mut grad = DVector::<f64>::zeros(d);
    let mut hess = DMatrix::<f64>::zeros(d, d);
    let mut z = vec![0.0; d];
    for i in 0..group.n() {
        let lam = logistic_cdf(idx[i]);
        let r = lam - f64::from(y[i]);
        let w = lam * (1.0 - lam);
        z[0] = 1.0;
        z[1] = pbar[i];
        for j in 0..group.p() {
            z[2 + j] = x[(i, j)];
        }
        for a in 0..d {
            grad[a] += r * z[a];
            let wz = w * z[a];
            for b in a..d {
                hess[(a, b)] += wz * z[b];
            }
        }
    }
    let n = group.n() as f64;
    grad /= n;
    for a in 0..d {
        for b in a..d {
            let v = hess[(a, b)] / n;
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    (grad, hess)
}

/// Mean negative log-likelihood of a group given a belief profile.
pub fn group_nll(group: &GroupData, params: &GroupParams, ccp: &[f64]) -> Result<f64> {
    check_dims(group, params, ccp)?;
    let pbar = mean_peer_belief(group, ccp)?;
    Ok(group_nll_at(group, params.fixed_effect, &params.slope, &pbar))
}

/// Analytic gradient and Hessian of [`group_nll`] over
/// `(fixed_effect, peer_effect, covariate_slopes)`, beliefs held fixed.
pub fn group_nll_grad_hess(
    group: &GroupData,
    params: &GroupParams,
    ccp: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_dims(group, params, ccp)?;
    let pbar = mean_peer_belief(group, ccp)?;
    Ok(group_grad_hess_at(group, params.fixed_effect, &params.slope, &pbar))
}

/// Mean of [`group_nll`] over the groups of a panel.
pub fn panel_nll(panel: &Panel, params: &[GroupParams], ccps: &[Vec<f64>]) -> Result<f64> {
    if params.len() != panel.n_groups() || ccps.len() != panel.n_groups() {
        return Err(Error::Dimension(format!(
            "panel has {} groups, got {} parameter sets and {} belief profiles",
            panel.n_groups(),
            params.len(),
            ccps.len()
        )));
    }
    let mut acc = 0.0;
    for (g, group) in panel.groups().iter().enumerate() {
        acc += group_nll(group, &params[g], &ccps[g])?;
    }
    Ok(acc / panel.n_groups() as f64)
}

fn check_dims(group: &GroupData, params: &GroupParams, ccp: &[f64]) -> Result<()> {
    if ccp.len() != group.n() {
        return Err(Error::Dimension(format!(
            "belief profile has length {}, group has {} individuals",
            ccp.len(),
            group.n()
        )));
    }
    if params.slope.covariate_slopes.len() != group.p() {
        return Err(Error::Dimension(format!(
            "{} covariate slopes for {} covariates",
            params.slope.covariate_slopes.len(),
            group.p()
        )));
    }
    Ok(())
}
