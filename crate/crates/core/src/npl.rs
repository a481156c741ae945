//! Sequential pseudo-likelihood estimation with group fixed effects.
//!
//! The estimator alternates two steps until the belief profile stabilizes:
//!
//! 1. minimize the pooled objective `(1/S) sum_g Psi_g(mu_g, theta; P)` over
//!    all fixed effects and the common slope, beliefs `P` frozen;
//! 2. update beliefs individual by individual,
//!    `P_i <- L(x_i' beta + mu_g + pbar_i * peer_effect)`, where `pbar_i` is
//!    computed from the previous profile.
//!
//! The stop rule is `max_{i,g} |P_i^new - P_i^old| <= ccp_tol`.
//!
//! Step 1 exploits the arrow structure of the Hessian: each `mu_g` is solved
//! exactly by a safeguarded one-dimensional Newton given the slope, and the
//! slope takes damped Newton steps on the profile objective whose curvature
//! is the Schur complement
//!
//! ```text
//! Hq = (1/S) sum_g [ H_tt_g - c_g c_g' / d_g ],
//! ```
//!
//! with `H_tt_g`, `c_g`, `d_g` the slope, cross, and fixed-effect blocks of
//! the group Hessian. Groups whose fixed effect sits on the box boundary
//! contribute no Schur correction.
//!
//! Fixed effects live in a box `[-mu_bound, mu_bound]`; separated groups land
//! on the boundary and are flagged rather than rejected. The peer effect is
//! projected into the open contraction interval `(-4, 4)`.

use nalgebra::{DMatrix, DVector};

use crate::data::{GroupData, Panel, mean_peer_belief};
use crate::equilibrium::{EquilibriumConfig, solve_equilibrium};
use crate::exec;
use crate::logit::{GroupParams, SlopeParams, logistic_cdf, nll_individual};
use crate::{Error, Result};

/// Margin keeping the projected peer effect strictly inside the contraction
/// region.
const PEER_EFFECT_MARGIN: f64 = 1e-6;

/// Estimation knobs. Defaults follow the estimator's reference settings:
/// belief tolerance 1e-5, 500 outer iterations, fixed-effect box 10.
#[derive(Debug, Clone)]
pub struct NplConfig {
    /// Outer stop rule on the belief profile change.
    pub ccp_tol: f64,
    /// Outer iteration budget.
    pub max_outer: usize,
    /// Gradient tolerance for the inner slope minimization.
    pub inner_grad_tol: f64,
    /// Newton iteration budget for the inner minimization.
    pub max_inner: usize,
    /// Box bound for fixed effects.
    pub mu_bound: f64,
    /// Hold the peer effect fixed at this value (None estimates it).
    pub fix_peer_effect: Option<f64>,
    /// Re-solve the equilibrium at the fitted parameters before returning.
    pub polish_ccp: bool,
    /// Equilibrium solver settings used by the polish step.
    pub equilibrium: EquilibriumConfig,
}

impl Default for NplConfig {
    fn default() -> Self {
        Self {
            ccp_tol: 1e-5,
            max_outer: 500,
            inner_grad_tol: 1e-9,
            max_inner: 60,
            mu_bound: 10.0,
            fix_peer_effect: None,
            polish_ccp: true,
            equilibrium: EquilibriumConfig::default(),
        }
    }
}

/// Optional warm starts; anything left `None` falls back to the defaults
/// (smoothed outcome frequencies for beliefs, zeros for parameters).
#[derive(Debug, Clone, Default)]
pub struct NplInit {
    pub ccp: Option<Vec<Vec<f64>>>,
    pub slope: Option<SlopeParams>,
    pub fixed_effects: Option<Vec<f64>>,
}

/// Estimation diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    /// Scope positions whose fixed effect ended on the box boundary
    /// (separation or near-separation).
    pub clamped_fixed_effects: Vec<usize>,
    /// The peer effect ended on the projection boundary.
    pub peer_effect_clamped: bool,
    /// Some inner Newton system was singular and solved with a ridge.
    pub rank_deficient: bool,
    /// Groups whose final equilibrium polish did not converge.
    pub polish_failures: usize,
}

/// Fitted parameters, beliefs and convergence evidence for one scope.
#[derive(Debug, Clone)]
pub struct NplFit {
    /// Panel indices of the groups this fit covers, in fit order.
    pub scope: Vec<usize>,
    /// Common slope estimate for the scope.
    pub slope: SlopeParams,
    /// Fixed effects, aligned with `scope`.
    pub fixed_effects: Vec<f64>,
    /// Fitted belief profiles, aligned with `scope`.
    pub ccp: Vec<Vec<f64>>,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Pooled objective at the returned parameters and beliefs.
    pub final_nll: f64,
    pub diagnostics: FitDiagnostics,
}

impl NplFit {
    /// Parameters of a scope group as a [`GroupParams`].
    pub fn group_params(&self, scope_pos: usize) -> GroupParams {
        GroupParams::new(self.fixed_effects[scope_pos], self.slope.clone())
    }
}

/// Smoothed within-group outcome frequency, clipped to [0.02, 0.98]; the
/// default starting belief for every individual of the group.
pub(crate) fn default_initial_ccp(group: &GroupData) -> Vec<f64> {
    let ones: f64 = group.y().iter().map(|&v| f64::from(v)).sum();
    let p0 = ((ones + 0.5) / (group.n() as f64 + 1.0)).clamp(0.02, 0.98);
    vec![p0; group.n()]
}

/// Indices excluding the fixed effect: `a_i = peer_effect * pbar_i + x_i' b`.
pub(crate) fn theta_part_indices(
    group: &GroupData,
    slope: &SlopeParams,
    pbar: &[f64],
) -> Vec<f64> {
    let x = group.x();
    let mut out = Vec::with_capacity(group.n());
    for i in 0..group.n() {
        let mut a = slope.peer_effect * pbar[i];
        for j in 0..group.p() {
            a += x[(i, j)] * slope.covariate_slopes[j];
        }
        out.push(a);
    }
    out
}

/// Mean residual `(1/n) sum_i (L(mu + a_i) - y_i)`, the derivative of the
/// group objective in the fixed effect.
fn mean_residual(a: &[f64], y: &[u8], mu: f64) -> f64 {
    let mut acc = 0.0;
    for (ai, yi) in a.iter().zip(y) {
        acc += logistic_cdf(mu + ai) - f64::from(*yi);
    }
    acc / a.len() as f64
}

fn residual_and_weight(a: &[f64], y: &[u8], mu: f64) -> (f64, f64) {
    let mut r = 0.0;
    let mut w = 0.0;
    for (ai, yi) in a.iter().zip(y) {
        let lam = logistic_cdf(mu + ai);
        r += lam - f64::from(*yi);
        w += lam * (1.0 - lam);
    }
    let n = a.len() as f64;
    (r / n, w / n)
}

/// Exact minimizer of the strictly convex one-dimensional fixed-effect
/// problem on `[lo, hi]`: bracketed Newton with bisection fallback. The flag
/// reports a boundary solution.
pub(crate) fn solve_mu_on(a: &[f64], y: &[u8], lo: f64, hi: f64, warm: f64) -> (f64, bool) {
    if mean_residual(a, y, lo) >= 0.0 {
        return (lo, true);
    }
    if mean_residual(a, y, hi) <= 0.0 {
        return (hi, true);
    }
    let mut blo = lo;
    let mut bhi = hi;
    let mut mu = warm.clamp(lo, hi);
    for _ in 0..100 {
        let (d1, d2) = residual_and_weight(a, y, mu);
        if d1.abs() < 1e-13 {
            break;
        }
        if d1 < 0.0 {
            blo = blo.max(mu);
        } else {
            bhi = bhi.min(mu);
        }
        let mut next = if d2 > 1e-300 { mu - d1 / d2 } else { 0.5 * (blo + bhi) };
        if !(next > blo && next < bhi) {
            next = 0.5 * (blo + bhi);
        }
        if (next - mu).abs() < 1e-14 {
            mu = next;
            break;
        }
        mu = next;
    }
    (mu, false)
}

/// Concentrated fixed-effect estimator: the minimizer of the group objective
/// over the fixed effect at the given slope and beliefs, clamped to the box.
pub fn profile_fixed_effect(
    group: &GroupData,
    slope: &SlopeParams,
    ccp: &[f64],
    mu_bound: f64,
) -> Result<f64> {
    let pbar = mean_peer_belief(group, ccp)?;
    check_slope_dim(group, slope)?;
    let a = theta_part_indices(group, slope, &pbar);
    Ok(solve_mu_on(&a, group.y(), -mu_bound, mu_bound, 0.0).0)
}

/// Profile objective: the group objective at the concentrated fixed effect.
pub fn profile_nll(
    group: &GroupData,
    slope: &SlopeParams,
    ccp: &[f64],
    mu_bound: f64,
) -> Result<f64> {
    let pbar = mean_peer_belief(group, ccp)?;
    check_slope_dim(group, slope)?;
    let a = theta_part_indices(group, slope, &pbar);
    let (mu, _) = solve_mu_on(&a, group.y(), -mu_bound, mu_bound, 0.0);
    Ok(group_nll_from_parts(&a, group.y(), mu))
}

fn check_slope_dim(group: &GroupData, slope: &SlopeParams) -> Result<()> {
    if slope.covariate_slopes.len() != group.p() {
        return Err(Error::Dimension(format!(
            "{} covariate slopes for {} covariates",
            slope.covariate_slopes.len(),
            group.p()
        )));
    }
    Ok(())
}

pub(crate) fn group_nll_from_parts(a: &[f64], y: &[u8], mu: f64) -> f64 {
    let mut acc = 0.0;
    for (ai, yi) in a.iter().zip(y) {
        acc += nll_individual(*yi, mu + ai);
    }
    acc / a.len() as f64
}

/// Per-group quantities entering the profile Newton step, already divided by
/// the group size.
pub(crate) struct GroupCurvature {
    pub nll: f64,
    pub grad_theta: DVector<f64>,
    pub h_tt: DMatrix<f64>,
    pub cross: DVector<f64>,
    pub d_mu: f64,
    pub mu: f64,
    pub clamped: bool,
}

/// Solve the fixed effect and assemble objective, gradient and Hessian
/// blocks for one group at frozen `pbar`.
pub(crate) fn group_curvature(
    group: &GroupData,
    pbar: &[f64],
    slope: &SlopeParams,
    mu_bound: f64,
    warm_mu: f64,
) -> GroupCurvature {
    let d = 1 + group.p();
    let a = theta_part_indices(group, slope, pbar);
    let (mu, clamped) = solve_mu_on(&a, group.y(), -mu_bound, mu_bound, warm_mu);
    let y = group.y();
    let x = group.x();
    let mut nll = 0.0;
    let mut grad = DVector::<f64>::zeros(d);
    let mut h_tt = DMatrix::<f64>::zeros(d, d);
    let mut cross = DVector::<f64>::zeros(d);
    let mut d_mu = 0.0;
    let mut z = vec![0.0; d];
    for i in 0..group.n() {
        let idx = mu + a[i];
        nll += nll_individual(y[i], idx);
        let lam = logistic_cdf(idx);
        let r = lam - f64::from(y[i]);
        let w = lam * (1.0 - lam);
        z[0] = pbar[i];
        for j in 0..group.p() {
            z[1 + j] = x[(i, j)];
        }
        d_mu += w;
        for aa in 0..d {
            grad[aa] += r * z[aa];
            cross[aa] += w * z[aa];
            let wz = w * z[aa];
            for bb in aa..d {
                h_tt[(aa, bb)] += wz * z[bb];
            }
        }
    }
    let n = group.n() as f64;
    nll /= n;
    grad /= n;
    cross /= n;
    d_mu /= n;
    for aa in 0..d {
        for bb in aa..d {
            let v = h_tt[(aa, bb)] / n;
            h_tt[(aa, bb)] = v;
            h_tt[(bb, aa)] = v;
        }
    }
    GroupCurvature { nll, grad_theta: grad, h_tt, cross, d_mu, mu, clamped }
}

/// Solve `H x = -g` restricted to the free coordinates, adding an escalating
/// ridge when the reduced Hessian is not positive definite. Returns the
/// full-dimension direction and whether a ridge was needed.
pub(crate) fn reduced_newton_direction(
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    free: &[usize],
) -> (DVector<f64>, bool) {
    let m = free.len();
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut g = DVector::<f64>::zeros(m);
    for (ra, &fa) in free.iter().enumerate() {
        g[ra] = grad[fa];
        for (rb, &fb) in free.iter().enumerate() {
            h[(ra, rb)] = hess[(fa, fb)];
        }
    }
    let mut ridge_used = false;
    let scale = h.diagonal().amax().max(1e-12);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut hr = h.clone();
        for i in 0..m {
            hr[(i, i)] += ridge;
        }
        if let Some(chol) = hr.cholesky() {
            let sol = chol.solve(&(-&g));
            let mut full = DVector::<f64>::zeros(grad.len());
            for (ra, &fa) in free.iter().enumerate() {
                full[fa] = sol[ra];
            }
            return (full, ridge_used);
        }
        ridge_used = true;
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 100.0 };
    }
    // Hopeless curvature: fall back to scaled steepest descent.
    let mut full = DVector::<f64>::zeros(grad.len());
    for &fa in free {
        full[fa] = -grad[fa] / scale;
    }
    (full, true)
}

pub(crate) struct InnerOutcome {
    pub(crate) rank_deficient: bool,
    pub(crate) peer_effect_clamped: bool,
    pub(crate) clamped: Vec<usize>,
}

/// Minimize the pooled objective over fixed effects and the free slope
/// coordinates at frozen beliefs. `slope` and `mus` are updated in place.
pub(crate) fn minimize_pseudo_likelihood(
    panel: &Panel,
    scope: &[usize],
    pbars: &[Vec<f64>],
    slope: &mut SlopeParams,
    mus: &mut [f64],
    config: &NplConfig,
) -> Result<InnerOutcome> {
    let d = 1 + panel.p();
    let s_count = scope.len() as f64;
    let peer_cap = 4.0 - PEER_EFFECT_MARGIN;
    let mut rank_deficient = false;
    let mut clamped: Vec<usize> = Vec::new();
    let mut peer_effect_clamped = false;

    for _ in 0..config.max_inner {
        let theta_now = slope.clone();
        let mus_now = mus.to_vec();
        let stats: Vec<GroupCurvature> = exec::map_indexed(scope.len(), |s| {
            group_curvature(
                panel.group(scope[s]),
                &pbars[s],
                &theta_now,
                config.mu_bound,
                mus_now[s],
            )
        });
        let mut objective = 0.0;
        let mut grad = DVector::<f64>::zeros(d);
        let mut hq = DMatrix::<f64>::zeros(d, d);
        for st in &stats {
            objective += st.nll;
            grad += &st.grad_theta;
            hq += &st.h_tt;
            if !st.clamped && st.d_mu > 1e-300 {
                hq -= &st.cross * st.cross.transpose() / st.d_mu;
            }
        }
        objective /= s_count;
        grad /= s_count;
        hq /= s_count;
        if !objective.is_finite() {
            return Err(Error::Numerical("pooled objective is not finite".into()));
        }
        for (s, st) in stats.iter().enumerate() {
            mus[s] = st.mu;
        }
        clamped = stats
            .iter()
            .enumerate()
            .filter(|(_, st)| st.clamped)
            .map(|(s, _)| s)
            .collect();
        peer_effect_clamped =
            config.fix_peer_effect.is_none() && slope.peer_effect.abs() >= peer_cap;

        // Free slope coordinates: drop the peer effect when it is held fixed
        // or pinned at the projection bound with an outward-pushing gradient.
        let peer_pinned = config.fix_peer_effect.is_some()
            || (slope.peer_effect >= peer_cap && grad[0] < 0.0)
            || (slope.peer_effect <= -peer_cap && grad[0] > 0.0);
        let free: Vec<usize> = (0..d).filter(|&c| c != 0 || !peer_pinned).collect();
        if free.is_empty() {
            break;
        }
        let gmax = free.iter().map(|&c| grad[c].abs()).fold(0.0, f64::max);
        if gmax < config.inner_grad_tol {
            // Flag stationary points with singular curvature: some free
            // coordinate is unidentified by this scope's design.
            let m = free.len();
            let mut h = DMatrix::<f64>::zeros(m, m);
            for (ra, &fa) in free.iter().enumerate() {
                for (rb, &fb) in free.iter().enumerate() {
                    h[(ra, rb)] = hq[(fa, fb)];
                }
            }
            rank_deficient |= h.cholesky().is_none();
            break;
        }

        let (direction, ridged) = reduced_newton_direction(&hq, &grad, &free);
        rank_deficient |= ridged;
        let descent: f64 = free.iter().map(|&c| grad[c] * direction[c]).sum();

        // Backtracking line search on the profile objective.
        let theta_vec = slope.as_vector();
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..50 {
            let mut cand = &theta_vec + t * &direction;
            let projected = cand[0].clamp(-peer_cap, peer_cap);
            let was_projected = projected != cand[0];
            cand[0] = projected;
            let cand_slope = SlopeParams::from_vector(&cand);
            let evals: Vec<(f64, f64)> = exec::map_indexed(scope.len(), |s| {
                let group = panel.group(scope[s]);
                let a = theta_part_indices(group, &cand_slope, &pbars[s]);
                let (mu, _) =
                    solve_mu_on(&a, group.y(), -config.mu_bound, config.mu_bound, mus_now[s]);
                (group_nll_from_parts(&a, group.y(), mu), mu)
            });
            let cand_obj: f64 = evals.iter().map(|e| e.0).sum::<f64>() / s_count;
            if !cand_obj.is_finite() {
                return Err(Error::Numerical("pooled objective is not finite".into()));
            }
            let armijo = cand_obj <= objective + 1e-4 * t * descent;
            let plain = was_projected && cand_obj < objective;
            if armijo || plain {
                *slope = cand_slope;
                for (s, e) in evals.iter().enumerate() {
                    mus[s] = e.1;
                }
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent at machine scale: the point is optimal for this
            // belief profile.
            break;
        }
    }

    Ok(InnerOutcome { rank_deficient, peer_effect_clamped, clamped })
}

/// Fit the model on a scope of panel groups (one group, a cluster, or all).
///
/// Returns a fit whether or not the belief iteration converged; check
/// [`NplFit::converged`]. Errors signal invalid inputs or a non-finite
/// objective, not plain non-convergence.
pub fn npl_fit(
    panel: &Panel,
    scope: &[usize],
    init: &NplInit,
    config: &NplConfig,
) -> Result<NplFit> {
    if scope.is_empty() {
        return Err(Error::InvalidConfig("empty estimation scope".into()));
    }
    for &g in scope {
        if g >= panel.n_groups() {
            return Err(Error::InvalidConfig(format!(
                "scope group {g} out of range ({} groups)",
                panel.n_groups()
            )));
        }
    }
    let p = panel.p();
    let peer_cap = 4.0 - PEER_EFFECT_MARGIN;

    let mut ccp: Vec<Vec<f64>> = match &init.ccp {
        Some(v) => {
            if v.len() != scope.len() {
                return Err(Error::Dimension(format!(
                    "{} initial belief profiles for {} scope groups",
                    v.len(),
                    scope.len()
                )));
            }
            for (s, prof) in v.iter().enumerate() {
                if prof.len() != panel.group(scope[s]).n() {
                    return Err(Error::Dimension(format!(
                        "initial profile {s} has length {}, group has {}",
                        prof.len(),
                        panel.group(scope[s]).n()
                    )));
                }
            }
            v.clone()
        }
        None => scope.iter().map(|&g| default_initial_ccp(panel.group(g))).collect(),
    };

    let mut slope = match &init.slope {
        Some(s) => {
            if s.covariate_slopes.len() != p {
                return Err(Error::Dimension(format!(
                    "initial slope has {} covariate coefficients, panel has {p}",
                    s.covariate_slopes.len()
                )));
            }
            s.clone()
        }
        None => SlopeParams::zeros(p),
    };
    if let Some(v) = config.fix_peer_effect {
        slope.peer_effect = v;
    }
    slope.peer_effect = slope.peer_effect.clamp(-peer_cap, peer_cap);

    let mut mus: Vec<f64> = match &init.fixed_effects {
        Some(v) => {
            if v.len() != scope.len() {
                return Err(Error::Dimension(format!(
                    "{} initial fixed effects for {} scope groups",
                    v.len(),
                    scope.len()
                )));
            }
            v.iter().map(|m| m.clamp(-config.mu_bound, config.mu_bound)).collect()
        }
        None => vec![0.0; scope.len()],
    };

    let mut diagnostics = FitDiagnostics::default();
    let mut converged = false;
    let mut outer_iterations = 0;

    for t in 1..=config.max_outer {
        outer_iterations = t;
        let ccp_now = ccp.clone();
        let pbars: Vec<Vec<f64>> = exec::map_indexed(scope.len(), |s| {
            mean_peer_belief(panel.group(scope[s]), &ccp_now[s])
                .expect("profile length matches group")
        });
        let inner =
            minimize_pseudo_likelihood(panel, scope, &pbars, &mut slope, &mut mus, config)?;
        diagnostics.rank_deficient |= inner.rank_deficient;
        diagnostics.peer_effect_clamped = inner.peer_effect_clamped;
        diagnostics.clamped_fixed_effects = inner.clamped;

        // Belief update: new parameters, previous peer averages.
        let slope_now = slope.clone();
        let mus_now = mus.clone();
        let updated: Vec<Vec<f64>> = exec::map_indexed(scope.len(), |s| {
            let group = panel.group(scope[s]);
            let a = theta_part_indices(group, &slope_now, &pbars[s]);
            a.iter().map(|ai| logistic_cdf(mus_now[s] + ai)).collect::<Vec<f64>>()
        });
        let mut delta: f64 = 0.0;
        for (old, new) in ccp.iter().zip(&updated) {
            for (o, u) in old.iter().zip(new) {
                delta = delta.max((o - u).abs());
            }
        }
        ccp = updated;
        if delta <= config.ccp_tol {
            converged = true;
            break;
        }
    }

    // Optional polish: replace the fitted profile with the exact fixed point
    // at the fitted parameters, so downstream consumers (bootstrap data
    // generation) see an internally consistent profile.
    if config.polish_ccp && converged {
        let slope_now = slope.clone();
        let mus_now = mus.clone();
        let ccp_now = ccp.clone();
        let polished: Vec<Option<Vec<f64>>> = exec::map_indexed(scope.len(), |s| {
            let params = GroupParams::new(mus_now[s], slope_now.clone());
            solve_equilibrium(
                panel.group(scope[s]),
                &params,
                Some(&ccp_now[s]),
                &config.equilibrium,
            )
            .ok()
            .map(|sol| sol.values)
        });
        for (s, res) in polished.into_iter().enumerate() {
            match res {
                Some(values) => ccp[s] = values,
                None => diagnostics.polish_failures += 1,
            }
        }
    }

    let final_nll = {
        let mut acc = 0.0;
        for (s, &g) in scope.iter().enumerate() {
            let group = panel.group(g);
            let pbar = mean_peer_belief(group, &ccp[s])?;
            let a = theta_part_indices(group, &slope, &pbar);
            acc += group_nll_from_parts(&a, group.y(), mus[s]);
        }
        acc / scope.len() as f64
    };

    Ok(NplFit {
        scope: scope.to_vec(),
        slope,
        fixed_effects: mus,
        ccp,
        outer_iterations,
        converged,
        final_nll,
        diagnostics,
    })
}

/// Fit on every group of the panel jointly (common slope).
pub fn npl_fit_all(panel: &Panel, init: &NplInit, config: &NplConfig) -> Result<NplFit> {
    let scope: Vec<usize> = (0..panel.n_groups()).collect();
    npl_fit(panel, &scope, init, config)
}

/// Fit each group separately (fully heterogeneous slopes). Failures are
/// collected per group, not fatal.
pub fn npl_fit_per_group(panel: &Panel, config: &NplConfig) -> Vec<Result<NplFit>> {
    exec::map_indexed(panel.n_groups(), |g| {
        npl_fit(panel, &[g], &NplInit::default(), config)
    })
}
