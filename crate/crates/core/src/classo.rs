//! Penalized classification of groups into latent clusters.
//!
//! Groups share slope parameters within unknown clusters. Classification
//! minimizes, over per-group slopes `theta_g` and cluster centers
//! `vartheta_k`,
//!
//! ```text
//! (1/G) sum_g [ Q_g(theta_g) + rho * prod_k ||theta_g - vartheta_k||_2 ],
//! ```
//!
//! where `Q_g` is the group's profile objective at beliefs frozen from the
//! first estimation step. The multiplicative penalty charges a group only
//! when its slope is far from every center, which drives most slopes onto a
//! center exactly. A group joins the cluster whose center is nearest in
//! Euclidean distance (ties to the lowest index).
//!
//! The criterion is solved by alternating block minimization:
//! per-group Newton steps against the product penalty (comparing the smooth
//! stationary point with snapping onto each center), then a weighted
//! geometric-median update of every center by Weiszfeld iteration. Neither
//! phase increases the objective, so the per-sweep trace is non-increasing.

use nalgebra::{DMatrix, DVector};

use crate::data::{Panel, mean_peer_belief};
use crate::exec;
use crate::logit::SlopeParams;
use crate::npl::{NplConfig, NplFit, NplInit, group_curvature, npl_fit, reduced_newton_direction};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Distance floor guarding direction vectors at non-smooth points.
const DIST_FLOOR: f64 = 1e-12;

/// First-step inputs to classification: per-group slopes and frozen beliefs
/// for the groups whose separate fits succeeded.
#[derive(Debug, Clone)]
pub struct FirstStep {
    /// Panel indices of usable groups, in panel order.
    pub scope: Vec<usize>,
    /// Per-group slope estimates, re-minimized on the frozen-belief profile
    /// objective so each is an exact stationary point of `Q_g`.
    pub slopes: Vec<DVector<f64>>,
    /// First-step belief profiles.
    pub ccps: Vec<Vec<f64>>,
    /// Frozen mean peer beliefs derived from `ccps`.
    pub pbars: Vec<Vec<f64>>,
    /// Concentrated fixed effects at `slopes`.
    pub mus: Vec<f64>,
    /// Hard per-group failures: (panel index, error message).
    pub failures: Vec<(usize, String)>,
    /// Count of usable groups whose belief iteration had not converged.
    pub unconverged: usize,
}

impl FirstStep {
    /// Assemble the classification inputs from per-group fit results.
    ///
    /// Hard errors exclude a group (recorded in `failures`); non-converged
    /// fits stay usable and are only counted.
    pub fn from_fits(panel: &Panel, fits: &[Result<NplFit>], mu_bound: f64) -> Result<FirstStep> {
        if fits.len() != panel.n_groups() {
            return Err(Error::Dimension(format!(
                "{} fits for {} groups",
                fits.len(),
                panel.n_groups()
            )));
        }
        let mut scope = Vec::new();
        let mut seeds = Vec::new();
        let mut ccps = Vec::new();
        let mut failures = Vec::new();
        let mut unconverged = 0;
        for (g, fit) in fits.iter().enumerate() {
            match fit {
                Ok(f) => {
                    if !f.converged {
                        unconverged += 1;
                    }
                    scope.push(g);
                    seeds.push(f.slope.as_vector());
                    ccps.push(f.ccp[0].clone());
                }
                Err(e) => failures.push((g, e.to_string())),
            }
        }
        if scope.is_empty() {
            return Err(Error::NonConvergence("every per-group first-step fit failed".into()));
        }
        let pbars: Vec<Vec<f64>> = scope
            .iter()
            .zip(&ccps)
            .map(|(&g, ccp)| mean_peer_belief(panel.group(g), ccp))
            .collect::<Result<Vec<_>>>()?;
        // Polish each slope to the exact stationary point of the frozen
        // profile objective; the zero-penalty classification block problem
        // then reproduces these slopes identically.
        let polished: Vec<(DVector<f64>, f64, f64)> = exec::map_indexed(scope.len(), |s| {
            penalized_group_newton(
                panel,
                scope[s],
                &pbars[s],
                &seeds[s],
                0.0,
                &[],
                0.0,
                mu_bound,
                60,
                1e-10,
            )
        });
        let slopes: Vec<DVector<f64>> = polished.iter().map(|t| t.0.clone()).collect();
        let mus: Vec<f64> = polished.iter().map(|t| t.2).collect();
        Ok(FirstStep { scope, slopes, ccps, pbars, mus, failures, unconverged })
    }
}

/// Classification knobs.
#[derive(Debug, Clone)]
pub struct ClassoConfig {
    /// Penalty level; `None` selects `rho_scale * s_hat * nbar^(-1/3)` with
    /// `s_hat` the root-mean-square dispersion of the first-step slopes and
    /// `nbar` the mean group size.
    pub rho: Option<f64>,
    pub rho_scale: f64,
    pub max_sweeps: usize,
    /// Relative objective-change tolerance across sweeps.
    pub sweep_tol: f64,
    pub newton_max_iter: usize,
    pub newton_grad_tol: f64,
    pub kmeans_restarts: usize,
    /// Distinct k-means solutions carried into likelihood refinement.
    pub init_candidates: usize,
    /// Fixed-effect box used in the profile objective.
    pub mu_bound: f64,
    pub seed: u64,
}

impl Default for ClassoConfig {
    fn default() -> Self {
        Self {
            rho: None,
            rho_scale: 0.5,
            max_sweeps: 200,
            sweep_tol: 1e-8,
            newton_max_iter: 40,
            newton_grad_tol: 1e-9,
            kmeans_restarts: 20,
            init_candidates: 6,
            mu_bound: 10.0,
            seed: 0,
        }
    }
}

/// Classification output.
#[derive(Debug, Clone)]
pub struct ClusterSolution {
    /// Panel indices the solution covers (the first-step scope).
    pub scope: Vec<usize>,
    /// Final per-group slopes, aligned with `scope`.
    pub per_group_slopes: Vec<DVector<f64>>,
    /// Cluster centers in canonical (lexicographic) order.
    pub centers: Vec<DVector<f64>>,
    /// Nearest-center membership, aligned with `scope`.
    pub membership: Vec<usize>,
    /// Penalty level used.
    pub rho: f64,
    /// Penalized objective after each sweep; non-increasing.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    /// Clusters that ended without members.
    pub empty_clusters: Vec<usize>,
}

/// Nearest-center assignment in Euclidean distance, ties to the lowest
/// cluster index.
pub fn assign_clusters(
    per_group_slopes: &[DVector<f64>],
    centers: &[DVector<f64>],
) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(Error::InvalidConfig("no cluster centers".into()));
    }
    let d = centers[0].len();
    for c in centers {
        if c.len() != d {
            return Err(Error::Dimension("centers of mixed dimension".into()));
        }
    }
    let mut out = Vec::with_capacity(per_group_slopes.len());
    for theta in per_group_slopes {
        if theta.len() != d {
            return Err(Error::Dimension(format!(
                "slope dimension {} vs center dimension {d}",
                theta.len()
            )));
        }
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (k, c) in centers.iter().enumerate() {
            let d2 = (theta - c).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// `prod_k ||theta - vartheta_k||`.
fn penalty_value(theta: &DVector<f64>, centers: &[DVector<f64>]) -> f64 {
    centers.iter().map(|c| (theta - c).norm()).product()
}

/// Gradient and Hessian of `rho * prod_k ||theta - vartheta_k||`, distances
/// floored so the expressions stay finite at the non-smooth points.
fn penalty_grad_hess(
    theta: &DVector<f64>,
    centers: &[DVector<f64>],
    rho: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = theta.len();
    let k = centers.len();
    let mut grad = DVector::<f64>::zeros(d);
    let mut hess = DMatrix::<f64>::zeros(d, d);
    if rho == 0.0 || k == 0 {
        return (grad, hess);
    }
    let dists: Vec<f64> = centers.iter().map(|c| (theta - c).norm().max(DIST_FLOOR)).collect();
    let units: Vec<DVector<f64>> =
        centers.iter().zip(&dists).map(|(c, &dk)| (theta - c) / dk).collect();
    // prod_{l != k} d_l from prefix/suffix products.
    let mut prefix = vec![1.0; k + 1];
    for i in 0..k {
        prefix[i + 1] = prefix[i] * dists[i];
    }
    let mut suffix = vec![1.0; k + 1];
    for i in (0..k).rev() {
        suffix[i] = suffix[i + 1] * dists[i];
    }
    let others = |i: usize| prefix[i] * suffix[i + 1];
    for a in 0..k {
        let wa = others(a);
        grad += rho * wa * &units[a];
        let eye_minus = DMatrix::<f64>::identity(d, d) - &units[a] * units[a].transpose();
        hess += rho * wa / dists[a] * eye_minus;
        for b in 0..k {
            if b == a {
                continue;
            }
            let wab = wa / dists[b]; // prod over l not in {a, b}
            hess += rho * wab * &units[b] * units[a].transpose();
        }
    }
    (grad, hess)
}

/// Newton descent on `Q_g(theta) + rho * prod_k ||theta - vartheta_k||` from
/// `start`. Returns `(theta, penalized value, concentrated mu)`.
#[allow(clippy::too_many_arguments)]
fn penalized_group_newton(
    panel: &Panel,
    group_idx: usize,
    pbar: &[f64],
    start: &DVector<f64>,
    rho: f64,
    centers: &[DVector<f64>],
    warm_mu: f64,
    mu_bound: f64,
    max_iter: usize,
    grad_tol: f64,
) -> (DVector<f64>, f64, f64) {
    let group = panel.group(group_idx);
    let mut theta = start.clone();
    let mut mu = warm_mu;
    let mut value = f64::INFINITY;
    for _ in 0..max_iter {
        let slope = SlopeParams::from_vector(&theta);
        let curv = group_curvature(group, pbar, &slope, mu_bound, mu);
        mu = curv.mu;
        value = curv.nll + rho * penalty_value(&theta, centers);
        let (pgrad, phess) = penalty_grad_hess(&theta, centers, rho);
        let grad = &curv.grad_theta + &pgrad;
        if grad.amax() < grad_tol {
            break;
        }
        let mut hess = curv.h_tt.clone();
        if !curv.clamped && curv.d_mu > 1e-300 {
            hess -= &curv.cross * curv.cross.transpose() / curv.d_mu;
        }
        hess += phess;
        let free: Vec<usize> = (0..theta.len()).collect();
        let (direction, _) = reduced_newton_direction(&hess, &grad, &free);
        let descent: f64 = grad.dot(&direction);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta + t * &direction;
            let cand_slope = SlopeParams::from_vector(&cand);
            let a = crate::npl::theta_part_indices(group, &cand_slope, pbar);
            let (cmu, _) = crate::npl::solve_mu_on(&a, group.y(), -mu_bound, mu_bound, mu);
            let cq = crate::npl::group_nll_from_parts(&a, group.y(), cmu);
            let cval = cq + rho * penalty_value(&cand, centers);
            if cval <= value + 1e-4 * t * descent {
                theta = cand;
                mu = cmu;
                value = cval;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (theta, value, mu)
}

/// Weighted geometric median `argmin_v sum_g w_g ||p_g - v||` by Weiszfeld
/// iteration with the coincident-point correction. Never returns a point
/// with a larger objective than `init`.
pub(crate) fn weighted_geometric_median(
    points: &[DVector<f64>],
    weights: &[f64],
    init: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> DVector<f64> {
    let objective = |v: &DVector<f64>| -> f64 {
        points.iter().zip(weights).map(|(p, &w)| w * (p - v).norm()).sum()
    };
    let mut v = init.clone();
    for _ in 0..max_iter {
        let mut num = DVector::<f64>::zeros(v.len());
        let mut den = 0.0;
        let mut coincident_w = 0.0;
        let mut pull = DVector::<f64>::zeros(v.len());
        for (p, &w) in points.iter().zip(weights) {
            if w <= 0.0 {
                continue;
            }
            let diff = p - &v;
            let dist = diff.norm();
            if dist < DIST_FLOOR {
                coincident_w += w;
            } else {
                num += w / dist * p;
                den += w / dist;
                pull += w / dist * diff;
            }
        }
        if den == 0.0 {
            break; // all mass coincides with v
        }
        let plain = &num / den;
        let next = if coincident_w > 0.0 {
            let r = pull.norm();
            if r <= coincident_w {
                break; // the coincident mass anchors v as optimal
            }
            let shrink = (coincident_w / r).min(1.0);
            shrink * &v + (1.0 - shrink) * plain
        } else {
            plain
        };
        let step = (&next - &v).norm();
        v = next;
        if step < tol {
            break;
        }
    }
    if objective(&v) <= objective(init) { v } else { init.clone() }
}

/// Candidate initial center sets: k-means on dispersion-standardized
/// slopes, keeping the distinct best restarts; each candidate center is the
/// coordinate-wise median of its members in the original coordinates.
///
/// Coordinates of the first-step slopes can differ in sampling noise by an
/// order of magnitude (the peer effect is weakly identified within a single
/// group); standardizing keeps the noisiest coordinate from dominating the
/// k-means metric, and medians resist the boundary-pinned estimates.
fn initial_center_candidates(
    points: &[DVector<f64>],
    k: usize,
    restarts: usize,
    keep: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Vec<Vec<DVector<f64>>> {
    let n = points.len();
    let d = points[0].len();
    let mut scale = DVector::<f64>::from_element(d, 1.0);
    for j in 0..d {
        let mut mean = 0.0;
        for p in points {
            mean += p[j];
        }
        mean /= n as f64;
        let var: f64 = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n as f64;
        scale[j] = var.sqrt().max(1e-9);
    }
    let standardized: Vec<DVector<f64>> =
        points.iter().map(|p| p.component_div(&scale)).collect();
    let mut runs = kmeans_centers(&standardized, k, restarts, rng);
    runs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite inertia"));
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut out: Vec<Vec<DVector<f64>>> = Vec::new();
    for (_, centers_std) in runs {
        let assign = assign_clusters(&standardized, &centers_std).expect("consistent dimensions");
        if seen.contains(&assign) {
            continue;
        }
        let centers = (0..k)
            .map(|kk| {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == kk).collect();
                if members.is_empty() {
                    return centers_std[kk].component_mul(&scale);
                }
                DVector::from_fn(d, |j, _| {
                    let mut vals: Vec<f64> = members.iter().map(|&i| points[i][j]).collect();
                    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite slopes"));
                    let m = vals.len();
                    if m % 2 == 1 { vals[m / 2] } else { 0.5 * (vals[m / 2 - 1] + vals[m / 2]) }
                })
            })
            .collect();
        seen.push(assign);
        out.push(centers);
        if out.len() >= keep {
            break;
        }
    }
    out
}

/// K-means with k-means++ seeding on the slope vectors; used only to
/// initialize the centers. Deterministic given the stream. Returns every
/// restart's `(inertia, centers)`.
fn kmeans_centers(
    points: &[DVector<f64>],
    k: usize,
    restarts: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Vec<(f64, Vec<DVector<f64>>)> {
    use rand::RngExt;
    let n = points.len();
    let d = points[0].len();
    let mut out: Vec<(f64, Vec<DVector<f64>>)> = Vec::new();
    for _ in 0..restarts.max(1) {
        let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
        centers.push(points[rng.random_range(0..n)].clone());
        while centers.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| {
                    centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            let idx = if total <= 0.0 {
                rng.random_range(0..n)
            } else {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    acc += w;
                    if acc >= target {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            centers.push(points[idx].clone());
        }
        let mut assign = vec![usize::MAX; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut bk = 0;
                let mut bd = f64::INFINITY;
                for (kk, c) in centers.iter().enumerate() {
                    let dd = (p - c).norm_squared();
                    if dd < bd {
                        bd = dd;
                        bk = kk;
                    }
                }
                if assign[i] != bk {
                    assign[i] = bk;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (kk, center) in centers.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == kk).collect();
                if members.is_empty() {
                    continue; // revived below through inertia comparison
                }
                let mut mean = DVector::<f64>::zeros(d);
                for &i in &members {
                    mean += &points[i];
                }
                *center = mean / members.len() as f64;
            }
        }
        let inertia: f64 = points
            .iter()
            .map(|p| centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum();
        out.push((inertia, centers));
    }
    out
}

/// Likelihood refinement of one initial center set: alternate assigning
/// every group to the center with the best profile fit and moving each
/// center to the pooled profile minimizer of its members (beliefs stay
/// frozen), until the assignment stabilizes. Pooling sharpens the weakly
/// identified coordinates by roughly the square root of the cluster size
/// before the alternating sweeps start. Returns the refined centers and the
/// total assigned profile objective (the refinement's own criterion).
fn refine_centers_by_pooled_fit(
    panel: &Panel,
    first_step: &FirstStep,
    init: &[DVector<f64>],
    config: &ClassoConfig,
) -> (Vec<DVector<f64>>, f64) {
    let g_count = first_step.scope.len();
    let k = init.len();
    let npl_cfg = crate::npl::NplConfig { mu_bound: config.mu_bound, ..Default::default() };
    let mut centers: Vec<DVector<f64>> = init.to_vec();
    let mut assignment: Vec<usize> = vec![usize::MAX; g_count];
    let mut total = f64::INFINITY;
    for _ in 0..12 {
        let centers_now = centers.clone();
        let scored: Vec<(usize, f64)> = exec::map_indexed(g_count, |s| {
            let group = panel.group(first_step.scope[s]);
            let mut best = 0usize;
            let mut best_q = f64::INFINITY;
            for (kk, c) in centers_now.iter().enumerate() {
                let slope = SlopeParams::from_vector(c);
                let a = crate::npl::theta_part_indices(group, &slope, &first_step.pbars[s]);
                let (mu, _) = crate::npl::solve_mu_on(
                    &a,
                    group.y(),
                    -config.mu_bound,
                    config.mu_bound,
                    first_step.mus[s],
                );
                let q = crate::npl::group_nll_from_parts(&a, group.y(), mu);
                if q < best_q {
                    best_q = q;
                    best = kk;
                }
            }
            (best, best_q)
        });
        let mut fit_of: Vec<usize> = scored.iter().map(|t| t.0).collect();
        total = scored.iter().map(|t| t.1).sum::<f64>() / g_count as f64;
        // Revive empty clusters at the group the current centers explain
        // worst.
        for kk in 0..k {
            if !fit_of.contains(&kk) {
                let worst = scored
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.1.partial_cmp(&b.1.1).expect("finite objectives"))
                    .map(|(s, _)| s)
                    .expect("nonempty scope");
                fit_of[worst] = kk;
            }
        }
        let stable = fit_of == assignment;
        assignment = fit_of;
        if stable {
            break;
        }
        centers = (0..k)
            .map(|kk| {
                let members: Vec<usize> =
                    (0..g_count).filter(|&s| assignment[s] == kk).collect();
                if members.is_empty() {
                    return centers_now[kk].clone();
                }
                let scope: Vec<usize> = members.iter().map(|&s| first_step.scope[s]).collect();
                let pbars: Vec<Vec<f64>> =
                    members.iter().map(|&s| first_step.pbars[s].clone()).collect();
                let mut slope = SlopeParams::from_vector(&centers_now[kk]);
                let mut mus: Vec<f64> = members.iter().map(|&s| first_step.mus[s]).collect();
                match crate::npl::minimize_pseudo_likelihood(
                    panel,
                    &scope,
                    &pbars,
                    &mut slope,
                    &mut mus,
                    &npl_cfg,
                ) {
                    Ok(_) => slope.as_vector(),
                    Err(_) => centers_now[kk].clone(),
                }
            })
            .collect();
    }
    (centers, total)
}

/// Initial centers for `k` clusters: grow the count one at a time, at each
/// level refining every candidate set (distinct k-means restarts plus the
/// previous level's centers with one new center seeded at the worst-fit
/// group) and keeping the best total assigned profile objective. The
/// incremental candidate recovers structures where k-means merges two close
/// clusters and splits a dispersed one.
fn best_refined_centers(
    panel: &Panel,
    first_step: &FirstStep,
    k: usize,
    config: &ClassoConfig,
) -> Vec<DVector<f64>> {
    let mut prev: Option<Vec<DVector<f64>>> = None;
    for kk in 1..=k {
        let mut rng = rng::stream(config.seed, &[tag::KMEANS, kk as u64]);
        let mut candidates = initial_center_candidates(
            &first_step.slopes,
            kk,
            config.kmeans_restarts,
            config.init_candidates,
            &mut rng,
        );
        if let Some(prev_centers) = &prev {
            let worst = worst_fit_group(panel, first_step, prev_centers, config);
            let mut grown = prev_centers.clone();
            grown.push(first_step.slopes[worst].clone());
            candidates.push(grown);
        }
        let mut best: Option<(Vec<DVector<f64>>, f64)> = None;
        for cand in &candidates {
            let (refined, score) = refine_centers_by_pooled_fit(panel, first_step, cand, config);
            if best.as_ref().is_none_or(|(_, b)| score < *b) {
                best = Some((refined, score));
            }
        }
        prev = Some(best.expect("at least one candidate center set").0);
    }
    prev.expect("k >= 1")
}

/// The group whose best profile fit under the given centers is worst.
fn worst_fit_group(
    panel: &Panel,
    first_step: &FirstStep,
    centers: &[DVector<f64>],
    config: &ClassoConfig,
) -> usize {
    let g_count = first_step.scope.len();
    let scores: Vec<f64> = exec::map_indexed(g_count, |s| {
        let group = panel.group(first_step.scope[s]);
        let mut best_q = f64::INFINITY;
        for c in centers {
            let slope = SlopeParams::from_vector(c);
            let a = crate::npl::theta_part_indices(group, &slope, &first_step.pbars[s]);
            let (mu, _) = crate::npl::solve_mu_on(
                &a,
                group.y(),
                -config.mu_bound,
                config.mu_bound,
                first_step.mus[s],
            );
            best_q = best_q.min(crate::npl::group_nll_from_parts(&a, group.y(), mu));
        }
        best_q
    });
    scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite objectives"))
        .map(|(s, _)| s)
        .expect("nonempty scope")
}

/// Dispersion scale of the first-step slopes: root mean squared deviation
/// from their mean.
fn slope_dispersion(slopes: &[DVector<f64>]) -> f64 {
    let g = slopes.len() as f64;
    let d = slopes[0].len();
    let mut mean = DVector::<f64>::zeros(d);
    for s in slopes {
        mean += s;
    }
    mean /= g;
    let ss: f64 = slopes.iter().map(|s| (s - &mean).norm_squared()).sum();
    (ss / g).sqrt()
}

/// Default penalty level for a first step on this panel.
pub fn auto_rho(panel: &Panel, first_step: &FirstStep, rho_scale: f64) -> f64 {
    let nbar = first_step.scope.iter().map(|&g| panel.group(g).n() as f64).sum::<f64>()
        / first_step.scope.len() as f64;
    rho_scale * slope_dispersion(&first_step.slopes) * nbar.powf(-1.0 / 3.0)
}

#[derive(Clone)]
struct SweepState {
    thetas: Vec<DVector<f64>>,
    mus: Vec<f64>,
    q_vals: Vec<f64>,
    centers: Vec<DVector<f64>>,
}

impl SweepState {
    fn objective(&self, rho: f64) -> f64 {
        let g = self.thetas.len() as f64;
        let mut acc = 0.0;
        for (theta, q) in self.thetas.iter().zip(&self.q_vals) {
            acc += q + rho * penalty_value(theta, &self.centers);
        }
        acc / g
    }
}

/// Classify groups into `k` clusters at penalty `rho` (or the automatic
/// level), beliefs frozen at the first step.
pub fn classo_fit(
    panel: &Panel,
    first_step: &FirstStep,
    k: usize,
    config: &ClassoConfig,
) -> Result<ClusterSolution> {
    let g_count = first_step.scope.len();
    if g_count == 0 {
        return Err(Error::InvalidConfig("empty first step".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("cluster count must be at least 1".into()));
    }
    if k > g_count {
        return Err(Error::InvalidConfig(format!("{k} clusters requested for {g_count} groups")));
    }
    let rho = match config.rho {
        Some(r) if r >= 0.0 => r,
        Some(r) => return Err(Error::InvalidConfig(format!("negative penalty level {r}"))),
        None => auto_rho(panel, first_step, config.rho_scale),
    };

    let centers = best_refined_centers(panel, first_step, k, config);
    let mut state = SweepState {
        thetas: first_step.slopes.clone(),
        mus: first_step.mus.clone(),
        q_vals: vec![f64::INFINITY; g_count],
        centers,
    };
    // Prime the cached profile values at the starting slopes.
    let primed: Vec<(f64, f64)> = exec::map_indexed(g_count, |s| {
        let group = panel.group(first_step.scope[s]);
        let slope = SlopeParams::from_vector(&state.thetas[s]);
        let a = crate::npl::theta_part_indices(group, &slope, &first_step.pbars[s]);
        let (mu, _) =
            crate::npl::solve_mu_on(&a, group.y(), -config.mu_bound, config.mu_bound, state.mus[s]);
        (crate::npl::group_nll_from_parts(&a, group.y(), mu), mu)
    });
    for (s, (q, mu)) in primed.into_iter().enumerate() {
        state.q_vals[s] = q;
        state.mus[s] = mu;
    }

    let run_sweep = |state: &mut SweepState| -> f64 {
        // Slope block updates, centers fixed. Candidates per group: the
        // Newton stationary point, snapping onto each center, staying put.
        let centers_now = state.centers.clone();
        let thetas_now = state.thetas.clone();
        let mus_now = state.mus.clone();
        let q_now = state.q_vals.clone();
        let updates: Vec<(DVector<f64>, f64, f64, f64)> = exec::map_indexed(g_count, |s| {
            let group = panel.group(first_step.scope[s]);
            // A slope sitting exactly on a center is a non-smooth point of
            // the penalty; restart the Newton from the first-step slope.
            let snapped = centers_now.iter().any(|c| (&thetas_now[s] - c).norm() < 1e-9);
            let start = if snapped { &first_step.slopes[s] } else { &thetas_now[s] };
            let (ntheta, nval, nmu) = penalized_group_newton(
                panel,
                first_step.scope[s],
                &first_step.pbars[s],
                start,
                rho,
                &centers_now,
                mus_now[s],
                config.mu_bound,
                config.newton_max_iter,
                config.newton_grad_tol,
            );
            let nq = nval - rho * penalty_value(&ntheta, &centers_now);
            let mut best = (ntheta, nval, nmu, nq);
            for c in &centers_now {
                let slope = SlopeParams::from_vector(c);
                let a = crate::npl::theta_part_indices(group, &slope, &first_step.pbars[s]);
                let (cmu, _) = crate::npl::solve_mu_on(
                    &a,
                    group.y(),
                    -config.mu_bound,
                    config.mu_bound,
                    mus_now[s],
                );
                let cq = crate::npl::group_nll_from_parts(&a, group.y(), cmu);
                let cval = cq + rho * penalty_value(c, &centers_now);
                if cval < best.1 {
                    best = (c.clone(), cval, cmu, cq);
                }
            }
            let current_val = q_now[s] + rho * penalty_value(&thetas_now[s], &centers_now);
            if current_val < best.1 {
                best = (thetas_now[s].clone(), current_val, mus_now[s], q_now[s]);
            }
            best
        });
        for (s, (theta, _val, mu, q)) in updates.into_iter().enumerate() {
            state.thetas[s] = theta;
            state.mus[s] = mu;
            state.q_vals[s] = q;
        }

        // Center updates, sequential so each sees the latest others.
        for kk in 0..k {
            let weights: Vec<f64> = state
                .thetas
                .iter()
                .map(|theta| {
                    state
                        .centers
                        .iter()
                        .enumerate()
                        .filter(|(l, _)| *l != kk)
                        .map(|(_, c)| (theta - c).norm())
                        .product()
                })
                .collect();
            state.centers[kk] =
                weighted_geometric_median(&state.thetas, &weights, &state.centers[kk], 200, 1e-10);
        }
        state.objective(rho)
    };

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut reseeds_left = k;
    let mut sweep = 0usize;
    let mut prev = f64::INFINITY;
    while sweep < config.max_sweeps {
        let f = run_sweep(&mut state);
        sweep += 1;
        trace.push(f);
        let settled =
            prev.is_finite() && (prev - f).abs() <= config.sweep_tol * prev.abs().max(1.0);
        prev = f;
        if !settled {
            continue;
        }
        // Settled: try to revive empty clusters, otherwise stop.
        let membership = assign_clusters(&state.thetas, &state.centers)?;
        let empty: Vec<usize> = (0..k).filter(|kk| !membership.contains(kk)).collect();
        if empty.is_empty() || reseeds_left == 0 {
            converged = true;
            break;
        }
        let saved = state.clone();
        for &kk in &empty {
            // Move the dead center to the slope farthest from all centers.
            let far = (0..g_count)
                .max_by(|&a, &b| {
                    let da = state
                        .centers
                        .iter()
                        .map(|c| (&state.thetas[a] - c).norm_squared())
                        .fold(f64::INFINITY, f64::min);
                    let db = state
                        .centers
                        .iter()
                        .map(|c| (&state.thetas[b] - c).norm_squared())
                        .fold(f64::INFINITY, f64::min);
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("nonempty scope");
            state.centers[kk] = state.thetas[far].clone();
        }
        // Keep the reseed only if the following sweep does not lose ground.
        let f2 = run_sweep(&mut state);
        sweep += 1;
        if f2 <= f {
            trace.push(f2);
            prev = f2;
            reseeds_left -= 1;
        } else {
            state = saved;
            converged = true;
            break;
        }
    }

    // Canonical center order: lexicographic by coordinates.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ca = &state.centers[a];
        let cb = &state.centers[b];
        for i in 0..ca.len() {
            match ca[i].partial_cmp(&cb[i]).expect("finite centers") {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    let centers: Vec<DVector<f64>> = order.iter().map(|&o| state.centers[o].clone()).collect();
    let membership = assign_clusters(&state.thetas, &centers)?;
    let empty_clusters: Vec<usize> = (0..k).filter(|kk| !membership.contains(kk)).collect();

    Ok(ClusterSolution {
        scope: first_step.scope.clone(),
        per_group_slopes: state.thetas,
        centers,
        membership,
        rho,
        objective_trace: trace,
        converged,
        empty_clusters,
    })
}

/// Pooled re-estimation within each cluster. Entry `k` of the result is the
/// fit over the groups assigned to cluster `k` (an error for empty clusters;
/// not fatal to the others).
pub fn post_classification_fit(
    panel: &Panel,
    scope: &[usize],
    membership: &[usize],
    k: usize,
    config: &NplConfig,
) -> Vec<Result<NplFit>> {
    (0..k)
        .map(|kk| {
            let cluster_scope: Vec<usize> = scope
                .iter()
                .zip(membership)
                .filter(|&(_, &m)| m == kk)
                .map(|(&g, _)| g)
                .collect();
            if cluster_scope.is_empty() {
                return Err(Error::InvalidConfig(format!("cluster {kk} has no groups")));
            }
            npl_fit(panel, &cluster_scope, &NplInit::default(), config)
        })
        .collect()
}
