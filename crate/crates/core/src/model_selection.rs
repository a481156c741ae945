//! Selection of the cluster count by information criterion.
//!
//! For each candidate count `K` the full classification-and-refit pipeline
//! runs, and the criterion
//!
//! ```text
//! IC(K) = fit(K) + lambda * p * K
//! ```
//!
//! is evaluated, where `fit(K)` averages the individual negative
//! log-likelihood over all individuals at the cluster slope of the group's
//! assigned cluster and the concentrated fixed effect, with beliefs frozen
//! at the first step, and `p` is the slope dimension. The selected count
//! minimizes IC with ties broken toward the smaller `K`.
//!
//! The recommended penalty level is `lambda = log(log(nbar)) / (4 nbar)`
//! with `nbar` the mean group size; unbalanced panels use the mean size and
//! the fit term divides by the total individual count.

use nalgebra::DVector;

use crate::classo::{ClassoConfig, ClusterSolution, FirstStep, classo_fit, post_classification_fit};
use crate::data::Panel;
use crate::exec;
use crate::logit::{SlopeParams, nll_individual};
use crate::npl::{NplConfig, NplFit, solve_mu_on, theta_part_indices};
use crate::{Error, Result};

/// Result of one candidate cluster count.
#[derive(Debug)]
pub struct IcRecord {
    pub k: usize,
    pub ic: f64,
    pub fit_term: f64,
    pub penalty: f64,
    pub solution: ClusterSolution,
    /// Post-classification fits, entry per cluster (empty clusters carry
    /// their error).
    pub cluster_fits: Vec<Result<NplFit>>,
}

/// All candidate records plus the selection.
#[derive(Debug)]
pub struct IcTable {
    pub records: Vec<IcRecord>,
    /// Candidate counts whose pipeline failed outright: (K, message).
    pub failures: Vec<(usize, String)>,
    pub selected_k: usize,
    pub lambda: f64,
}

impl IcTable {
    pub fn selected(&self) -> &IcRecord {
        self.records
            .iter()
            .find(|r| r.k == self.selected_k)
            .expect("selected K has a record")
    }
}

/// Recommended criterion level `log(log(nbar)) / (4 nbar)`.
pub fn recommended_lambda(mean_group_size: f64) -> f64 {
    let n = mean_group_size.max(3.0);
    0.25 * n.ln().ln() / n
}

/// The criterion value for a given membership and per-cluster slopes:
/// `(fit term, IC)`. The fit term concentrates each group's fixed effect at
/// its cluster slope under the first-step beliefs.
pub fn compute_ic(
    panel: &Panel,
    first_step: &FirstStep,
    membership: &[usize],
    cluster_slopes: &[SlopeParams],
    lambda: f64,
    mu_bound: f64,
) -> Result<(f64, f64)> {
    if membership.len() != first_step.scope.len() {
        return Err(Error::Dimension(format!(
            "{} membership entries for {} groups",
            membership.len(),
            first_step.scope.len()
        )));
    }
    let k = cluster_slopes.len();
    let mut total_nll = 0.0;
    let mut total_n = 0usize;
    for (s, &g) in first_step.scope.iter().enumerate() {
        let cluster = membership[s];
        if cluster >= k {
            return Err(Error::Dimension(format!(
                "membership {cluster} out of range for {k} clusters"
            )));
        }
        let group = panel.group(g);
        let slope = &cluster_slopes[cluster];
        let a = theta_part_indices(group, slope, &first_step.pbars[s]);
        let (mu, _) = solve_mu_on(&a, group.y(), -mu_bound, mu_bound, first_step.mus[s]);
        for (i, &yi) in group.y().iter().enumerate() {
            total_nll += nll_individual(yi, mu + a[i]);
        }
        total_n += group.n();
    }
    let p = 1 + panel.p();
    let fit_term = total_nll / total_n as f64;
    let ic = fit_term + lambda * p as f64 * k as f64;
    Ok((fit_term, ic))
}

/// Run classification and post-classification fits for every `K` up to
/// `k_max` and pick the criterion minimizer.
pub fn select_k(
    panel: &Panel,
    first_step: &FirstStep,
    k_max: usize,
    lambda: Option<f64>,
    classo_config: &ClassoConfig,
    npl_config: &NplConfig,
) -> Result<IcTable> {
    if k_max == 0 {
        return Err(Error::InvalidConfig("k_max must be at least 1".into()));
    }
    let nbar = first_step.scope.iter().map(|&g| panel.group(g).n() as f64).sum::<f64>()
        / first_step.scope.len() as f64;
    let lambda = lambda.unwrap_or_else(|| recommended_lambda(nbar));

    let per_k: Vec<std::result::Result<IcRecord, (usize, String)>> =
        exec::map_indexed(k_max, |ki| {
            let k = ki + 1;
            let solution = classo_fit(panel, first_step, k, classo_config)
                .map_err(|e| (k, e.to_string()))?;
            let cluster_fits = post_classification_fit(
                panel,
                &solution.scope,
                &solution.membership,
                k,
                npl_config,
            );
            // Slopes per cluster; a failed or empty cluster fails this K
            // unless the cluster is empty (then its slope is its center and
            // it carries no groups in the fit term).
            let mut slopes: Vec<SlopeParams> = Vec::with_capacity(k);
            for (kk, fit) in cluster_fits.iter().enumerate() {
                match fit {
                    Ok(f) => slopes.push(f.slope.clone()),
                    Err(_) if solution.empty_clusters.contains(&kk) => {
                        slopes.push(SlopeParams::from_vector(&solution.centers[kk]));
                    }
                    Err(e) => return Err((k, e.to_string())),
                }
            }
            let (fit_term, ic) = compute_ic(
                panel,
                first_step,
                &solution.membership,
                &slopes,
                lambda,
                classo_config.mu_bound,
            )
            .map_err(|e| (k, e.to_string()))?;
            Ok(IcRecord {
                k,
                ic,
                fit_term,
                penalty: lambda * (1 + panel.p()) as f64 * k as f64,
                solution,
                cluster_fits,
            })
        });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for entry in per_k {
        match entry {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    if records.is_empty() {
        return Err(Error::NonConvergence(format!(
            "every candidate cluster count failed: {failures:?}"
        )));
    }
    // Smallest K wins ties.
    let mut selected_k = records[0].k;
    let mut best_ic = records[0].ic;
    for rec in &records[1..] {
        if rec.ic < best_ic {
            best_ic = rec.ic;
            selected_k = rec.k;
        }
    }
    Ok(IcTable { records, failures, selected_k, lambda })
}

/// Cluster slopes of a record as plain vectors (peer effect first).
pub fn record_cluster_slopes(record: &IcRecord) -> Vec<Option<DVector<f64>>> {
    record
        .cluster_fits
        .iter()
        .map(|f| f.as_ref().ok().map(|fit| fit.slope.as_vector()))
        .collect()
}
