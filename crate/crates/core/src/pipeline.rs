//! Batch pipeline: estimation, model selection, inference.
//!
//! The stages run in order on a loaded panel:
//!
//! 1. separate fit per group, yielding slopes and belief profiles;
//! 2. penalized classification and per-cluster re-estimation for every
//!    candidate cluster count up to `k_max`, with criterion-based selection;
//! 3. parametric bootstrap within each selected cluster for debiased
//!    coefficients and confidence intervals.
//!
//! The report is a plain data structure serialized to JSON. It contains no
//! wall-clock times and all maps are ordered, so a fixed seed produces
//! byte-identical reports for any worker count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{BootstrapConfig, bootstrap_coordinates};
use crate::classo::{ClassoConfig, FirstStep, auto_rho};
use crate::data::Panel;
use crate::model_selection::select_k;
use crate::npl::{NplConfig, npl_fit_per_group};
use crate::{Error, Result};

/// Pipeline settings; defaults mirror the module-level defaults everywhere.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub k_max: usize,
    pub npl: NplConfig,
    pub classo: ClassoConfig,
    /// Criterion level; `None` uses the recommended value.
    pub lambda: Option<f64>,
    pub bootstrap: BootstrapConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_max: 4,
            npl: NplConfig::default(),
            classo: ClassoConfig::default(),
            lambda: None,
            bootstrap: BootstrapConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::InvalidConfig("k_max must be at least 1".into()));
        }
        if !(0.0 < self.bootstrap.alpha && self.bootstrap.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0,1)".into()));
        }
        if self.npl.ccp_tol <= 0.0 || self.npl.equilibrium.tol <= 0.0 {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// One coefficient's estimate and inference within a cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub name: String,
    pub point: f64,
    pub debiased: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub bootstrap_failures: Option<usize>,
    pub unreliable: Option<bool>,
}

/// One selected cluster's block of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster: usize,
    pub groups: Vec<String>,
    pub converged: bool,
    pub estimates: Vec<CoefficientReport>,
    pub fixed_effects: BTreeMap<String, f64>,
    pub clamped_groups: Vec<String>,
    pub rank_deficient: bool,
    /// Set when the post fit or bootstrap for this cluster failed.
    pub error: Option<String>,
}

/// IC table row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcRow {
    pub k: usize,
    pub ic: f64,
    pub fit_term: f64,
    pub penalty: f64,
    pub classification_converged: bool,
    pub empty_clusters: Vec<usize>,
}

/// Machine-readable pipeline output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub format_version: u32,
    pub seed: u64,
    pub k_max: usize,
    pub alpha: f64,
    pub bootstrap_replications: usize,
    pub lambda: f64,
    pub rho: f64,
    pub group_count: usize,
    pub total_individuals: usize,
    /// Groups whose first-step fit failed: id -> message.
    pub first_step_failures: BTreeMap<String, String>,
    /// First-step fits that ran out of iterations (count only; they remain
    /// usable).
    pub first_step_unconverged: usize,
    pub ic_table: Vec<IcRow>,
    /// Candidate counts that failed outright: K -> message.
    pub ic_failures: BTreeMap<usize, String>,
    pub selected_k: usize,
    /// group id -> cluster index at the selected count.
    pub memberships: BTreeMap<String, usize>,
    pub clusters: Vec<ClusterReport>,
}

/// Run estimation, model selection and inference on a panel.
pub fn run_pipeline(panel: &Panel, config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate()?;
    if panel.n_groups() == 0 {
        return Err(Error::Data("panel has no groups".into()));
    }

    // Stage 1: separate fit per group.
    let per_group = npl_fit_per_group(panel, &config.npl);
    let first_step = FirstStep::from_fits(panel, &per_group, config.npl.mu_bound)?;
    let first_step_failures: BTreeMap<String, String> = first_step
        .failures
        .iter()
        .map(|(g, msg)| (panel.group(*g).group_id().to_string(), msg.clone()))
        .collect();

    // Stage 2: classification and selection.
    let mut classo = config.classo.clone();
    classo.seed = config.seed;
    let rho = classo.rho.unwrap_or_else(|| auto_rho(panel, &first_step, classo.rho_scale));
    let table = select_k(panel, &first_step, config.k_max, config.lambda, &classo, &config.npl)?;

    let ic_table: Vec<IcRow> = table
        .records
        .iter()
        .map(|r| IcRow {
            k: r.k,
            ic: r.ic,
            fit_term: r.fit_term,
            penalty: r.penalty,
            classification_converged: r.solution.converged,
            empty_clusters: r.solution.empty_clusters.clone(),
        })
        .collect();
    let ic_failures: BTreeMap<usize, String> = table.failures.iter().cloned().collect();

    let selected = table.selected();
    let memberships: BTreeMap<String, usize> = selected
        .solution
        .scope
        .iter()
        .zip(&selected.solution.membership)
        .map(|(&g, &k)| (panel.group(g).group_id().to_string(), k))
        .collect();

    // Stage 3: bootstrap inference cluster by cluster.
    let names = {
        let mut v = vec!["peer_effect".to_string()];
        for j in 1..=panel.p() {
            v.push(format!("x_{j}"));
        }
        v
    };
    let mut clusters = Vec::with_capacity(selected.k);
    for (kk, fit) in selected.cluster_fits.iter().enumerate() {
        let groups: Vec<String> = selected
            .solution
            .scope
            .iter()
            .zip(&selected.solution.membership)
            .filter(|&(_, &m)| m == kk)
            .map(|(&g, _)| panel.group(g).group_id().to_string())
            .collect();
        match fit {
            Err(e) => clusters.push(ClusterReport {
                cluster: kk,
                groups,
                converged: false,
                estimates: Vec::new(),
                fixed_effects: BTreeMap::new(),
                clamped_groups: Vec::new(),
                rank_deficient: false,
                error: Some(e.to_string()),
            }),
            Ok(f) => {
                let fixed_effects: BTreeMap<String, f64> = f
                    .scope
                    .iter()
                    .zip(&f.fixed_effects)
                    .map(|(&g, &mu)| (panel.group(g).group_id().to_string(), mu))
                    .collect();
                let clamped_groups: Vec<String> = f
                    .diagnostics
                    .clamped_fixed_effects
                    .iter()
                    .map(|&s| panel.group(f.scope[s]).group_id().to_string())
                    .collect();
                let theta = f.slope.as_vector();
                let mut boot_cfg = config.bootstrap.clone();
                boot_cfg.seed =
                    crate::rng::derive_key(config.seed, &[crate::rng::tag::BOOTSTRAP, kk as u64]);
                let (estimates, boot_error) = if config.bootstrap.replications >= 2 && f.converged
                {
                    match bootstrap_coordinates(panel, f, &boot_cfg, &config.npl) {
                        Ok(reports) => (
                            reports
                                .iter()
                                .enumerate()
                                .map(|(j, r)| CoefficientReport {
                                    name: names[j].clone(),
                                    point: r.point,
                                    debiased: Some(r.debiased),
                                    ci: Some(r.ci),
                                    bootstrap_failures: Some(r.failures),
                                    unreliable: Some(r.unreliable),
                                })
                                .collect(),
                            None,
                        ),
                        Err(e) => (point_only(&names, &theta), Some(e.to_string())),
                    }
                } else {
                    (point_only(&names, &theta), None)
                };
                clusters.push(ClusterReport {
                    cluster: kk,
                    groups,
                    converged: f.converged,
                    estimates,
                    fixed_effects,
                    clamped_groups,
                    rank_deficient: f.diagnostics.rank_deficient,
                    error: boot_error,
                });
            }
        }
    }

    Ok(PipelineReport {
        format_version: 1,
        seed: config.seed,
        k_max: config.k_max,
        alpha: config.bootstrap.alpha,
        bootstrap_replications: config.bootstrap.replications,
        lambda: table.lambda,
        rho,
        group_count: panel.n_groups(),
        total_individuals: panel.total_individuals(),
        first_step_failures,
        first_step_unconverged: first_step.unconverged,
        ic_table,
        ic_failures,
        selected_k: table.selected_k,
        memberships,
        clusters,
    })
}

fn point_only(names: &[String], theta: &nalgebra::DVector<f64>) -> Vec<CoefficientReport> {
    names
        .iter()
        .zip(theta.iter())
        .map(|(name, &point)| CoefficientReport {
            name: name.clone(),
            point,
            debiased: None,
            ci: None,
            bootstrap_failures: None,
            unreliable: None,
        })
        .collect()
}

/// IC table as CSV (`k,ic,fit_term,penalty`).
pub fn ic_table_csv(report: &PipelineReport) -> String {
    let mut out = String::from("k,ic,fit_term,penalty\n");
    for row in &report.ic_table {
        out.push_str(&format!("{},{},{},{}\n", row.k, row.ic, row.fit_term, row.penalty));
    }
    out
}

/// Human-readable rendering of the report.
pub fn render_text(report: &PipelineReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "groups: {}   individuals: {}   seed: {}\n",
        report.group_count, report.total_individuals, report.seed
    ));
    out.push_str(&format!(
        "lambda: {:.6}   rho: {:.6}   bootstrap: B = {}, alpha = {}\n\n",
        report.lambda, report.rho, report.bootstrap_replications, report.alpha
    ));
    out.push_str("  K        IC  fit term   penalty\n");
    for row in &report.ic_table {
        let marker = if row.k == report.selected_k { "*" } else { " " };
        out.push_str(&format!(
            "{marker} {:<3} {:>9.6} {:>9.6} {:>9.6}\n",
            row.k, row.ic, row.fit_term, row.penalty
        ));
    }
    for (k, msg) in &report.ic_failures {
        out.push_str(&format!("  {k} failed: {msg}\n"));
    }
    out.push_str(&format!("\nselected K = {}\n", report.selected_k));
    for c in &report.clusters {
        out.push_str(&format!("\ncluster {} ({} groups)", c.cluster + 1, c.groups.len()));
        if !c.converged {
            out.push_str("  [not converged]");
        }
        out.push('\n');
        if let Some(e) = &c.error {
            out.push_str(&format!("  error: {e}\n"));
        }
        for est in &c.estimates {
            match (est.debiased, est.ci) {
                (Some(d), Some(ci)) => out.push_str(&format!(
                    "  {:<12} point {:>9.4}  debiased {:>9.4}  ci [{:>9.4}, {:>9.4}]\n",
                    est.name, est.point, d, ci[0], ci[1]
                )),
                _ => out.push_str(&format!("  {:<12} point {:>9.4}\n", est.name, est.point)),
            }
        }
    }
    if !report.first_step_failures.is_empty() {
        out.push_str(&format!(
            "\nfirst-step failures: {}\n",
            report.first_step_failures.len()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{DgpConfig, generate_panel};

    fn small_config(boot: usize) -> PipelineConfig {
        PipelineConfig {
            k_max: 3,
            bootstrap: BootstrapConfig { replications: boot, seed: 0, ..Default::default() },
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn pipeline_on_simulated_panel_recovers_structure() {
        let dgp = DgpConfig { group_count: 24, group_size: 100, seed: 2, ..DgpConfig::default() };
        let (panel, truth) = generate_panel(&dgp, 0).unwrap();
        let report = run_pipeline(&panel, &small_config(8)).unwrap();
        assert_eq!(report.selected_k, 3, "ic table {:?}",
            report.ic_table.iter().map(|r| (r.k, r.ic)).collect::<Vec<_>>());
        // Memberships agree with the truth up to relabeling.
        let est: Vec<usize> = panel
            .groups()
            .iter()
            .map(|g| report.memberships[g.group_id()])
            .collect();
        let tr: Vec<usize> = panel
            .groups()
            .iter()
            .map(|g| truth.cluster_of_group[g.group_id()])
            .collect();
        let acc = crate::simulation::classification_accuracy(&est, &tr, 3);
        assert!(acc >= 0.8, "accuracy {acc}");
        // Every cluster report carries full inference output.
        for c in &report.clusters {
            assert!(c.error.is_none());
            for e in &c.estimates {
                assert!(e.debiased.is_some() && e.ci.is_some());
            }
        }
        let csv = ic_table_csv(&report);
        assert_eq!(csv.lines().count(), 1 + report.ic_table.len());
        let text = render_text(&report);
        assert!(text.contains("selected K = 3"));
    }

    #[test]
    fn k_max_one_is_the_pooled_workflow() {
        let dgp = DgpConfig { group_count: 8, group_size: 40, seed: 3, ..DgpConfig::default() };
        let (panel, _) = generate_panel(&dgp, 0).unwrap();
        let mut cfg = small_config(6);
        cfg.k_max = 1;
        let report = run_pipeline(&panel, &cfg).unwrap();
        assert_eq!(report.selected_k, 1);
        assert_eq!(report.clusters.len(), 1);
        assert_eq!(report.clusters[0].groups.len(), 8);
        // The single cluster's point estimate equals the pooled fit.
        let pooled = crate::npl::npl_fit_all(&panel, &Default::default(), &cfg.npl).unwrap();
        let est = &report.clusters[0].estimates;
        assert!((est[0].point - pooled.slope.peer_effect).abs() < 1e-12);
    }

    #[test]
    fn report_serialization_is_deterministic() {
        let dgp = DgpConfig { group_count: 6, group_size: 25, seed: 4, ..DgpConfig::default() };
        let (panel, _) = generate_panel(&dgp, 0).unwrap();
        let cfg = small_config(4);
        let a = serde_json::to_string_pretty(&run_pipeline(&panel, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string_pretty(&run_pipeline(&panel, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PipelineConfig { k_max: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
