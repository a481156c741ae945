//! Simulation engine and replication harness.
//!
//! Panels are generated from a three-cluster (configurable) design: each
//! individual draws a friend count uniformly on `{0, ..., max_friends}` and
//! that many distinct influencers; the group fixed effect is a cluster
//! intercept plus a standard normal draw; the covariate loads on the fixed
//! effect (`x = x_loading * mu + noise`); outcomes come from the exact
//! equilibrium beliefs solved to high precision.
//!
//! The replication harness runs the full pipeline (or its oracle-grouping
//! variant) over many generated panels and aggregates cluster-count
//! selection frequencies, permutation-matched classification accuracy, and
//! per-cluster bias, RMSE and coverage for the original and debiased
//! estimators. Every replication draws from a stream derived from
//! `(seed, replication index)`, so summaries do not depend on scheduling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{BootstrapConfig, bootstrap_coordinates};
use crate::classo::{ClassoConfig, FirstStep, post_classification_fit};
use crate::data::{DgpTruth, GroupData, Panel, TrueCoefficients};
use crate::equilibrium::{EquilibriumConfig, simulate_outcomes, solve_equilibrium};
use crate::exec;
use crate::logit::{GroupParams, SlopeParams};
use crate::model_selection::select_k;
use crate::npl::{NplConfig, NplInit, npl_fit_all, npl_fit_per_group};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Per-group generation output: the group, its cluster, its composite fixed
/// effect, and its equilibrium beliefs.
type BuiltGroup = (GroupData, usize, f64, Vec<f64>);

/// Debiased coefficient vector and truth-coverage flags for one cluster.
type DebiasOutcome = (Option<DVector<f64>>, Option<Vec<bool>>);

/// True slope block and intercept of one design cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDesign {
    pub peer_effect: f64,
    pub covariate_slopes: Vec<f64>,
    pub intercept: f64,
}

/// Data-generating design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub group_count: usize,
    pub group_size: usize,
    /// Friend counts are uniform on `{0, ..., max_friends}`.
    pub max_friends: usize,
    pub cluster_proportions: Vec<f64>,
    pub clusters: Vec<ClusterDesign>,
    /// Standard deviation of the group fixed-effect draw.
    pub mu_sd: f64,
    /// Loading of the covariate on the fixed effect.
    pub x_loading: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            group_count: 100,
            group_size: 100,
            max_friends: 5,
            cluster_proportions: vec![0.3, 0.3, 0.4],
            clusters: vec![
                ClusterDesign { peer_effect: 1.5, covariate_slopes: vec![-1.0], intercept: -0.5 },
                ClusterDesign { peer_effect: 0.75, covariate_slopes: vec![0.0], intercept: -0.25 },
                ClusterDesign { peer_effect: 0.0, covariate_slopes: vec![1.0], intercept: 0.0 },
            ],
            mu_sd: 1.0,
            x_loading: 0.1,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_count == 0 || self.group_size == 0 {
            return Err(Error::InvalidConfig("group count and size must be positive".into()));
        }
        if self.clusters.is_empty() || self.clusters.len() != self.cluster_proportions.len() {
            return Err(Error::InvalidConfig(
                "cluster designs and proportions must align and be nonempty".into(),
            ));
        }
        let total: f64 = self.cluster_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.cluster_proportions.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidConfig("cluster proportions must sum to one".into()));
        }
        let p = self.clusters[0].covariate_slopes.len();
        for c in &self.clusters {
            if c.peer_effect.abs() >= 4.0 {
                return Err(Error::InvalidConfig(format!(
                    "cluster peer effect {} outside the contraction region",
                    c.peer_effect
                )));
            }
            if c.covariate_slopes.len() != p {
                return Err(Error::InvalidConfig("clusters disagree on covariate count".into()));
            }
        }
        Ok(())
    }

    /// Covariate dimension of the design.
    pub fn p(&self) -> usize {
        self.clusters[0].covariate_slopes.len()
    }
}

/// Largest-remainder rounding of `G * proportion_k` to integer sizes that
/// sum to `G`; exact where the products are integral.
pub fn cluster_sizes(group_count: usize, proportions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * group_count as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).expect("finite remainders").then(a.cmp(&b))
    });
    for i in 0..group_count - assigned {
        sizes[order[i % proportions.len()]] += 1;
    }
    sizes
}

/// Generate one panel with recorded truth. The replication index
/// individualizes the stream; group `g` of replication `r` always draws the
/// same numbers.
pub fn generate_panel(config: &DgpConfig, replication: u64) -> Result<(Panel, DgpTruth)> {
    use rand::RngExt;
    use rand_distr::{Distribution, StandardNormal};

    config.validate()?;
    let sizes = cluster_sizes(config.group_count, &config.cluster_proportions);
    let mut cluster_of: Vec<usize> = Vec::with_capacity(config.group_count);
    for (k, &sz) in sizes.iter().enumerate() {
        cluster_of.extend(std::iter::repeat_n(k, sz));
    }
    let width = config.group_count.to_string().len();
    let n = config.group_size;
    let p = config.p();

    let built: Vec<Result<BuiltGroup>> =
        exec::map_indexed(config.group_count, |g| {
            let mut rng = rng::stream(config.seed, &[tag::PANEL, replication, g as u64]);
            let cluster = cluster_of[g];
            let design = &config.clusters[cluster];
            let mu_draw: f64 = StandardNormal.sample(&mut rng);
            let mu = config.mu_sd * mu_draw;
            let composite = design.intercept + mu;

            // Directed network: friend count uniform, influencers sampled
            // without replacement from the other members.
            let neighbors: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let cap = config.max_friends.min(n - 1);
                    let deg = rng.random_range(0..=cap);
                    let mut v: Vec<usize> = rand::seq::index::sample(&mut rng, n - 1, deg)
                        .into_iter()
                        .map(|t| if t >= i { t + 1 } else { t })
                        .collect();
                    v.sort_unstable();
                    v
                })
                .collect();

            let x = DMatrix::from_fn(n, p, |_, _| {
                let e: f64 = StandardNormal.sample(&mut rng);
                config.x_loading * mu + e
            });
            let gd = GroupData::new(
                format!("g{g:0width$}"),
                (0..n).map(|i| format!("{i}")).collect(),
                vec![0; n],
                x,
                neighbors,
            )?;
            let params = GroupParams::new(
                composite,
                SlopeParams::new(
                    design.peer_effect,
                    DVector::from_vec(design.covariate_slopes.clone()),
                ),
            );
            let eq = solve_equilibrium(&gd, &params, None, &EquilibriumConfig::default())?;
            let y = simulate_outcomes(&gd, &params, &eq.values, &mut rng)?;
            let gd = gd.with_outcomes(y)?;
            Ok((gd, cluster, composite, eq.values))
        });

    let mut groups = Vec::with_capacity(config.group_count);
    let mut truth = DgpTruth {
        cluster_of_group: Default::default(),
        coefficients: config
            .clusters
            .iter()
            .map(|c| TrueCoefficients {
                peer_effect: c.peer_effect,
                covariate_slopes: c.covariate_slopes.clone(),
            })
            .collect(),
        fixed_effects: Default::default(),
        equilibrium_ccp: Default::default(),
    };
    for item in built {
        let (gd, cluster, composite, eq) = item?;
        truth.cluster_of_group.insert(gd.group_id().to_string(), cluster);
        truth.fixed_effects.insert(gd.group_id().to_string(), composite);
        truth.equilibrium_ccp.insert(gd.group_id().to_string(), eq);
        groups.push(gd);
    }
    let panel = Panel::new(groups)?;
    truth.validate()?;
    Ok((panel, truth))
}

/// Permutation-matched classification accuracy: the best fraction of
/// agreeing groups over all relabelings of the estimated clusters, computed
/// by assignment over label subsets.
pub fn classification_accuracy(estimated: &[usize], truth: &[usize], k: usize) -> f64 {
    assert_eq!(estimated.len(), truth.len());
    if estimated.is_empty() {
        return 1.0;
    }
    // counts[e][t]: groups with estimated label e and true label t.
    let mut counts = vec![vec![0usize; k]; k];
    for (&e, &t) in estimated.iter().zip(truth) {
        counts[e][t] += 1;
    }
    // Max-weight assignment of estimated labels to true labels by subset
    // dynamic programming over true-label sets.
    let full = 1usize << k;
    let mut dp = vec![0usize; full];
    for e in 0..k {
        let mut next = vec![0usize; full];
        for mask in 0..full {
            if mask.count_ones() as usize != e {
                continue;
            }
            for t in 0..k {
                if mask & (1 << t) != 0 {
                    continue;
                }
                let cand = dp[mask] + counts[e][t];
                let m2 = mask | (1 << t);
                if cand > next[m2] {
                    next[m2] = cand;
                }
            }
        }
        dp = next;
    }
    dp[full - 1] as f64 / estimated.len() as f64
}

/// Match estimated cluster centers to true centers: entry `k` is the true
/// cluster assigned to estimated cluster `k`, minimizing the total
/// Euclidean distance between matched centers.
pub fn match_clusters_by_centers(
    estimated: &[DVector<f64>],
    truth: &[DVector<f64>],
) -> Vec<usize> {
    let k = estimated.len();
    assert_eq!(k, truth.len());
    let full = 1usize << k;
    // dp over subsets of true clusters, processing estimated clusters in order.
    let mut dp = vec![f64::INFINITY; full];
    let mut choice = vec![vec![usize::MAX; full]; k];
    dp[0] = 0.0;
    for e in 0..k {
        let mut next = vec![f64::INFINITY; full];
        for mask in 0..full {
            if mask.count_ones() as usize != e || !dp[mask].is_finite() {
                continue;
            }
            for t in 0..k {
                if mask & (1 << t) != 0 {
                    continue;
                }
                let cost = dp[mask] + (&estimated[e] - &truth[t]).norm();
                let m2 = mask | (1 << t);
                if cost < next[m2] {
                    next[m2] = cost;
                    choice[e][m2] = t;
                }
            }
        }
        dp = next;
    }
    // Walk back the choices.
    let mut out = vec![usize::MAX; k];
    let mut mask = full - 1;
    for e in (0..k).rev() {
        let t = choice[e][mask];
        out[e] = t;
        mask &= !(1 << t);
    }
    out
}

/// Per-coefficient accuracy summary for one cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStats {
    /// "peer_effect" or "x_j".
    pub name: String,
    pub truth: f64,
    pub median_bias: f64,
    pub rmse: f64,
    pub median_bias_debiased: Option<f64>,
    pub rmse_debiased: Option<f64>,
    /// Debiased-interval coverage at the 95 percent level.
    pub coverage95: Option<f64>,
}

/// Summary for one true cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterStats {
    pub cluster: usize,
    /// Replications contributing to the statistics.
    pub reps_used: usize,
    pub params: Vec<ParamStats>,
}

/// Aggregated replication study results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub format_version: u32,
    pub group_count: usize,
    pub group_size: usize,
    pub replications: usize,
    pub replication_failures: usize,
    pub bootstrap_replications: usize,
    pub k_max: usize,
    /// Frequency of selecting each candidate count, index `K - 1`.
    pub k_selection_freq: Vec<f64>,
    pub mean_classification_accuracy: Option<f64>,
    /// Post-classification (or oracle-grouping) estimator accuracy.
    pub cluster_stats: Vec<ClusterStats>,
    /// Pooled-estimator accuracy measured against each cluster's truth.
    pub pooled_stats: Option<Vec<ClusterStats>>,
    /// Wall-clock seconds; informational only, not seed-determined.
    pub runtime_secs: f64,
}

/// Replication study options.
#[derive(Debug, Clone)]
pub struct McOptions {
    pub replications: usize,
    pub k_max: usize,
    /// Bootstrap replicates per cluster; 0 disables debiasing and coverage.
    pub bootstrap_replications: usize,
    /// Also fit the misspecified pooled estimator each replication.
    pub pooled: bool,
    pub npl: NplConfig,
    pub classo: ClassoConfig,
    pub lambda: Option<f64>,
    pub alpha: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            replications: 100,
            k_max: 4,
            bootstrap_replications: 0,
            pooled: false,
            npl: NplConfig::default(),
            classo: ClassoConfig::default(),
            lambda: None,
            alpha: 0.05,
        }
    }
}

/// One replication's contribution.
struct RepOutcome {
    selected_k: usize,
    accuracy: f64,
    /// Estimated-cluster stats matched to true clusters; entry per true
    /// cluster: (original theta, debiased theta, covers flags).
    cluster_draws: Option<Vec<ClusterDraw>>,
    pooled_theta: Option<DVector<f64>>,
}

struct ClusterDraw {
    theta: DVector<f64>,
    debiased: Option<DVector<f64>>,
    covers: Option<Vec<bool>>,
}

fn truth_center(design: &ClusterDesign) -> DVector<f64> {
    let mut v = DVector::zeros(1 + design.covariate_slopes.len());
    v[0] = design.peer_effect;
    for (j, &b) in design.covariate_slopes.iter().enumerate() {
        v[1 + j] = b;
    }
    v
}

fn coefficient_names(p: usize) -> Vec<String> {
    let mut names = vec!["peer_effect".to_string()];
    for j in 1..=p {
        names.push(format!("x_{j}"));
    }
    names
}

/// Full-pipeline replication study: classification, selection, post fits,
/// optional bootstrap, optional pooled benchmark.
pub fn run_monte_carlo(config: &DgpConfig, options: &McOptions) -> Result<McSummary> {
    run_study(config, options, false)
}

/// Oracle-grouping study: true memberships replace classification,
/// isolating estimation error and the bootstrap correction.
pub fn run_oracle_study(config: &DgpConfig, options: &McOptions) -> Result<McSummary> {
    run_study(config, options, true)
}

fn run_study(config: &DgpConfig, options: &McOptions, oracle: bool) -> Result<McSummary> {
    config.validate()?;
    if options.replications == 0 {
        return Err(Error::InvalidConfig("at least one replication required".into()));
    }
    let start = std::time::Instant::now();
    let k_true = config.clusters.len();
    let truth_centers: Vec<DVector<f64>> = config.clusters.iter().map(truth_center).collect();

    let outcomes: Vec<std::result::Result<RepOutcome, String>> =
        exec::map_indexed(options.replications, |rep| {
            replicate(config, options, oracle, rep as u64, &truth_centers)
                .map_err(|e| e.to_string())
        });

    let mut k_counts = vec![0usize; options.k_max];
    let mut accuracy_sum = 0.0;
    let mut completed = 0usize;
    let mut failures = 0usize;
    let p = config.p();
    let names = coefficient_names(p);
    let dim = 1 + p;
    // draws[k][j]: per-cluster per-coordinate estimate draws.
    let mut draws: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); dim]; k_true];
    let mut draws_deb: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); dim]; k_true];
    let mut covers: Vec<Vec<Vec<bool>>> = vec![vec![Vec::new(); dim]; k_true];
    let mut pooled_draws: Vec<Vec<f64>> = vec![Vec::new(); dim];

    for out in outcomes {
        match out {
            Err(_) => failures += 1,
            Ok(rep) => {
                completed += 1;
                if rep.selected_k >= 1 && rep.selected_k <= options.k_max {
                    k_counts[rep.selected_k - 1] += 1;
                }
                accuracy_sum += rep.accuracy;
                if let Some(cluster_draws) = rep.cluster_draws {
                    for (k, cd) in cluster_draws.into_iter().enumerate() {
                        for j in 0..dim {
                            draws[k][j].push(cd.theta[j]);
                        }
                        if let Some(deb) = cd.debiased {
                            for j in 0..dim {
                                draws_deb[k][j].push(deb[j]);
                            }
                        }
                        if let Some(cov) = cd.covers {
                            for j in 0..dim {
                                covers[k][j].push(cov[j]);
                            }
                        }
                    }
                }
                if let Some(theta) = rep.pooled_theta {
                    for j in 0..dim {
                        pooled_draws[j].push(theta[j]);
                    }
                }
            }
        }
    }
    if completed == 0 {
        return Err(Error::NonConvergence("every replication failed".into()));
    }

    let stats_for = |k: usize, source: &[Vec<Vec<f64>>], deb: Option<&[Vec<Vec<f64>>]>,
                     cov: Option<&[Vec<Vec<bool>>]>| {
        let truth_vec = &truth_centers[k];
        let params: Vec<ParamStats> = (0..dim)
            .map(|j| {
                let tr = truth_vec[j];
                let errs: Vec<f64> = source[k][j].iter().map(|v| v - tr).collect();
                let (median_bias, rmse) = bias_rmse(&errs);
                let (mbd, rmsed) = match deb {
                    Some(d) if !d[k][j].is_empty() => {
                        let errs_d: Vec<f64> = d[k][j].iter().map(|v| v - tr).collect();
                        let (m, r) = bias_rmse(&errs_d);
                        (Some(m), Some(r))
                    }
                    _ => (None, None),
                };
                let coverage = match cov {
                    Some(c) if !c[k][j].is_empty() => Some(
                        c[k][j].iter().filter(|&&b| b).count() as f64 / c[k][j].len() as f64,
                    ),
                    _ => None,
                };
                ParamStats {
                    name: names[j].clone(),
                    truth: tr,
                    median_bias,
                    rmse,
                    median_bias_debiased: mbd,
                    rmse_debiased: rmsed,
                    coverage95: coverage,
                }
            })
            .collect();
        ClusterStats { cluster: k, reps_used: source[k][0].len(), params }
    };

    let cluster_stats: Vec<ClusterStats> = (0..k_true)
        .map(|k| stats_for(k, &draws, Some(&draws_deb), Some(&covers)))
        .collect();
    let pooled_stats = if options.pooled {
        // The pooled estimator is one vector per replication, judged against
        // every cluster's truth.
        let pooled_source: Vec<Vec<Vec<f64>>> = (0..k_true).map(|_| pooled_draws.clone()).collect();
        Some((0..k_true).map(|k| stats_for(k, &pooled_source, None, None)).collect())
    } else {
        None
    };

    Ok(McSummary {
        format_version: 1,
        group_count: config.group_count,
        group_size: config.group_size,
        replications: options.replications,
        replication_failures: failures,
        bootstrap_replications: options.bootstrap_replications,
        k_max: options.k_max,
        k_selection_freq: k_counts.iter().map(|&c| c as f64 / completed as f64).collect(),
        mean_classification_accuracy: if oracle {
            None
        } else {
            Some(accuracy_sum / completed as f64)
        },
        cluster_stats,
        pooled_stats,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

fn bias_rmse(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let median = crate::bootstrap::empirical_quantile(errors, 0.5).expect("nonempty errors");
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    (median, mse.sqrt())
}

fn replicate(
    config: &DgpConfig,
    options: &McOptions,
    oracle: bool,
    rep: u64,
    truth_centers: &[DVector<f64>],
) -> Result<RepOutcome> {
    let (panel, truth) = generate_panel(config, rep)?;
    let k_true = config.clusters.len();
    let true_membership: Vec<usize> = panel
        .groups()
        .iter()
        .map(|g| truth.cluster_of_group[g.group_id()])
        .collect();
    let boot_seed = rng::derive_key(config.seed, &[tag::MONTE_CARLO, rep]);

    let pooled_theta = if options.pooled {
        let fit = npl_fit_all(&panel, &NplInit::default(), &options.npl)?;
        Some(fit.slope.as_vector())
    } else {
        None
    };

    if oracle {
        // True memberships; per-cluster pooled fits plus optional bootstrap.
        let scope: Vec<usize> = (0..panel.n_groups()).collect();
        let fits = post_classification_fit(&panel, &scope, &true_membership, k_true, &options.npl);
        let mut cluster_draws = Vec::with_capacity(k_true);
        for (k, fit) in fits.into_iter().enumerate() {
            let fit = fit?;
            let (debiased, cov) = debias_and_cover(
                &panel,
                &fit,
                options,
                boot_seed.wrapping_add(k as u64),
                truth_centers,
                Some(k),
            )?;
            cluster_draws.push(ClusterDraw {
                theta: fit.slope.as_vector(),
                debiased,
                covers: cov,
            });
        }
        return Ok(RepOutcome {
            selected_k: k_true,
            accuracy: 1.0,
            cluster_draws: Some(cluster_draws),
            pooled_theta,
        });
    }

    let per_group = npl_fit_per_group(&panel, &options.npl);
    let first_step = FirstStep::from_fits(&panel, &per_group, options.npl.mu_bound)?;
    let mut classo = options.classo.clone();
    classo.seed = rng::derive_key(config.seed, &[tag::MONTE_CARLO, rep, 1]);
    let table = select_k(&panel, &first_step, options.k_max, options.lambda, &classo, &options.npl)?;

    // Accuracy is scored on the K = K_true classification, which exists in
    // the table whenever K_true <= k_max.
    let accuracy = table
        .records
        .iter()
        .find(|r| r.k == k_true)
        .map(|r| {
            let est_truth: Vec<usize> =
                r.solution.scope.iter().map(|&g| true_membership[g]).collect();
            classification_accuracy(&r.solution.membership, &est_truth, k_true)
        })
        .unwrap_or(f64::NAN);

    // Estimator accuracy uses replications that select the true count,
    // matching estimated clusters to the truth by center proximity.
    let cluster_draws = if table.selected_k == k_true {
        let record = table.selected();
        let mut est_centers = Vec::with_capacity(k_true);
        let mut fits = Vec::with_capacity(k_true);
        let mut ok = true;
        for f in &record.cluster_fits {
            match f {
                Ok(fit) => {
                    est_centers.push(fit.slope.as_vector());
                    fits.push(fit);
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let matched = match_clusters_by_centers(&est_centers, truth_centers);
            let mut per_true: Vec<Option<ClusterDraw>> = (0..k_true).map(|_| None).collect();
            for (e, fit) in fits.into_iter().enumerate() {
                let t = matched[e];
                let (debiased, cov) = debias_and_cover(
                    &panel,
                    fit,
                    options,
                    boot_seed.wrapping_add(e as u64),
                    truth_centers,
                    Some(t),
                )?;
                per_true[t] =
                    Some(ClusterDraw { theta: fit.slope.as_vector(), debiased, covers: cov });
            }
            per_true.into_iter().collect::<Option<Vec<_>>>()
        } else {
            None
        }
    } else {
        None
    };

    Ok(RepOutcome { selected_k: table.selected_k, accuracy, cluster_draws, pooled_theta })
}

/// Debiased vector and truth-coverage flags for one cluster fit, when
/// bootstrapping is enabled.
fn debias_and_cover(
    panel: &Panel,
    fit: &crate::npl::NplFit,
    options: &McOptions,
    seed: u64,
    truth_centers: &[DVector<f64>],
    matched_truth: Option<usize>,
) -> Result<DebiasOutcome> {
    if options.bootstrap_replications == 0 {
        return Ok((None, None));
    }
    if !fit.converged {
        return Ok((None, None));
    }
    let cfg = BootstrapConfig {
        replications: options.bootstrap_replications,
        alpha: options.alpha,
        seed,
        max_failure_fraction: 0.10,
    };
    let reports = bootstrap_coordinates(panel, fit, &cfg, &options.npl)?;
    let dim = fit.slope.dim();
    let mut debiased = DVector::zeros(dim);
    for (j, r) in reports.iter().enumerate() {
        debiased[j] = r.debiased;
    }
    let covers = matched_truth.map(|t| {
        (0..dim)
            .map(|j| {
                let tr = truth_centers[t][j];
                reports[j].ci[0] <= tr && tr <= reports[j].ci[1]
            })
            .collect()
    });
    Ok((Some(debiased), covers))
}

/// CSV with one row per candidate count frequency plus the accuracy column,
/// mirroring the selection table layout.
pub fn selection_table_csv(summary: &McSummary) -> String {
    let mut header = String::from("g,n,reps");
    for k in 1..=summary.k_max {
        header.push_str(&format!(",freq_k{k}"));
    }
    header.push_str(",pct_correct_classification\n");
    let mut row = format!(
        "{},{},{}",
        summary.group_count, summary.group_size, summary.replications
    );
    for f in &summary.k_selection_freq {
        row.push_str(&format!(",{}", 100.0 * f));
    }
    match summary.mean_classification_accuracy {
        Some(a) => row.push_str(&format!(",{}\n", 100.0 * a)),
        None => row.push_str(",\n"),
    }
    header + &row
}

/// CSV with one row per (cluster, coefficient): bias, RMSE and coverage for
/// the original and debiased estimators, mirroring the accuracy tables.
pub fn accuracy_table_csv(summary: &McSummary) -> String {
    let mut out = String::from(
        "cluster,param,truth,reps_used,pooled_bias,pooled_rmse,bias,rmse,bias_debiased,rmse_debiased,coverage95\n",
    );
    for cs in &summary.cluster_stats {
        for (j, ps) in cs.params.iter().enumerate() {
            let (pb, pr) = match &summary.pooled_stats {
                Some(pst) => {
                    let pp = &pst[cs.cluster].params[j];
                    (fmt_opt(Some(pp.median_bias)), fmt_opt(Some(pp.rmse)))
                }
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                cs.cluster + 1,
                ps.name,
                ps.truth,
                cs.reps_used,
                pb,
                pr,
                ps.median_bias,
                ps.rmse,
                fmt_opt(ps.median_bias_debiased),
                fmt_opt(ps.rmse_debiased),
                fmt_opt(ps.coverage95),
            ));
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
