//! Throughput of the data-parallel hot paths.
//!
//! With the default `parallel` feature each workload runs inside rayon
//! pools of 1 and 4 workers, so one report compares the sequential and
//! parallel schedules; build with `--no-default-features` to measure the
//! plain sequential fallback.

use criterion::{Criterion, criterion_group, criterion_main};
use peerclust::bootstrap::{BootstrapConfig, bootstrap_coordinates};
use peerclust::equilibrium::{EquilibriumConfig, solve_equilibrium};
use peerclust::logit::{GroupParams, SlopeParams};
use peerclust::npl::{NplConfig, NplInit, npl_fit_all, npl_fit_per_group};
use peerclust::simulation::{DgpConfig, generate_panel};

fn bench_cases(c: &mut Criterion, name: &str, mut run: impl FnMut() + Send) {
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    #[cfg(feature = "parallel")]
    for threads in [1usize, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        group.bench_function(format!("threads_{threads}"), |b| {
            b.iter(|| pool.install(&mut run))
        });
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| b.iter(&mut run));
    group.finish();
}

fn equilibrium_batch(c: &mut Criterion) {
    let dgp = DgpConfig { group_count: 32, group_size: 100, seed: 1, ..Default::default() };
    let (panel, _) = generate_panel(&dgp, 0).unwrap();
    let params = GroupParams::new(0.2, SlopeParams::new(1.2, nalgebra::dvector![-0.5]));
    let cfg = EquilibriumConfig::default();
    bench_cases(c, "equilibrium_batch", move || {
        for g in panel.groups() {
            let sol = solve_equilibrium(g, &params, None, &cfg).unwrap();
            std::hint::black_box(sol.residual);
        }
    });
}

fn per_group_estimation(c: &mut Criterion) {
    let dgp = DgpConfig { group_count: 24, group_size: 60, seed: 2, ..Default::default() };
    let (panel, _) = generate_panel(&dgp, 0).unwrap();
    let cfg = NplConfig::default();
    bench_cases(c, "per_group_estimation", move || {
        let fits = npl_fit_per_group(&panel, &cfg);
        std::hint::black_box(fits.len());
    });
}

fn bootstrap_replicates(c: &mut Criterion) {
    let dgp = DgpConfig { group_count: 10, group_size: 50, seed: 3, ..Default::default() };
    let (panel, _) = generate_panel(&dgp, 0).unwrap();
    let npl_cfg = NplConfig::default();
    let fit = npl_fit_all(&panel, &NplInit::default(), &npl_cfg).unwrap();
    let boot = BootstrapConfig { replications: 16, seed: 4, ..Default::default() };
    bench_cases(c, "bootstrap_replicates", move || {
        let reports = bootstrap_coordinates(&panel, &fit, &boot, &npl_cfg).unwrap();
        std::hint::black_box(reports.len());
    });
}

criterion_group!(benches, equilibrium_batch, per_group_estimation, bootstrap_replicates);
criterion_main!(benches);
