//! Property tests for the data model, the logistic core, and the quantile
//! machinery.

use nalgebra::DMatrix;
use peerclust::bootstrap::empirical_quantile;
use peerclust::data::{GroupData, Panel, load_panel, mean_peer_belief, save_panel};
use peerclust::logit::{logistic_cdf, nll_individual};
use proptest::prelude::*;

fn group_strategy(p: usize) -> impl Strategy<Value = GroupData> {
    (1usize..7).prop_flat_map(move |n| {
        let ys = proptest::collection::vec(0u8..=1, n);
        let xs = proptest::collection::vec(-1.0e6..1.0e6f64, n * p);
        let nbrs = proptest::collection::vec(proptest::collection::vec(0usize..n, 0..n), n);
        (ys, xs, nbrs).prop_map(move |(y, x, raw_nbrs)| {
            let neighbors: Vec<Vec<usize>> = raw_nbrs
                .into_iter()
                .enumerate()
                .map(|(i, mut list)| {
                    list.retain(|&j| j != i);
                    list.sort_unstable();
                    list.dedup();
                    list
                })
                .collect();
            GroupData::new(
                "g".into(),
                (0..n).map(|i| format!("i{i}")).collect(),
                y,
                DMatrix::from_fn(n, p, |r, c| x[r * p + c]),
                neighbors,
            )
            .expect("constructed group is valid")
        })
    })
}

fn panel_strategy() -> impl Strategy<Value = Panel> {
    (0usize..3).prop_flat_map(|p| {
        proptest::collection::vec(group_strategy(p), 1..4).prop_map(|mut groups| {
            for (i, g) in groups.iter_mut().enumerate() {
                *g = GroupData::new(
                    format!("g{i}"),
                    g.individual_ids().to_vec(),
                    g.y().to_vec(),
                    g.x().clone(),
                    (0..g.n()).map(|r| g.neighbors_of(r).to_vec()).collect(),
                )
                .unwrap();
            }
            Panel::new(groups).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_then_load_is_identity(panel in panel_strategy()) {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        save_panel(&panel, &mut nodes, &mut edges).unwrap();
        let reloaded = load_panel(nodes.as_slice(), edges.as_slice()).unwrap();
        prop_assert_eq!(panel, reloaded);
    }

    #[test]
    fn mean_peer_belief_stays_in_unit_interval(
        group in group_strategy(1),
        seed in 0u64..1000,
    ) {
        use rand::RngExt;
        let mut rng = peerclust::rng::stream(seed, &[1]);
        let ccp: Vec<f64> = (0..group.n()).map(|_| rng.random::<f64>()).collect();
        let pbar = mean_peer_belief(&group, &ccp).unwrap();
        for (i, v) in pbar.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(v));
            if group.degree(i) == 0 {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn mean_peer_belief_is_permutation_equivariant(
        group in group_strategy(1),
        seed in 0u64..1000,
    ) {
        use rand::RngExt;
        let mut rng = peerclust::rng::stream(seed, &[2]);
        let n = group.n();
        let ccp: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let base = mean_peer_belief(&group, &ccp).unwrap();

        // Reversal permutation with consistent relabeling.
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut inv = vec![0usize; n];
        for (new_i, &old_i) in perm.iter().enumerate() {
            inv[old_i] = new_i;
        }
        let permuted = GroupData::new(
            "p".into(),
            perm.iter().map(|&i| format!("i{i}")).collect(),
            perm.iter().map(|&i| group.y()[i]).collect(),
            DMatrix::from_fn(n, group.p(), |r, c| group.x()[(perm[r], c)]),
            perm.iter()
                .map(|&i| {
                    let mut v: Vec<usize> =
                        group.neighbors_of(i).iter().map(|&j| inv[j]).collect();
                    v.sort_unstable();
                    v
                })
                .collect(),
        )
        .unwrap();
        let ccp_p: Vec<f64> = perm.iter().map(|&i| ccp[i]).collect();
        let out = mean_peer_belief(&permuted, &ccp_p).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            prop_assert!((out[new_i] - base[old_i]).abs() < 1e-15);
        }
    }

    #[test]
    fn logistic_symmetry_and_nll_flip(x in -600.0..600.0f64) {
        prop_assert!((logistic_cdf(x) + logistic_cdf(-x) - 1.0).abs() < 1e-12);
        prop_assert!((nll_individual(0, x) - nll_individual(1, -x)).abs() < 1e-12);
        prop_assert!(nll_individual(1, x) >= 0.0);
    }

    #[test]
    fn quantile_matches_order_statistics(
        draws in proptest::collection::vec(-1.0e6..1.0e6f64, 1..60),
        q in 0.0..=1.0f64,
    ) {
        let fast = empirical_quantile(&draws, q).unwrap();
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = (sorted.len() as f64 - 1.0) * q;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let oracle = if lo + 1 < sorted.len() {
            sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
        } else {
            sorted[sorted.len() - 1]
        };
        prop_assert!((fast - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
        prop_assert!(fast >= sorted[0] && fast <= sorted[sorted.len() - 1]);
    }
}
