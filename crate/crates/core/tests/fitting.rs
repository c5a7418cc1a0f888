use hetcggm::em::{fit, initialize};
use hetcggm::metrics::{evaluate_fit, rand_index};
use hetcggm::model::{check_spd, validate_dataset, Dataset, Hyperparams};
use hetcggm::simgen::{simulate, Setting, SimSpec};
use hetcggm::tuning::{default_axes, grid_search, hqc, product_grid, GridPoint};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter().map(|r| r.transpose().argmax().0).collect()
}

fn s1(p: usize, q: usize, sizes: Vec<usize>, seed: u64) -> (hetcggm::simgen::GroundTruth, Dataset) {
    simulate(&SimSpec { setting: Setting::S1, p, q, group_sizes: sizes, seed }).unwrap()
}

#[test]
fn initializer_separates_distant_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let y = DMatrix::from_fn(n, 2, |i, _| {
        let centre = if labels[i] == 0 { -5.0 } else { 5.0 };
        centre + 0.5 * rng.sample::<f64, _>(StandardNormal)
    });
    let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let ds = validate_dataset(y, x).unwrap();
    let st = initialize(&ds, 2, 0).unwrap();
    assert_eq!(st.k(), 2);
    assert_eq!(rand_index(&argmax_rows(&st.resp), &labels).unwrap(), 1.0);
}

#[test]
fn fit_is_deterministic_and_well_formed() {
    let (_, ds) = s1(5, 4, vec![60, 60], 2);
    let hp = Hyperparams { k: 4, ..Hyperparams::default().with_lambdas(0.05, 0.1, 0.3) };
    let a = fit(&ds, &hp, 7).unwrap();
    let b = fit(&ds, &hp, 7).unwrap();
    assert_eq!(a, b);
    assert!((1..=4).contains(&a.k_hat));
    assert!((a.merged_pi.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    let first = a.objective_trace[0];
    let last = *a.objective_trace.last().unwrap();
    assert!(last >= first);
    assert!(a.diagnostics.max_objective_drop <= 1e-4);
    for (g, edges) in a.merged_groups.iter().zip(&a.edge_sets) {
        assert!(check_spd(&g.theta));
        for &(j, m) in edges {
            assert!(edges.contains(&(m, j)));
            assert_ne!(g.theta[(j, m)], 0.0);
        }
        let nonzero = (0..5).flat_map(|j| (0..5).map(move |m| (j, m))).filter(|&(j, m)| j != m && g.theta[(j, m)] != 0.0).count();
        assert_eq!(nonzero, edges.len());
    }
    assert!(a.assignment.iter().all(|&l| l < a.k_hat));
}

#[test]
fn homogeneous_data_collapses() {
    let (_, ds) = s1(10, 10, vec![300], 0);
    let axes = default_axes(ds.n(), ds.p(), ds.q());
    let mid = |v: &Vec<f64>| v[v.len() / 2];
    let hp = Hyperparams { k: 3, ..Hyperparams::default().with_lambdas(mid(&axes[0]), mid(&axes[1]), mid(&axes[2])) };
    assert_eq!(fit(&ds, &hp, 0).unwrap().k_hat, 1);
}

#[test]
fn tuned_fit_recovers_the_grouping() {
    let (truth, ds) = s1(10, 10, vec![100, 100, 100], 0);
    let axes = default_axes(ds.n(), ds.p(), ds.q());
    // a coarse slice of the default grid
    let pick = |v: &Vec<f64>, idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let grid = product_grid(&pick(&axes[0], &[3, 5, 7]), &pick(&axes[1], &[3, 5, 7]), &pick(&axes[2], &[0, 2, 4]));
    let hp = Hyperparams { k: 6, ..Hyperparams::default() };
    let out = grid_search(&ds, &grid, &hp, 0).unwrap();
    let m = evaluate_fit(&out.best, &truth.params, &truth.labels).unwrap();
    // a true group split by the start can sit beyond the reach of the fusion penalty
    assert!((3..=4).contains(&m.k_hat), "K_hat {}", m.k_hat);
    assert!(m.rand_index >= 0.9, "RI {}", m.rand_index);
    // the chosen point is the table minimum
    let min = out.table.iter().map(|r| r.hqc).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.hqc, min);
    assert_eq!(hqc(&ds, &out.best).unwrap(), out.best.hqc);
}

#[test]
fn grid_search_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 120;
    let ds = validate_dataset(
        DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal)),
        DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal)),
    )
    .unwrap();
    let hp = Hyperparams { k: 2, ..Hyperparams::default() };

    // singleton grid returns that fit
    let pt = GridPoint { lambda1: 0.1, lambda2: 0.1, lambda3: 0.5 };
    let out = grid_search(&ds, &[pt], &hp, 3).unwrap();
    assert_eq!(out.chosen, pt);
    assert_eq!(out.best, fit(&ds, &hp.clone().with_lambdas(0.1, 0.1, 0.5), 3).unwrap());

    // pure noise: the sparse point wins
    let hp = Hyperparams { k: 1, ..hp };
    let dense = GridPoint { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
    let sparse = GridPoint { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0 };
    let out = grid_search(&ds, &[dense, sparse], &hp, 0).unwrap();
    assert_eq!(out.chosen, sparse);
    assert!(out.table[1].df < out.table[0].df);

    // duplicates: stable choice across runs
    let grid = [pt, pt, sparse, sparse];
    let a = grid_search(&ds, &grid, &hp, 0).unwrap();
    let b = grid_search(&ds, &grid, &hp, 0).unwrap();
    assert_eq!(a.chosen, b.chosen);
    assert_eq!(a.best, b.best);
}

#[test]
fn hqc_ignores_group_order() {
    let (_, ds) = s1(4, 3, vec![50, 50], 4);
    let hp = Hyperparams { k: 3, ..Hyperparams::default().with_lambdas(0.05, 0.1, 0.2) };
    let fr = fit(&ds, &hp, 1).unwrap();
    let mut rev = fr.clone();
    rev.merged_groups.reverse();
    rev.merged_pi.reverse();
    assert!((hqc(&ds, &fr).unwrap() - hqc(&ds, &rev).unwrap()).abs() < 1e-9);
}
