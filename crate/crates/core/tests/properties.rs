use hetcggm::likelihood::{e_step, update_pi};
use hetcggm::model::{check_spd, validate_dataset, GroupParams};
use hetcggm::simgen::{gen_truth, Setting, SimSpec};
use hetcggm::theta::{symmetrize_min_magnitude, theta_eigen_update};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_spd(rng: &mut ChaCha8Rng, p: usize, scale: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-scale..scale));
    &b * b.transpose() + DMatrix::identity(p, p) * 0.1
}

fn random_symmetric(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-3.0..3.0));
    (&b + b.transpose()) * 0.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn e_step_rows_sum_to_one(seed in any::<u64>(), p in 1usize..4, q in 0usize..3, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let ds = validate_dataset(
            DMatrix::from_fn(n, p, |_, _| rng.gen_range(-20.0..20.0)),
            DMatrix::from_fn(n, q, |_, _| rng.gen_range(-5.0..5.0)),
        ).unwrap();
        let groups: Vec<GroupParams> = (0..k)
            .map(|_| {
                let gamma = DMatrix::from_fn(p, q + 1, |_, _| rng.gen_range(-3.0..3.0));
                GroupParams::new(gamma, random_spd(&mut rng, p, 3.0)).unwrap()
            })
            .collect();
        let mut pi: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= total);
        let resp = e_step(&ds, &groups, &pi).unwrap();
        for i in 0..n {
            prop_assert!((resp.row(i).sum() - 1.0).abs() <= 1e-10);
            prop_assert!(resp.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let new_pi = update_pi(&resp);
        prop_assert!((new_pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn min_magnitude_never_grows_entries(seed in any::<u64>(), p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = DMatrix::from_fn(p, p, |_, _| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(-2.0..2.0) });
        let s = symmetrize_min_magnitude(&t);
        prop_assert_eq!(&s, &s.transpose());
        for (a, b) in s.iter().zip(t.iter()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn eigen_update_is_spd(seed in any::<u64>(), p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_spd(&mut rng, p, 1.0);
        let xi = random_symmetric(&mut rng, p);
        let psi = random_symmetric(&mut rng, p);
        let w = rng.gen_range(0.01..1.0);
        let kappa = rng.gen_range(0.1..5.0);
        let theta = theta_eigen_update(&s, &xi, &psi, w, kappa).unwrap();
        prop_assert!(check_spd(&theta));
    }

    #[test]
    fn generated_truths_are_spd(seed in any::<u64>(), setting in 0usize..3, k0 in 1usize..4) {
        let setting = [Setting::S1, Setting::S2, Setting::S3][setting];
        let spec = SimSpec { setting, p: 10, q: 4, group_sizes: vec![5; k0], seed };
        let truth = gen_truth(&spec).unwrap();
        prop_assert_eq!(truth.params.len(), k0);
        for g in &truth.params {
            prop_assert!(check_spd(&g.theta));
            prop_assert!(g.gamma.iter().all(|v| v.is_finite()));
        }
    }
}
