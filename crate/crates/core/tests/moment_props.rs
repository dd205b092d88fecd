use mlmeta_core::model::{Cluster, Dataset, StudySummary, WeightSpec};
use mlmeta_core::moment::{fit_level2_diagonal, fit_ssw, fit_with_weights, hat_matrix, MomentOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const POINT_ONLY: MomentOptions = MomentOptions {
    alpha: 0.05,
    intervals: false,
    tests: false,
};

fn dataset(values: &[Vec<(f64, u32, u32)>]) -> Dataset {
    let clusters = values
        .iter()
        .enumerate()
        .map(|(g, rows)| {
            let studies = rows
                .iter()
                .map(|&(t, n_c, n_t)| StudySummary::new(t, n_c, n_t, None).unwrap())
                .collect();
            Cluster::new(format!("c{g}"), studies)
        })
        .collect();
    Dataset::new(clusters).unwrap()
}

fn study() -> impl Strategy<Value = (f64, u32, u32)> {
    (-1.5f64..1.5, 2u32..80, 2u32..80)
}

fn datasets() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(prop::collection::vec(study(), 1..5), 2..7).prop_map(|v| dataset(&v))
}

#[test]
fn six_study_q_a_identity() {
    let data = dataset(&[
        vec![(0.2, 10, 12), (0.5, 20, 15)],
        vec![(-0.1, 8, 9), (0.4, 30, 30), (0.9, 12, 5)],
        vec![(0.3, 40, 44)],
    ]);
    let fit = fit_ssw(&data, POINT_ONLY).unwrap();
    let nt = data.n_tilde();
    let t: Vec<f64> = data.studies().map(|s| s.t).collect();
    let mut direct = 0.0;
    for r in data.cluster_ranges() {
        let w: f64 = nt[r.clone()].iter().sum();
        let mean = r.clone().map(|i| nt[i] * t[i]).sum::<f64>() / w;
        direct += r.map(|i| nt[i] * (t[i] - mean).powi(2)).sum::<f64>();
    }
    assert!((fit.level2.q_a - direct).abs() <= 1e-10 * direct);
}

#[test]
fn delta_is_weighted_mean_of_cluster_effects() {
    let data = dataset(&[
        vec![(0.2, 10, 12), (0.5, 20, 15)],
        vec![(-0.1, 8, 9), (0.4, 30, 30)],
        vec![(0.3, 40, 44), (0.1, 6, 7), (0.6, 9, 9)],
    ]);
    let fit = fit_ssw(&data, POINT_ONLY).unwrap();
    let w = data.cluster_n_tilde();
    let a0 = fit.level2.a0_hat();
    let direct = w.iter().zip(a0).map(|(w, a)| w * a).sum::<f64>() / w.iter().sum::<f64>();
    assert!((fit.delta - direct).abs() < 1e-12);
}

#[test]
fn two_cluster_hat_is_idempotent() {
    let data = dataset(&[vec![(0.2, 10, 12), (0.5, 20, 15)], vec![(-0.1, 8, 9), (0.4, 30, 30)]]);
    let stacked = data.stack();
    let a = WeightSpec::ssw(&data).level2;
    let h = hat_matrix(&stacked.x, &a).unwrap();
    assert!((&h * &h - &h).norm() < 1e-12);
    // no coupling across clusters
    for i in 0..2 {
        for j in 2..4 {
            assert!(h[(i, j)].abs() < 1e-14 && h[(j, i)].abs() < 1e-14);
        }
    }
}

#[test]
fn untruncated_estimate_recovers_tau2() {
    let (tau2, reps) = (0.1, 10_000);
    let sizes = [5usize; 10];
    let v2 = vec![0.04; 50];
    let weights = vec![25.0; 50];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..reps {
        let t: Vec<f64> = (0..50)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (tau2 + 0.04f64).sqrt() * z
            })
            .collect();
        let fit = fit_level2_diagonal(&t, &weights, &v2, &sizes).unwrap();
        sum += fit.tau2_untruncated;
        sum_sq += fit.tau2_untruncated.powi(2);
    }
    let mean = sum / reps as f64;
    let se = ((sum_sq / reps as f64 - mean * mean) / reps as f64).sqrt();
    assert!((mean - tau2).abs() < 3.0 * se, "mean {mean} se {se}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weight_scale_invariance(data in datasets(), c in 0.01f64..100.0) {
        let base = WeightSpec::ssw(&data);
        let scaled = WeightSpec { level2: &base.level2 * c, level3: &base.level3 * c };
        let a = fit_with_weights(&data, &base, POINT_ONLY).unwrap();
        let b = fit_with_weights(&data, &scaled, POINT_ONLY).unwrap();
        prop_assert!((&a.level2.beta_hat - &b.level2.beta_hat).norm() < 1e-9);
        prop_assert!((a.level2.tau2_hat - b.level2.tau2_hat).abs() < 1e-9);
        prop_assert!((b.level2.q_a - c * a.level2.q_a).abs() <= 1e-9 * (1.0 + c * a.level2.q_a));
        prop_assert!((a.level3.omega2_hat - b.level3.omega2_hat).abs() < 1e-9);
        prop_assert!((a.delta - b.delta).abs() < 1e-9);
    }

    #[test]
    fn estimates_never_negative(data in datasets()) {
        let fit = fit_ssw(&data, POINT_ONLY).unwrap();
        prop_assert!(fit.level2.tau2_hat >= 0.0 && fit.level3.omega2_hat >= 0.0);
        prop_assert_eq!(fit.level2.tau2_hat, fit.level2.tau2_untruncated.max(0.0));
        prop_assert_eq!(fit.level3.omega2_hat, fit.level3.omega2_untruncated.max(0.0));
    }

    #[test]
    fn cluster_effect_depends_only_on_own_cluster(data in datasets(), shift in -2.0f64..2.0) {
        let sizes: Vec<usize> = data.clusters().iter().map(|c| c.len()).collect();
        let mut t: Vec<f64> = data.studies().map(|s| s.t).collect();
        let w = data.n_tilde();
        let v2 = data.v2();
        let before = fit_level2_diagonal(&t, &w, &v2, &sizes).unwrap();
        for x in &mut t[sizes[0]..] {
            *x += shift;
        }
        let after = fit_level2_diagonal(&t, &w, &v2, &sizes).unwrap();
        prop_assert!((before.a0_hat()[0] - after.a0_hat()[0]).abs() < 1e-12);
    }

    #[test]
    fn stacked_rows_match(data in datasets()) {
        let s = data.stack();
        prop_assert_eq!(s.t.len(), data.num_studies());
        prop_assert_eq!(s.x.nrows(), data.num_studies());
        prop_assert_eq!(data.clusters().iter().map(|c| c.len()).sum::<usize>(), data.num_studies());
    }
}

#[test]
fn matrix_weights_match_diagonal_path() {
    let data = dataset(&[
        vec![(0.2, 10, 12), (0.5, 20, 15)],
        vec![(-0.1, 8, 9), (0.4, 30, 30)],
        vec![(0.3, 40, 44), (0.1, 6, 7)],
    ]);
    let ssw = WeightSpec::ssw(&data);
    // tiny off-diagonal entry forces the dense path
    let mut dense = ssw.clone();
    dense.level2[(0, 1)] = 1e-300;
    dense.level2[(1, 0)] = 1e-300;
    let a = fit_with_weights(&data, &ssw, POINT_ONLY).unwrap();
    let b = fit_with_weights(&data, &dense, POINT_ONLY).unwrap();
    assert!((a.level2.q_a - b.level2.q_a).abs() < 1e-10);
    assert!((a.delta - b.delta).abs() < 1e-12);
}
