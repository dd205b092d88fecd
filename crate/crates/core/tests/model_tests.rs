use mlmeta_core::linalg::eigen_sym;
use mlmeta_core::model::{read_csv, Cluster, Dataset, ModelError, StudySummary};
use nalgebra::DMatrix;

fn clusters(m: usize, k: usize) -> Vec<Cluster> {
    (0..m)
        .map(|g| {
            let studies = (0..k)
                .map(|i| StudySummary::new(0.1 * (g + i) as f64, 10, 10, None).unwrap())
                .collect();
            Cluster::new(format!("{g}"), studies)
        })
        .collect()
}

#[test]
fn duplicated_intercept_is_rank_deficient() {
    let with_y: Vec<Cluster> = clusters(5, 2)
        .into_iter()
        .map(|c| c.with_covariates(DMatrix::from_element(2, 1, 1.0)))
        .collect();

    // oracle: count eigenvalues of XᵀX above the relative threshold
    let mut x = DMatrix::zeros(10, 6);
    for g in 0..5 {
        for i in 0..2 {
            x[(2 * g + i, g)] = 1.0;
            x[(2 * g + i, 5)] = 1.0;
        }
    }
    let eig = eigen_sym(&(x.transpose() * &x)).unwrap();
    let rank = eig.values.iter().filter(|&&l| l > 1e-10 * eig.values[0]).count();
    assert_eq!(rank, 5);

    match Dataset::new(with_y) {
        Err(ModelError::RankDeficientDesign { rank, cols, .. }) => assert_eq!((rank, cols), (5, 6)),
        other => panic!("expected rank deficiency, got {other:?}"),
    }
}

#[test]
fn symmetric_arms() {
    let data = Dataset::new(clusters(2, 2)).unwrap();
    assert_eq!(data.n_tilde(), vec![5.0; 4]);
    assert_eq!(data.cluster_n_tilde(), vec![10.0, 10.0]);
}

#[test]
fn one_cluster_refused() {
    assert!(matches!(Dataset::new(clusters(1, 3)), Err(ModelError::TooFewClusters { found: 1 })));
}

#[test]
fn csv_round_trip_keeps_order_and_computes_variance() {
    let text = "cluster,study,n_c,n_t,g\nb,1,10,10,0.0\na,1,10,10,0.3\nb,2,12,9,0.5\n";
    let data = read_csv(text.as_bytes()).unwrap();
    let ids: Vec<&str> = data.clusters().iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids, ["b", "a"]);
    assert_eq!(data.clusters()[0].len(), 2);
    assert!((data.clusters()[0].studies[0].v2 - 0.2).abs() < 1e-12);
}

#[test]
fn csv_explicit_variance_is_kept() {
    let text = "cluster,study,n_c,n_t,g,v2\n1,1,10,10,0.1,0.33\n2,1,10,10,0.2,0.25\n";
    let data = read_csv(text.as_bytes()).unwrap();
    assert_eq!(data.v2(), vec![0.33, 0.25]);
}

#[test]
fn csv_bad_row_reports_line() {
    let text = "cluster,study,n_c,n_t,g\n1,1,10,10,0.1\n1,2,0,10,0.2\n2,1,10,10,0.3\n";
    let err = read_csv(text.as_bytes()).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
}
