use mixmem::io::{load_dataset_csv, load_model_json, save_dataset_csv, save_model_json};
use mixmem::matching::Matcher;
use mixmem::moments::Dataset;
use mixmem::partition::{build_partition_plan, fit_partitioned, fit_partitioned_with, FitOptions, Population};
use mixmem::pqp::FactorizeOptions;
use mixmem::sim::{rmse_aligned, sample_model, simulate_dataset, SimConfig};
use mixmem::{Error, ModelParams};

fn tight() -> FitOptions {
    FitOptions {
        factorize: FactorizeOptions { max_iters: 5000, rel_tol: 1e-10, ..Default::default() },
        ..Default::default()
    }
}

fn toy_truth(seed: u64) -> ModelParams {
    sample_model(&SimConfig { p: 9, k: 3, d: 4, seed, ..Default::default() }).unwrap()
}

#[test]
fn population_moments_recover_the_model() {
    let truth = toy_truth(0);
    let plan = build_partition_plan(9, 3, &truth.categories(), None, 2, 0).unwrap();
    for matcher in [Matcher::Procrustes, Matcher::SmallestAngle] {
        let fit = fit_partitioned_with(&Population(&truth), 3, &plan, &FitOptions { matcher, ..tight() }).unwrap();
        assert_eq!(fit.params.p(), 9);
        assert!(rmse_aligned(&fit.params, &truth).unwrap() < 1e-3);
        assert!(fit.reports.iter().all(|r| r.valid));
    }
}

#[test]
fn partition_order_only_relabels() {
    let truth = toy_truth(1);
    let plan = build_partition_plan(9, 3, &truth.categories(), None, 2, 1).unwrap();
    let a = fit_partitioned_with(&Population(&truth), 3, &plan, &tight()).unwrap();
    let b = fit_partitioned_with(&Population(&truth), 3, &plan.reordered(&[1, 0]).unwrap(), &tight()).unwrap();
    let gap = rmse_aligned(&a.params, &b.params).unwrap();
    // only the anchors' source partition differs between the runs
    let floor = rmse_aligned(&a.params, &truth).unwrap() + rmse_aligned(&b.params, &truth).unwrap();
    assert!(gap <= floor, "{gap} > {floor}");
}

#[test]
fn fits_are_deterministic_and_cover_every_variable() {
    let cfg = SimConfig { p: 15, k: 3, n: 400, seed: 5, ..Default::default() };
    let truth = sample_model(&cfg).unwrap();
    let data = simulate_dataset(&truth, &cfg).unwrap();
    let plan = build_partition_plan(15, 3, data.categories(), None, 3, 5).unwrap();
    let serial = fit_partitioned(&data, 3, 0.3, &plan, &FitOptions { workers: Some(1), ..Default::default() }).unwrap();
    let parallel = fit_partitioned(&data, 3, 0.3, &plan, &FitOptions { workers: Some(3), ..Default::default() }).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.params.p(), 15);
    assert_eq!(serial.converged.len(), 3);
    for theta in serial.params.thetas() {
        for col in theta.column_iter() {
            assert!((col.sum() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn numeric_columns_are_rejected_by_the_fitter() {
    let data = Dataset::new(vec![4, 4, 4, 1], vec![0, 1, 2, 7, 3, 2, 1, 5]).unwrap();
    let plan = build_partition_plan(4, 1, &[4, 4, 4, 1], None, 1, 0).unwrap();
    assert!(matches!(
        fit_partitioned(&data, 1, 1.0, &plan, &FitOptions::default()),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn files_round_trip_through_the_pipeline() {
    let dir = std::env::temp_dir().join(format!("mixmem-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = SimConfig { p: 9, k: 3, n: 300, seed: 2, ..Default::default() };
    let truth = sample_model(&cfg).unwrap();
    let data = simulate_dataset(&truth, &cfg).unwrap();
    save_dataset_csv(&data, dir.join("data.csv")).unwrap();
    assert_eq!(load_dataset_csv(dir.join("data.csv")).unwrap(), data);

    let plan = build_partition_plan(9, 3, data.categories(), None, 2, 2).unwrap();
    let fit = fit_partitioned(&data, 3, 0.3, &plan, &FitOptions::default()).unwrap();
    save_model_json(&fit.params, Some(&fit.weights), dir.join("fit.json")).unwrap();
    let doc = load_model_json(dir.join("fit.json")).unwrap();
    assert_eq!(doc.params, fit.params);
    assert_eq!(doc.weights.unwrap(), fit.weights);
    std::fs::remove_dir_all(&dir).unwrap();
}
