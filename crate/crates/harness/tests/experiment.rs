use kmeta_harness::{run_experiment, Column, ExperimentConfig, RateReport, XAxis, HEADER};

fn config(seeds: &str, sweep: &str) -> ExperimentConfig {
    let text = format!(
        r#"
schema_version = 1
seeds = {seeds}
mc_samples = 500

[world]
dim = 2
s_true = 2
sigma_y = 0.2
input = {{ kind = "uniform_box", low = -1.0, high = 1.0 }}
kernel = {{ family = "gaussian", params = {{ bandwidth = 0.6 }}, p = 0.2 }}

[sweep]
{sweep}
"#
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

const ONE_CELL: &str = "n_tasks = [6]\nn = [10]\nn_target = [8]\nlambda = [0.01]\ns = [2]";

#[test]
fn single_cell_single_seed() {
    let report = run_experiment(&config("[7]", ONE_CELL)).unwrap();
    assert_eq!(report.records.len(), 1);
    let r = &report.records[0];
    assert!(r.is_ok(), "{}", r.status);
    assert_eq!((r.seed, r.n_tasks, r.n, r.n_target, r.s), (7, 6, 10, 8, 2));
    for v in [r.sin_theta_hs, r.chat_cn_hs, r.excess_risk, r.baseline_krr_risk, r.oracle_proj_risk, r.lambda_star] {
        assert!(v.unwrap().is_finite());
    }
    assert_eq!(r.davis_kahan_holds, Some(true));
    assert!(!r.gamma_hat_profile.is_empty());
    assert_eq!(r.config_hash.len(), 16);
}

#[test]
fn repeated_runs_give_identical_bytes() {
    let c = config("[1, 2, 3]", "n_tasks = [4, 8]\nn = [10]\nn_target = [8, 16]\nlambda = [0.01, \"auto:krr\"]\ns = [2]");
    let a = run_experiment(&c).unwrap().to_csv_string();
    let b = run_experiment(&c).unwrap().to_csv_string();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1 + 3 * 2 * 2 * 2);
    assert_eq!(a.lines().next().unwrap(), HEADER.join(","));
}

#[test]
fn records_are_ordered_by_cell_then_seed() {
    let c = config("[5, 1]", "n_tasks = [8, 4]\nn = [10]\nn_target = [8]\nlambda = [0.01]\ns = [2]");
    let report = run_experiment(&c).unwrap();
    let order: Vec<(usize, u64)> = report.records.iter().map(|r| (r.n_tasks, r.seed)).collect();
    assert_eq!(order, vec![(8, 5), (8, 1), (4, 5), (4, 1)]);
}

#[test]
fn failed_cells_are_recorded() {
    // s = 9 exceeds the rank available from 6 tasks.
    let c = config("[1]", "n_tasks = [6]\nn = [10]\nn_target = [8]\nlambda = [0.01]\ns = [2, 9]");
    let report = run_experiment(&c).unwrap();
    assert_eq!(report.records.len(), 2);
    assert!(report.records[0].is_ok());
    assert!(report.records[1].status.starts_with("failed:"), "{}", report.records[1].status);
    let summary = report.summary();
    assert_eq!(summary.failed.len(), 1);
    assert_eq!(summary.completed, 1);
}

#[test]
fn csv_survives_a_round_trip() {
    let report = run_experiment(&config("[1, 2]", ONE_CELL)).unwrap();
    let text = report.to_csv_string();
    let back = RateReport::read_csv(text.as_bytes()).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.summary(), report.summary());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    report.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes, text.as_bytes());
    assert!(!bytes.contains(&b'\r'));
    assert_eq!(RateReport::read_csv(std::fs::File::open(&path).unwrap()).unwrap(), report);
}

#[test]
fn summary_fits_slopes_along_swept_axes() {
    let c = config("[1, 2, 3, 4, 5]", "n_tasks = [4]\nn = [10]\nn_target = [10, 40, 160]\nlambda = [0.01]\ns = [2]");
    let report = run_experiment(&c).unwrap();
    let fit = report.fit_slope(XAxis::Target, Column::ExcessRisk).unwrap();
    assert!(fit.slope < 0.0, "{fit:?}");
    let summary = report.summary();
    assert_eq!(summary.slopes.len(), 1);
    assert!(summary.to_toml().contains("x_axis = \"target\""));
    assert!(report.fit_slope(XAxis::Tasks, Column::SinTheta).is_err());
}

#[test]
fn default_config_is_valid() {
    let c = ExperimentConfig::default_config();
    assert_eq!(c.sweep.n_tasks, vec![60]);
    assert_eq!(c.sweep.n, vec![400]);
    assert_eq!(c.sweep.n_target, vec![50]);
}
