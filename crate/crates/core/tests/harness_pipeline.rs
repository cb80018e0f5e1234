use hyda::data::BenchmarkSpec;
use hyda::harness::{read_results, run_from_config, summarize, write_results, ExperimentConfig, Mode};
use hyda::hyda::TrainConfig;

fn config(dir: &std::path::Path, mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        dataset: dir.join("data"),
        benchmark: BenchmarkSpec { domains: 4, samples_per_domain: 60, ..Default::default() },
        seeds: vec![5, 6],
        targets: vec![1, 2],
        pretrain_epochs: 2,
        train: TrainConfig { epochs: 2, batch_size: 32, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn leave_one_out_pipeline_is_reproducible_and_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), Mode::LeaveOneOut);
    let a = run_from_config(&cfg).unwrap();
    // Second run loads the dataset the first one wrote.
    let b = run_from_config(&cfg).unwrap();
    assert_eq!(a.records.len(), 2 * 2 * 2);
    assert!(a.records.iter().zip(&b.records).all(|(x, y)| x.same_outcome(y)));
    assert!(a.audits.iter().all(|au| au.passed), "{:?}", a.audits);
    assert_eq!(a.geometry.len(), 4);
    assert!(a.records.iter().all(|r| r.split == "test" && r.eval_domain == r.target_domain.unwrap()));

    let out_dir = dir.path().join("out");
    write_results(&a, &out_dir).unwrap();
    let back = read_results(&out_dir).unwrap();
    assert_eq!(back, a);
    let rows = summarize(&back.records, "mae");
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.n == 2));
}

#[test]
fn supervised_mode_reports_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![5], ..config(dir.path(), Mode::Supervised) };
    let out = run_from_config(&cfg).unwrap();
    assert_eq!(out.records.len(), 2 * 4);
    assert!(out.records.iter().all(|r| r.split == "val" && r.target_domain.is_none() && r.n == 6));
}

#[test]
fn invalid_config_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { targets: vec![7], ..config(dir.path(), Mode::LossAblation) };
    assert!(matches!(run_from_config(&cfg), Err(hyda::Error::Config { .. })));
}
