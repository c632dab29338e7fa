use ordinalenc::benchmark::{self, run_suite, BenchmarkSpec, Suite, RUNS_HEADER, SUMMARY_HEADER};
use ordinalenc::trainer::Architecture;

fn tiny() -> BenchmarkSpec {
    let mut spec = BenchmarkSpec::standard();
    spec.population.n_subjects = 30;
    spec.population.images_min = 2;
    spec.population.images_max = 3;
    spec.population.height = 5;
    spec.population.width = 5;
    spec.architecture = Architecture { hidden: 4, depth: 1 };
    spec.epochs = 3;
    spec.aux_start_epoch = 1;
    spec.mask_side = 2;
    spec.extra_mask_sides = vec![1];
    spec.sigma_grid = vec![0.4, 2.0];
    spec
}

#[test]
fn csv_is_identical_across_repeats_and_thread_counts() {
    let spec = tiny();
    let a = run_suite(Suite::EncodingsSe, &spec, 2, 7, 1).unwrap();
    let b = run_suite(Suite::EncodingsSe, &spec, 2, 7, 1).unwrap();
    let c = run_suite(Suite::EncodingsSe, &spec, 2, 7, 3).unwrap();
    assert_eq!(a.runs_csv(), b.runs_csv());
    assert_eq!(a.runs_csv(), c.runs_csv());
    assert_eq!(a.summary_csv(), c.summary_csv());
    let d = run_suite(Suite::EncodingsSe, &spec, 2, 8, 1).unwrap();
    assert_ne!(a.runs_csv(), d.runs_csv());
}

#[test]
fn every_suite_runs_and_reports_one_row_per_planned_run() {
    let spec = tiny();
    for suite in Suite::ALL {
        let out = run_suite(suite, &spec, 1, 0, 1).unwrap();
        let csv = out.runs_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(RUNS_HEADER));
        assert_eq!(lines.count(), benchmark::plan(suite, &spec, 1).len());
        assert_eq!(out.summary_csv().lines().next(), Some(SUMMARY_HEADER));
        assert_eq!(out.failed_runs, 0, "{suite}");
        assert!(out.predicate.verdicts.as_ref().map_or(true, |v| v.len() == 1));
    }
}

#[test]
fn outputs_are_written_to_the_directory() {
    let dir = std::env::temp_dir().join(format!("ordinalenc-bench-{}", std::process::id()));
    let out = run_suite(Suite::Maskout, &tiny(), 1, 0, 1).unwrap();
    out.write(&dir).unwrap();
    for f in ["runs.csv", "summary.csv", "summary.txt"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(dir.join("runs.csv")).unwrap(), out.runs_csv());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn an_invalid_spec_is_rejected_before_training() {
    let mut spec = tiny();
    spec.sigma_grid.clear();
    assert!(run_suite(Suite::SigmaSweep, &spec, 1, 0, 1).is_err());
}
