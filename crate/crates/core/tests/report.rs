mod common;

use std::collections::BTreeMap;
use std::path::Path;

use conceptfaith::report::{Run, RunConfig, StatRow};

use common::{write_store_fixture, write_store_fixture_with, StoreOptions};

fn tables(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            let ext = p.extension()?.to_str()?;
            matches!(ext, "csv" | "tex" | "md").then(|| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
        })
        .collect()
}

fn open(config: &Path, tweak: impl FnOnce(&mut RunConfig)) -> Run {
    let mut cfg = RunConfig::load(config).unwrap();
    tweak(&mut cfg);
    Run::open(cfg).unwrap()
}

#[test]
fn rerun_reuses_the_cache_and_reproduces_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_store_fixture(dir.path(), 3);
    let run = Run::load(&config).unwrap();
    assert!(run.run_report(true).unwrap().ok());
    let out = dir.path().join("results");
    let first = tables(&out);
    assert!(
        first.contains_key("rq4_stats.csv") && first.contains_key("appendix_importance_tcav.tex")
    );
    assert!(out.join("run_manifest.json").exists());
    let svgs = std::fs::read_dir(out.join("figures")).unwrap().count();
    assert!(svgs >= 5, "{svgs} figures");

    // Wipe the intermediate activations: a cached rerun must not need them.
    std::fs::remove_dir_all(out.join("activations")).ok();
    assert!(Run::load(&config).unwrap().run_report(false).unwrap().ok());
    assert!(
        !out.join("activations").exists(),
        "cached stages recomputed activations"
    );
    assert_eq!(first, tables(&out));

    // A fresh project with the same seed gives byte-identical tables.
    let other = tempfile::tempdir().unwrap();
    let config = write_store_fixture(other.path(), 3);
    assert!(Run::load(&config).unwrap().run_report(false).unwrap().ok());
    assert_eq!(first, tables(&other.path().join("results")));
}

#[test]
fn changing_the_config_invalidates_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_store_fixture(dir.path(), 3);
    let a = open(&config, |_| {}).run_rq1().unwrap();
    let b = open(&config, |c| c.bootstrap.seed ^= 1).run_rq1().unwrap();
    assert_ne!(a.alignment, b.alignment);
}

#[test]
fn identical_generated_and_real_sets_align_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_store_fixture_with(
        dir.path(),
        5,
        StoreOptions {
            mirror_generated: true,
            ..Default::default()
        },
    );
    let run = open(&config, |c| {
        c.bootstrap.replicates = 1;
        c.bootstrap.with_replacement = false;
    });
    let rq1 = run.run_rq1().unwrap();
    assert!(rq1.failures.is_empty(), "{:?}", rq1.failures);
    assert!(!rq1.alignment.is_empty());
    for row in &rq1.alignment {
        assert!((row.rho - 1.0).abs() < 1e-12, "{row:?}");
    }
    let rq3 = run.run_rq3().unwrap();
    assert!(rq3.failures.is_empty(), "{:?}", rq3.failures);
    for row in &rq3.deltas {
        assert!(row.delta < 1e-12, "{row:?}");
    }
    let ks: Vec<&StatRow> = rq3
        .stats
        .iter()
        .filter(|r| r.analysis.contains("ks"))
        .collect();
    assert!(!ks.is_empty());
    for row in ks {
        assert!(row.error.is_empty() && row.statistic == 0.0, "{row:?}");
    }
}

#[test]
fn identity_removal_reports_constant_series_instead_of_crashing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_store_fixture_with(
        dir.path(),
        6,
        StoreOptions {
            identity_removal: true,
            ..Default::default()
        },
    );
    let rq4 = Run::load(&config).unwrap().run_rq4().unwrap();
    assert!(rq4.failures.is_empty(), "{:?}", rq4.failures);
    assert!(rq4.removal.iter().all(|r| r.delta_rm == 0.0));
    assert!(rq4.probabilities.iter().all(|r| r.delta_p == 0.0));
    let spearman: Vec<&StatRow> = rq4
        .stats
        .iter()
        .filter(|r| r.analysis == "rq4-spearman")
        .collect();
    assert!(!spearman.is_empty());
    assert!(
        spearman
            .iter()
            .all(|r| !r.error.is_empty() && r.statistic.is_nan()),
        "{spearman:?}"
    );
}

#[test]
fn missing_inputs_fail_only_their_cells() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_store_fixture(dir.path(), 9);
    std::fs::remove_dir_all(dir.path().join("generated/sd35/grass")).unwrap();
    let run = Run::load(&config).unwrap();
    let rq1 = run.run_rq1().unwrap();
    assert!(!rq1.failures.is_empty());
    assert!(
        rq1.failures
            .iter()
            .all(|f| f.cell.contains("grass") && f.cell.contains("sd35")),
        "{:?}",
        rq1.failures
    );
    assert!(rq1.alignment.iter().any(|r| r.concept == "grass"));
}
