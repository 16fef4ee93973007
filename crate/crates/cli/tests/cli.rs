use std::path::Path;
use std::process::{Command, Output};

fn conceptfaith(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conceptfaith"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_project_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    let out = conceptfaith(&["toy-project", "--out", s(&root), "--small"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let config = root.join("run.toml");

    let out = conceptfaith(&["report", "--config", s(&config), "--figures"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = root.join("results");
    for f in [
        "rq1_alignment.csv",
        "rq2_curves.csv",
        "rq3_deltas.csv",
        "rq4_stats.csv",
        "appendix_cosine_tcav.tex",
    ] {
        assert!(results.join(f).exists(), "{f} missing");
    }
    assert!(results
        .join("figures/rq4_probability_visual-tcav.svg")
        .exists());

    let out = conceptfaith(&[
        "cav",
        "--config",
        s(&config),
        "--model",
        "toy-cnn",
        "--layer",
        "conv2",
        "--concept",
        "striped",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cav_path = String::from_utf8(out.stdout).unwrap();
    assert!(Path::new(cav_path.split(" (norm").next().unwrap()).exists());

    let out = conceptfaith(&[
        "extract",
        "--config",
        s(&config),
        "--model",
        "toy-cnn",
        "--layer",
        "conv1",
        "--set",
        "class:zebra",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // A missing generated set fails its cells and the exit code says so.
    std::fs::remove_dir_all(root.join("data/generated/mock-b/dotted")).unwrap();
    let out = conceptfaith(&["rq1", "--config", s(&config), "--seed", "4"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dotted"));

    // Regenerate it through a mock adapter and the run succeeds again.
    let text = std::fs::read_to_string(&config).unwrap().replace(
        "label = \"Mock B\"\n",
        "label = \"Mock B\"\nadapter = { kind = \"mock\", diversity = 0.3 }\n",
    );
    std::fs::write(&config, text).unwrap();
    let out = conceptfaith(&[
        "generate",
        "--config",
        s(&config),
        "--provider",
        "mock-b",
        "--concept",
        "dotted",
        "--count",
        "24",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = conceptfaith(&["rq1", "--config", s(&config), "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_exits_with_2() {
    let out = conceptfaith(&["rq1", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&out), 2);
}
