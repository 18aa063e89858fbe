//! End-to-end checks of the `fpt` binary: command outputs must equal the
//! corresponding library calls byte for byte, and failures must map onto
//! the documented exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::OnceLock;

use fpt_cli::dataio::{scenario_dataset, FeatureRoute};
use fpt_cli::report::sig9;

use fpt_core::attribution::{evaluate, AttributionModel, Split};
use fpt_core::fingerprint::compute_fingerprint;
use fpt_core::fpte;
use fpt_core::index::ManifoldIndex;
use fpt_core::metrics::{nmi, Clustering};
use fpt_core::synth::{canonical_circle_config, Scenario};

fn fpt_raw(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_fpt"))
        .args(args)
        .output()
        .expect("fpt binary spawns")
}

fn fpt_ok(args: &[&str]) -> String {
    let out = fpt_raw(args);
    assert!(
        out.status.success(),
        "fpt {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// One small scenario and one trained checkpoint, built once through the
/// CLI itself and shared by every test in this target.
struct Fixture {
    _dir: tempfile::TempDir,
    scenario: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = canonical_circle_config(9);
        cfg.name = "tiny-circle".into();
        cfg.manifold.n = 400;
        cfg.real_holdout_n = 80;
        for g in &mut cfg.generators {
            g.n = 60;
        }
        let cfg_path = dir.path().join("scenario.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

        let scenario = dir.path().join("scenario");
        fpt_ok(&[
            "synth",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            scenario.to_str().unwrap(),
        ]);

        let model = dir.path().join("model.json");
        fpt_ok(&[
            "attribute",
            "--scenario",
            scenario.to_str().unwrap(),
            "--features",
            "artifact",
            "--arch",
            "mlp:16",
            "--epochs",
            "4",
            "--seed",
            "9",
            "--out",
            model.to_str().unwrap(),
        ]);

        Fixture {
            _dir: dir,
            scenario,
            model,
        }
    })
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

// ---------------------------------------------------------------------
// Golden equivalence: CLI output == direct library calls
// ---------------------------------------------------------------------

#[test]
fn fingerprint_files_equal_direct_library_output() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let real = fx.scenario.join("real.fpte");
    let generated = fx.scenario.join("gen-smoothing.fpte");

    let cli_out = tmp.path().join("cli.fpte");
    fpt_ok(&[
        "fingerprint",
        "--real",
        path_str(&real),
        "--gen",
        path_str(&generated),
        "--out",
        path_str(&cli_out),
    ]);

    let reference = fpte::load_set(&real).unwrap();
    let samples = fpte::load_set(&generated).unwrap();
    let index = ManifoldIndex::build(reference, None).unwrap();
    let fp = compute_fingerprint(&index, &samples).unwrap();
    let lib_out = tmp.path().join("lib.fpte");
    fp.save(&lib_out).unwrap();

    for suffix in ["", ".json", ".fp.json"] {
        let a = fs::read(tmp.path().join(format!("cli.fpte{suffix}"))).unwrap();
        let b = fs::read(tmp.path().join(format!("lib.fpte{suffix}"))).unwrap();
        assert_eq!(a, b, "fingerprint file cli.fpte{suffix} differs from the library's");
    }
}

#[test]
fn eval_report_accuracy_equals_library_evaluate() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let report_path = tmp.path().join("eval.json");
    fpt_ok(&[
        "eval",
        "--model",
        path_str(&fx.model),
        "--scenario",
        path_str(&fx.scenario),
        "--split",
        "test",
        "--out",
        path_str(&report_path),
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();

    let scenario = Scenario::load(&fx.scenario).unwrap();
    let model = AttributionModel::load(&fx.model).unwrap();
    let dataset = scenario_dataset(&scenario, FeatureRoute::Artifact, model.seed).unwrap();
    let want = evaluate(&model, &dataset, Split::Test).unwrap();

    let want_acc: f64 = sig9(want.accuracy).parse().unwrap();
    assert_eq!(report["accuracy"].as_f64(), Some(want_acc));
    assert_eq!(report["total"].as_u64(), Some(want.total as u64));
}

#[test]
fn nmi_report_equals_library_score() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ["a", "a", "b", "b", "c", "c"];
    let b = ["a", "b", "b", "a", "c", "c"];
    let a_path = tmp.path().join("a.txt");
    let b_path = tmp.path().join("b.txt");
    fs::write(&a_path, a.join("\n")).unwrap();
    fs::write(&b_path, b.join("\n")).unwrap();

    let stdout = fpt_ok(&[
        "metrics",
        "nmi",
        "--labels",
        path_str(&a_path),
        "--labels-b",
        path_str(&b_path),
    ]);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();

    let ca = Clustering::from_labels(&a.map(String::from)).unwrap();
    let cb = Clustering::from_labels(&b.map(String::from)).unwrap();
    let want = nmi(&ca, &cb).unwrap();
    assert!(want > 0.0 && want < 1.0, "fixture should be nontrivial");
    let want_9: f64 = sig9(want).parse().unwrap();
    assert_eq!(report["nmi"].as_f64(), Some(want_9));
}

// ---------------------------------------------------------------------
// Configuration precedence
// ---------------------------------------------------------------------

#[test]
fn attribute_flags_override_the_config_file() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("train.json");
    fs::write(
        &cfg_path,
        r#"{"arch": "linear", "epochs": 50, "seed": 9}"#,
    )
    .unwrap();

    let model_path = tmp.path().join("model.json");
    let stdout = fpt_ok(&[
        "attribute",
        "--scenario",
        path_str(&fx.scenario),
        "--config",
        path_str(&cfg_path),
        "--epochs",
        "2",
        "--out",
        path_str(&model_path),
    ]);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();

    // The flag wins over the file; unset options fall back to the file.
    assert_eq!(report["epochs_trained"].as_u64(), Some(2));
    assert_eq!(report["arch"].as_str(), Some("linear"));
    let model = AttributionModel::load(&model_path).unwrap();
    assert_eq!(model.architecture.hidden, None);
    assert_eq!(model.seed, 9);
    assert_eq!(model.epochs_trained, 2);
}

// ---------------------------------------------------------------------
// Exit codes
// ---------------------------------------------------------------------

#[test]
fn usage_errors_exit_with_code_2() {
    let out = fpt_raw(&["embed", "x.png", "--space", "bogus", "--out", "y.fpte"]);
    assert_eq!(out.status.code(), Some(2));

    let out = fpt_raw(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_files_exit_with_code_3() {
    let out = fpt_raw(&[
        "metrics",
        "fd",
        "--features",
        "/nonexistent/a.fpte",
        "--features-b",
        "/nonexistent/b.fpte",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("a.fpte"), "stderr should name the file: {stderr}");
}

#[test]
fn validation_errors_exit_with_code_4() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();

    // An empty label map cannot drive a cross evaluation.
    let map_path = tmp.path().join("map.json");
    fs::write(&map_path, "{}").unwrap();
    let out = fpt_raw(&[
        "eval",
        "--model",
        path_str(&fx.model),
        "--scenario",
        path_str(&fx.scenario),
        "--cross",
        "--map",
        path_str(&map_path),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("map.json"),
        "stderr should name the empty map: {stderr}"
    );

    // Mismatched dimensions between reference and samples.
    let real = fx.scenario.join("real.fpte");
    let labels_path = tmp.path().join("labels.txt");
    fs::write(&labels_path, "a\nb\n").unwrap();
    let out = fpt_raw(&[
        "fingerprint",
        "--real",
        path_str(&real),
        "--gen",
        path_str(&labels_path),
        "--out",
        path_str(&tmp.path().join("fp.fpte")),
    ]);
    assert_ne!(out.status.code(), Some(0), "corrupt tensor must not fingerprint");
}

// ---------------------------------------------------------------------
// Smaller surface checks
// ---------------------------------------------------------------------

#[test]
fn dump_streams_csv_to_stdout_when_out_is_omitted() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let fp = tmp.path().join("fp.fpte");
    fpt_ok(&[
        "fingerprint",
        "--real",
        path_str(&fx.scenario.join("real.fpte")),
        "--gen",
        path_str(&fx.scenario.join("gen-high-freq.fpte")),
        "--out",
        path_str(&fp),
    ]);
    let stdout = fpt_ok(&["dump", "--fingerprint", path_str(&fp)]);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("query_id,neighbor_id,norm,v0,v1"));
    assert_eq!(lines.count(), 60, "one row per artifact");
}

#[test]
fn canonical_synth_output_loads_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("scenario");
    fpt_ok(&[
        "synth",
        "--canonical",
        "circle",
        "--seed",
        "3",
        "--out",
        path_str(&out),
    ]);

    let scenario = Scenario::load(&out).unwrap();
    assert_eq!(scenario.seed, 3);
    assert_eq!(scenario.generators.len(), 4);
    assert_eq!(scenario.real.len(), 10_000);

    let stdout = fpt_ok(&["verify", "--manifest", path_str(&out.join("run.json"))]);
    assert!(stdout.contains("ok"), "verify should report checked files: {stdout}");
}
