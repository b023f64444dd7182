//! Integration tests for the command layer: flag validation, exit-code
//! mapping, output schemas and re-parse round trips.

use std::path::PathBuf;
use std::process::Command;

use vicd_cli::config::parse_grid;
use vicd_cli::{cmd_discover, cmd_eval, cmd_gen, cmd_sweep, exit_code_for, DiscoverArgs, EvalArgs, SweepArgs};
use vicd_core::archive::save_model;
use vicd_core::data::{generate_class_pairs, save_pairs, SyntheticTaskSpec};
use vicd_core::graph::CircuitFile;
use vicd_core::planted::single_signal_head_model;
use vicd_core::Error;

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Write a model + pair set usable by most commands.
fn fixtures(dir: &PathBuf) -> (PathBuf, PathBuf) {
    let model = single_signal_head_model(4, 16, 17, 4, 2.0).unwrap();
    let model_path = dir.join("model.cfw");
    save_model(&model, &model_path).unwrap();

    let mut task = SyntheticTaskSpec::coordinate_patterns(4, 16, 6.0, 5).unwrap();
    task.foreground_fraction = 0.5;
    let pairs_dir = dir.join("pairs");
    let examples = generate_class_pairs(&task, 2, 20).unwrap();
    save_pairs(&pairs_dir, &examples, &task.digest(), 4).unwrap();
    (model_path, pairs_dir)
}

#[test]
fn gen_same_config_and_seed_is_digest_identical() {
    let dir = temp_dir("gen_det");
    let config_path = dir.join("gen.json");
    let out = dir.join("out_pairs");
    std::fs::write(
        &config_path,
        format!(
            r#"{{"data": {{"kind": "class", "classes": 4, "seed": 11, "class": 0, "n": 6, "out": "{}"}}}}"#,
            out.display()
        ),
    )
    .unwrap();
    cmd_gen(&config_path).unwrap();
    let first = std::fs::read(out.join("pairs.cfw")).unwrap();
    cmd_gen(&config_path).unwrap();
    let second = std::fs::read(out.join("pairs.cfw")).unwrap();
    assert_eq!(first, second);

    // The manifest lists exactly n ids.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["ids"].as_array().unwrap().len(), 6);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_missing_required_field_is_a_config_error() {
    let dir = temp_dir("gen_bad");
    let config_path = dir.join("gen.json");
    // Typographic data without an amplitude.
    std::fs::write(
        &config_path,
        r#"{"data": {"kind": "typographic", "classes": 4, "n": 4, "target": 1, "out": "/tmp/never"}}"#,
    )
    .unwrap();
    let err = cmd_gen(&config_path).unwrap_err();
    assert_eq!(exit_code_for(&err), 2, "{err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn discover_flag_validation() {
    let dir = temp_dir("flags");
    let (model, pairs) = fixtures(&dir);

    // --steps with eap is rejected.
    let mut args = DiscoverArgs::new(model.clone(), pairs.clone(), "eap", dir.join("c.json"));
    args.steps = Some(5);
    args.size = Some(3);
    let err = cmd_discover(&args).unwrap_err();
    assert_eq!(exit_code_for(&err), 2, "{err}");

    // --steps with eapig is accepted.
    let mut args = DiscoverArgs::new(model.clone(), pairs.clone(), "eapig", dir.join("c.json"));
    args.steps = Some(5);
    args.size = Some(3);
    cmd_discover(&args).unwrap();

    // vicd without --threshold is rejected.
    let args = DiscoverArgs::new(model.clone(), pairs.clone(), "vicd", dir.join("c.json"));
    let err = cmd_discover(&args).unwrap_err();
    assert_eq!(exit_code_for(&err), 2);

    // random needs --size.
    let args = DiscoverArgs::new(model.clone(), pairs.clone(), "random", dir.join("c.json"));
    let err = cmd_discover(&args).unwrap_err();
    assert_eq!(exit_code_for(&err), 2);

    // Binary-circuit preset threshold is accepted.
    let mut args = DiscoverArgs::new(model, pairs, "vicd", dir.join("preset.json"));
    args.threshold = Some(4e-4);
    cmd_discover(&args).unwrap();
    let file = CircuitFile::load(&dir.join("preset.json")).unwrap();
    assert_eq!(file.metadata.threshold, Some(4e-4));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn discovered_circuit_reparses_and_matches_model() {
    let dir = temp_dir("roundtrip");
    let (model_path, pairs) = fixtures(&dir);
    let mut args = DiscoverArgs::new(
        model_path.clone(),
        pairs,
        "vicd",
        dir.join("circuit.json"),
    );
    args.threshold = Some(1e-3);
    cmd_discover(&args).unwrap();

    let file = CircuitFile::load(&dir.join("circuit.json")).unwrap();
    let graph = file.rebuild_graph().unwrap();
    let mask = file.to_mask(&graph).unwrap();
    assert!(mask.popcount() >= 1);
    let model = vicd_core::archive::load_model(&model_path).unwrap();
    assert_eq!(file.model_digest, model.digest());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_full_circuit_recovers_base_accuracy_and_mismatch_is_exit_4() {
    let dir = temp_dir("eval");
    let (model_path, pairs) = fixtures(&dir);

    // Full-graph circuit file.
    let model = vicd_core::archive::load_model(&model_path).unwrap();
    let graph = vicd_core::graph::build_graph(&model.config);
    let full = CircuitFile::from_mask(
        &graph,
        &vicd_core::graph::CircuitMask::full(&graph),
        model.digest(),
        Default::default(),
    )
    .unwrap();
    full.save(&dir.join("full.json")).unwrap();

    cmd_eval(&EvalArgs {
        model: model_path.clone(),
        circuit: dir.join("full.json"),
        pairs: pairs.clone(),
        out: dir.join("eval.csv"),
    })
    .unwrap();
    let csv = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "method,fraction,edges,accuracy,seed");
    let row = lines.next().unwrap();
    // Full circuit's accuracy equals base model accuracy on clean inputs.
    let (examples, _) = vicd_core::data::load_pairs(&pairs).unwrap();
    let base = examples
        .iter()
        .filter(|e| {
            vicd_core::linalg::argmax(
                &vicd_core::model::forward_with_trace(&model, &e.clean)
                    .unwrap()
                    .logits,
            ) == e.label
        })
        .count() as f64
        / examples.len() as f64;
    let accuracy: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(accuracy, base);

    // A circuit mined on a different model is an artifact mismatch.
    let other = single_signal_head_model(4, 16, 17, 2, 1.5).unwrap();
    let other_graph = vicd_core::graph::build_graph(&other.config);
    let foreign = CircuitFile::from_mask(
        &other_graph,
        &vicd_core::graph::CircuitMask::full(&other_graph),
        other.digest(),
        Default::default(),
    )
    .unwrap();
    foreign.save(&dir.join("foreign.json")).unwrap();
    let err = cmd_eval(&EvalArgs {
        model: model_path,
        circuit: dir.join("foreign.json"),
        pairs,
        out: dir.join("eval2.csv"),
    })
    .unwrap_err();
    assert_eq!(exit_code_for(&err), 4, "{err}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_emits_one_row_per_method_and_fraction() {
    let dir = temp_dir("sweep");
    let (model_path, pairs) = fixtures(&dir);
    let grid = parse_grid("0.25,0.5,1.0").unwrap();
    cmd_sweep(&SweepArgs {
        model: model_path,
        pairs,
        methods: "eap,random".into(),
        grid,
        steps: None,
        metric: "logitdiff".into(),
        target: None,
        seed: 1,
        eval_pairs: None,
        no_filter: false,
        out: dir.join("sweep.csv"),
    })
    .unwrap();
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,fraction,edges,accuracy,seed");
    assert_eq!(lines.len(), 1 + 2 * 3);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn twenty_point_grid_parses_to_twenty_rows_per_method() {
    let grid = parse_grid("0.05:0.05:1.0").unwrap();
    assert_eq!(grid.len(), 20);
}

#[test]
fn binary_exit_codes_through_the_executable() {
    let bin = env!("CARGO_BIN_EXE_vicd");

    // Usage error from clap.
    let status = Command::new(bin).arg("discover").status().unwrap();
    assert_eq!(status.code(), Some(2));

    // Config error: missing file.
    let status = Command::new(bin)
        .args(["gen", "--config", "/nonexistent/config.json"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Inconsistent method flags.
    let dir = temp_dir("exe");
    let (model, pairs) = fixtures(&dir);
    let status = Command::new(bin)
        .args([
            "discover",
            "--model",
            model.to_str().unwrap(),
            "--pairs",
            pairs.to_str().unwrap(),
            "--method",
            "eap",
            "--steps",
            "5",
            "--size",
            "3",
            "--out",
            dir.join("c.json").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_code_mapping() {
    assert_eq!(exit_code_for(&Error::Numeric("x".into())), 3);
    assert_eq!(exit_code_for(&Error::Fingerprint("x".into())), 4);
    assert_eq!(exit_code_for(&Error::Argument("x".into())), 2);
    assert_eq!(exit_code_for(&Error::Config("x".into())), 2);
    assert_eq!(exit_code_for(&Error::Format("x".into())), 2);
}

#[test]
fn analyze_reports_stability_per_edge_type() {
    let dir = temp_dir("analyze");
    let (model_path, pairs) = fixtures(&dir);
    let mut circuits = Vec::new();
    for seed in 0..3u64 {
        let out = dir.join(format!("c{seed}.json"));
        let mut args = DiscoverArgs::new(model_path.clone(), pairs.clone(), "vicd", out.clone());
        args.threshold = Some(1e-3);
        args.seed = seed;
        cmd_discover(&args).unwrap();
        circuits.push(out);
    }
    vicd_cli::cmd_analyze(&vicd_cli::AnalyzeArgs {
        circuits,
        out_dir: dir.join("analysis"),
    })
    .unwrap();

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("analysis/report.json")).unwrap(),
    )
    .unwrap();
    // One ensemble (class 2), with a stability histogram covering all nine
    // edge types.
    let hist = &report["2"]["stability_by_edge_type"];
    assert_eq!(hist.as_object().unwrap().len(), 9);
    assert!(report["2"]["core_edges"].as_array().unwrap().len() >= 1);

    let csv = std::fs::read_to_string(dir.join("analysis/similarity.csv")).unwrap();
    assert!(csv.starts_with("class_a,class_b,jaccard_mean,jaccard_std\n"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn steer_default_regime_is_pre_normed_mean() {
    // The CLI default must be the pre-normed mean regime.
    let args = vicd_cli::SteerArgs::new(
        PathBuf::new(),
        PathBuf::new(),
        PathBuf::new(),
        PathBuf::new(),
        PathBuf::new(),
    );
    assert_eq!(args.regime, "pre_normed:mean");
    vicd_core::steering::DirectionRegime::parse(&args.regime).unwrap();
}
