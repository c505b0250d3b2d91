use std::fs;
use std::path::PathBuf;

use decomp_bench::experiment::{run_experiment, ExperimentConfig};
use decomp_bench::report::{emit_report, format_float, hierarchy_svg, line_plot, Cell, Report, SCHEMA_VERSION};
use decomp_bench::BenchError;
use serde_json::{json, Value};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("decomp-reports-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

#[test]
fn empty_report_writes_valid_files() {
    let dir = scratch("empty");
    let rep = Report::new("attribute", 7, &json!({})).unwrap();
    let files = emit_report(&rep, &dir).unwrap();
    assert_eq!(files.len(), 3);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["schema"], SCHEMA_VERSION);
    assert_eq!(metrics["seed"], 7);
    assert_eq!(metrics["rows"], json!([]));
    assert_eq!(fs::read_to_string(dir.join("metrics.csv")).unwrap(), "\n");
    let config: Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 7);
}

#[test]
fn floats_round_trip_through_csv() {
    for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
        assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
    }
    let mut rep = Report::new("trim", 0, &json!({"a": 1})).unwrap().columns(&["name", "score"]);
    rep.push_row(vec!["a,b".into(), Cell::Num(0.1)]).unwrap();
    assert_eq!(rep.to_csv(), "name,score\n\"a,b\",1.0000000000000001e-1\n");
    assert!(rep.push_row(vec![Cell::Num(1.0)]).is_err());
}

#[test]
fn provenance_is_recorded() {
    let rep = Report::new("acd", 3, &json!({"k_percent": 5.0})).unwrap();
    let other = Report::new("acd", 3, &json!({"k_percent": 6.0})).unwrap();
    let j = rep.to_json();
    assert_eq!(j["config_hash"].as_str().unwrap().len(), 64);
    assert_ne!(rep.config_hash(), other.config_hash());
    assert!(j["versions"]["decomp-core"].is_string());
    assert!(j["versions"]["decomp-bench"].is_string());
}

#[test]
fn bad_artifact_names_and_paths_are_reported() {
    let mut rep = Report::new("trim", 0, &json!({})).unwrap();
    rep.plots.push(("../escape.svg".into(), String::new()));
    assert!(matches!(emit_report(&rep, &scratch("bad-name")), Err(BenchError::InvalidConfig(_))));

    let blocker = scratch("blocker");
    fs::write(&blocker, "file").unwrap();
    let err = emit_report(&Report::new("trim", 0, &json!({})).unwrap(), &blocker.join("sub")).unwrap_err();
    assert_eq!(err.code(), "io");
    assert!(err.to_string().contains("blocker"));
}

#[test]
fn plots_are_svg_documents() {
    let svg = line_plot("t", "x", "y", &[("a".into(), vec![1.0, 3.0, 2.0]), ("b".into(), vec![f64::NAN, 0.0])]);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("<polyline") || svg.contains("<path"));
    let empty = line_plot("t", "x", "y", &[]);
    assert!(empty.trim_end().ends_with("</svg>"));
}

#[test]
fn unknown_kinds_and_fields_are_rejected() {
    let err = ExperimentConfig::from_json(r#"{"kind": "mnist"}"#).unwrap_err();
    assert_eq!(err.code(), "unknown-kind");
    let err = ExperimentConfig::from_json(r#"{"kind": "acd", "extra": 1}"#).unwrap_err();
    assert_eq!(err.code(), "json");
    let mut c = ExperimentConfig::new("frequency-sim");
    c.set_param("n_datsets", json!(2)).unwrap();
    assert_eq!(run_experiment(&c).unwrap_err().code(), "invalid-config");
    let mut c = ExperimentConfig::new("color-bias");
    c.set_param("cdep.lamda", json!(2)).unwrap();
    assert!(run_experiment(&c).unwrap_err().to_string().contains("cdep.lamda"));
}

#[test]
fn partial_nested_overrides_keep_kind_defaults() {
    let mut c = ExperimentConfig::new("color-bias");
    c.set_param("seeds", json!([0])).unwrap();
    c.set_param("n_per_class", json!(2)).unwrap();
    c.set_param("vanilla.epochs", json!(1)).unwrap();
    c.set_param("cdep.epochs", json!(1)).unwrap();
    let rep = run_experiment(&c).unwrap();
    assert_eq!(rep.config["cdep"]["epochs"], 1);
    assert_eq!(rep.config["cdep"]["lambda"], decomp_bench::color::ColorBiasConfig::default().cdep.lambda);
}

#[test]
fn reruns_are_byte_identical_and_record_the_seed() {
    let mut c = ExperimentConfig::new("frequency-sim");
    c.seed = 11;
    c.set_param("n_datasets", json!(2)).unwrap();
    c.set_param("epochs", json!(5)).unwrap();
    let (a, b) = (scratch("rerun-a"), scratch("rerun-b"));
    emit_report(&run_experiment(&c).unwrap(), &a).unwrap();
    emit_report(&run_experiment(&c).unwrap(), &b).unwrap();
    for name in ["metrics.json", "metrics.csv", "config.json", "frequency_scores.svg"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let metrics: Value = serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 11);
    assert_eq!(metrics["config"]["seed"], 11);
}

#[test]
fn hierarchy_plot_has_one_box_per_node() {
    use decomp_core::acd::build_hierarchy;
    use decomp_core::{AcdConfig, Adjacency, ArchitectureDescriptor, Tensor};
    let arch = ArchitectureDescriptor::from_json(
        r#"{"input_shape":[5],"num_classes":2,"layers":[{"kind":"linear","out":4},{"kind":"tanh"},{"kind":"linear","out":2}]}"#,
    )
    .unwrap();
    let net = arch.init_random(1).unwrap();
    let x = Tensor::new(vec![5], vec![0.3, -1.0, 0.5, 2.0, -0.2]).unwrap();
    let h = build_hierarchy(&net, &x, &Adjacency::chain(5), &AcdConfig::default()).unwrap();
    let labels: Vec<String> = ["a", "b", "c", "d", "e"].map(String::from).to_vec();
    let svg = hierarchy_svg(&h, &labels);
    assert_eq!(svg.matches("<rect").count(), h.nodes.len());
    assert!(svg.contains(">c ("));
}
