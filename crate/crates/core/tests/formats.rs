use std::fs;
use std::path::{Path, PathBuf};

use fennec_core::archi2vec::{ArchGraph, ATOMS, UNKNOWN_ATOM};
use fennec_core::data::{load_feature_set, load_matrix, load_vector, parse_feature_set, parse_vector, save_matrix, save_vector, Manifest, PerformanceMatrix};
use fennec_core::pipeline::{matrix_digest, save_matrix_with_digest};
use nalgebra::DMatrix;

fn mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini")
}

#[test]
fn fixture_repository_loads() {
    let m = Manifest::load(&mini().join("manifest.json")).unwrap();
    assert_eq!(m.model_ids(), vec!["m1", "m2"]);
    assert_eq!(m.task_ids(), vec!["taskA", "taskB", "taskC"]);
    for t in &m.tasks {
        let g = t.proxy_embedding.as_ref().unwrap();
        assert_eq!(g.len(), 4);
        assert!((g.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        for model in m.model_ids() {
            let fs = load_feature_set(&m.feature_path(&t.task_id, &model).unwrap(), &t.task_id, &model, t.class_count).unwrap();
            assert_eq!(fs.n(), t.sample_count);
            assert_eq!(fs.dim(), if model == "m1" { 3 } else { 4 });
            assert!(fs.class_counts().iter().all(|&c| c > 0));
        }
    }
}

#[test]
fn fixture_graphs_follow_the_contract() {
    let residual = ArchGraph::load(&mini().join("graphs/m1.json")).unwrap();
    let chain = ArchGraph::load(&mini().join("graphs/m2.json")).unwrap();
    assert!(residual.1.is_empty() && chain.1.is_empty());
    assert!(residual.0.count_atom("AddBackward0") > 0);
    assert_eq!(chain.0.count_atom("AddBackward0"), 0);
    for g in [&residual.0, &chain.0] {
        assert!(g.nodes.iter().all(|n| ATOMS.contains(&n.atom.as_str()) || n.atom == UNKNOWN_ATOM));
    }
}

#[test]
fn feature_csv_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::load(&mini().join("manifest.json")).unwrap();
    let fs_in = load_feature_set(&m.feature_path("taskA", "m2").unwrap(), "taskA", "m2", 3).unwrap();
    let path = dir.path().join("f.csv");
    fs_in.save(&path).unwrap();
    assert_eq!(load_feature_set(&path, "taskA", "m2", 3).unwrap(), fs_in);
}

#[test]
fn feature_csv_errors_name_the_row() {
    let parse = |text: &str| parse_feature_set(text, "f.csv", "t", "m", 2).unwrap_err().to_string();
    assert!(parse("label,f0,f1\n0,1.0,2.0\n1,3.0\n").contains("row 1"));
    assert!(parse("label,f0\n0,1.0\n2,1.0\n").contains("label out of range at row 1"));
    assert!(parse("label,f0\n0,NaN\n").contains("non-finite value at row 0"));
    assert!(parse("label,f0\n0,inf\n").contains("row 0"));
    assert!(parse("label,f0\n0,abc\n").contains("bad number at row 0"));
    assert!(parse("label,g0\n0,1.0\n").contains("header"));
    assert!(parse("").contains("empty"));
}

#[test]
fn feature_csv_skips_comments_and_blank_lines() {
    let text = "# extractor: resnet18, layer avgpool\nlabel,f0\n\n0,1.5\n# mid\n1,-2.5\n";
    let fs = parse_feature_set(text, "f.csv", "t", "m", 2).unwrap();
    assert_eq!(fs.labels, vec![0, 1]);
    assert_eq!(fs.features, DMatrix::from_row_slice(2, 1, &[1.5, -2.5]));
}

#[test]
fn proxy_csv_with_comment_header() {
    let v = parse_vector("# pooling: mean over 500 probe images, L2-normalized\n0.6,0.8\n", "p.csv").unwrap();
    assert_eq!(v, vec![0.6, 0.8]);
    assert!(parse_vector("0.6,0.8\n0.1,0.2\n", "p.csv").is_err());
    assert!(parse_vector("0.6,nan\n", "p.csv").is_err());
    assert!(parse_vector("# only a comment\n", "p.csv").is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let g = vec![0.1, 1.0 / 3.0, -2.5e-17];
    save_vector(&g, &path).unwrap();
    assert_eq!(load_vector(&path).unwrap(), g);
}

#[test]
fn performance_matrix_round_trips_with_digest() {
    let dir = tempfile::tempdir().unwrap();
    let p = PerformanceMatrix::new(
        vec!["a".into(), "b".into()],
        vec!["t0".into(), "t1".into(), "t2".into()],
        DMatrix::from_row_slice(2, 3, &[0.1, 2.0 / 3.0, 5.0, 0.0, 1e-300, 123.456]),
    )
    .unwrap();
    let plain = dir.path().join("plain.csv");
    save_matrix(&p, &plain).unwrap();
    assert_eq!(load_matrix(&plain).unwrap(), p);
    assert_eq!(matrix_digest(&plain).unwrap(), None);

    let tagged = dir.path().join("tagged.csv");
    save_matrix_with_digest(&p, &tagged, "abc123").unwrap();
    assert_eq!(load_matrix(&tagged).unwrap(), p);
    assert_eq!(matrix_digest(&tagged).unwrap().as_deref(), Some("abc123"));
}

#[test]
fn negative_matrix_entry_rejected() {
    let text = "model_id,t0\na,-0.5\n";
    assert!(PerformanceMatrix::parse(text, "p.csv").is_err());
    let text = "task,t0\na,0.5\n";
    assert!(PerformanceMatrix::parse(text, "p.csv").unwrap_err().to_string().contains("model_id"));
}

#[test]
fn manifest_rejects_bad_references() {
    let dir = tempfile::tempdir().unwrap();
    let write = |body: &str| {
        let p = dir.path().join("manifest.json");
        fs::write(&p, body).unwrap();
        Manifest::load(&p)
    };
    let model = r#"{"model_id":"m","param_count":10,"layer_count":2}"#;
    let dangling = format!(r#"{{"models":[{model}],"tasks":[{{"task_id":"t","class_count":2,"sample_count":4,"feature_files":{{"x":"f.csv"}}}}]}}"#);
    assert!(write(&dangling).unwrap_err().to_string().contains("dangling"));
    let dup = format!(r#"{{"models":[{model},{model}],"tasks":[]}}"#);
    assert!(write(&dup).unwrap_err().to_string().contains("duplicate"));
    let unknown = format!(r#"{{"models":[{model}],"tasks":[],"extra":1}}"#);
    assert!(write(&unknown).is_err());
    let accuracy = format!(r#"{{"models":[{model}],"tasks":[{{"task_id":"t","class_count":2,"sample_count":4,"ground_truth":{{"m":1.5}}}}]}}"#);
    assert!(write(&accuracy).unwrap_err().to_string().contains("outside [0, 1]"));
}

#[test]
fn graph_json_rejects_non_graph_input() {
    assert!(ArchGraph::from_json("[]", "g.json").is_err());
    assert!(ArchGraph::from_json(r#"{"graph_id":"g","nodes":[],"edges":[]}"#, "g.json").is_err());
    let dup = r#"{"graph_id":"g","nodes":[{"id":0,"atom":"Variable"},{"id":0,"atom":"Variable"}],"edges":[]}"#;
    assert!(ArchGraph::from_json(dup, "g.json").unwrap_err().to_string().contains("duplicate"));
}
