use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

const QUICK: &str = r#"
[data.synthetic]
n = 240
d_informative = 6
d_noise = 2
classes = 3
separation = 2.0

[cell]
num_intermediate = 3
feature_dim = 6

[search]
epochs = 4
warmup_epochs = 1
batch_size = 32

[search.sgl]
lambda_step = 0.01

[retrain]
epochs = 3

[prune]
lambdas = [0.0, 0.001]
optimizers = ["adam", "adam_hapg"]
epochs = 3
retrain_epochs = 2
batch_size = 64
"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sparsenas"));
    cmd.env("RUST_LOG", "warn").env("SPARSENAS_THREADS", "1");
    cmd
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Architecture weights in the `search` output format for the default op
/// set, 2 inputs and `nodes` intermediate nodes, filled by `weight(node,
/// from, op)`.
fn weights_doc(nodes: usize, weight: impl Fn(usize, usize, usize) -> f64) -> String {
    let ops = ["identity", "linear", "linear_tanh", "linear_relu", "elementwise_scale"];
    let nodes: Vec<_> = (2..2 + nodes)
        .map(|id| {
            let edges: Vec<_> = (0..id)
                .flat_map(|from| {
                    let w = &weight;
                    ops.iter()
                        .enumerate()
                        .map(move |(k, op)| json!({"from": from, "op": op, "weight": w(id, from, k)}))
                })
                .collect();
            json!({"id": id, "edges": edges})
        })
        .collect();
    serde_json::to_string_pretty(&json!({"inputs": 2, "nodes": nodes})).unwrap()
}

#[test]
fn search_writes_five_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let out = dir.path().join("run");
    let o = run(&cfg, &out, &["search"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        files_in(&out),
        ["arch.dot", "arch.json", "config.toml", "heatmap.csv", "metrics.csv"]
    );
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);
    assert!(fs::read_to_string(out.join("arch.dot")).unwrap().starts_with("digraph cell {"));
}

#[test]
fn unknown_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[search.sgl]\nlamda = 0.1\n");
    let o = run(&cfg, &dir.path().join("run"), &["search"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_value_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[search.sgl]\nalpha = 1.5\n");
    let o = run(&cfg, &dir.path().join("run"), &["search"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&dir.path().join("absent.toml"), &dir.path().join("run"), &["search"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn search_is_reproducible_and_snapshot_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&cfg, &a, &["search"]).status.success());
    assert!(run(&cfg, &b, &["search"]).status.success());
    let metrics = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(fs::read(a.join("arch.json")).unwrap(), fs::read(b.join("arch.json")).unwrap());

    // The snapshot alone reproduces the run.
    let c = dir.path().join("c");
    assert!(run(&a.join("config.toml"), &c, &["search"]).status.success());
    assert_eq!(metrics(&a), metrics(&c));

    let d = dir.path().join("d");
    assert!(run(&cfg, &d, &["--seed", "9", "search"]).status.success());
    assert_ne!(metrics(&a), metrics(&d));
}

#[test]
fn prune_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let out = dir.path().join("p");
    let o = run(&cfg, &out, &["prune"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files_in(&out), ["config.toml", "pruning.csv"]);
    let table = fs::read_to_string(out.join("pruning.csv")).unwrap();
    let mut lines = table.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("lambda,optimizer,penalty,val_acc,selected_features,remaining_neurons,element_sparsity"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn lasso_and_sgl_tables_differ() {
    let dir = tempfile::tempdir().unwrap();
    let table = |penalty: &str| {
        let text = format!("{QUICK}penalties = [\"{penalty}\"]\n");
        let cfg = write_config(dir.path(), &format!("{penalty}.toml"), &text);
        let out = dir.path().join(penalty);
        assert!(run(&cfg, &out, &["prune"]).status.success());
        let csv = fs::read_to_string(out.join("pruning.csv")).unwrap();
        csv.lines()
            .skip(1)
            .map(|l| l.split(',').nth(6).unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_ne!(table("lasso"), table("sgl"));
}

#[test]
fn empty_lambda_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.toml", "[prune]\nlambdas = []\n");
    let o = run(&cfg, &dir.path().join("p"), &["prune"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambdas"), "{}", stderr(&o));
}

#[test]
fn derive_prunes_exact_zeros_unless_a_threshold_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.toml", "");
    // Node 2 keeps two edges, one of them tiny; every other weight is zero.
    let doc = weights_doc(4, |id, from, op| match (id, from, op) {
        (2, 0, 0) => 0.5,
        (2, 1, 3) => 1e-4,
        _ => 0.0,
    });
    let weights = write_config(dir.path(), "arch.json", &doc);

    let exact = dir.path().join("exact");
    let o = run(&cfg, &exact, &["derive", weights.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files_in(&exact), ["config.toml", "derived.dot", "derived.json"]);
    let kept = |d: &Path| {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(d.join("derived.json")).unwrap()).unwrap();
        v["nodes"].as_array().unwrap().iter().map(|n| n["edges"].as_array().unwrap().len()).sum::<usize>()
    };
    assert_eq!(kept(&exact), 2);

    let thresholded = dir.path().join("thresholded");
    let o = run(&cfg, &thresholded, &["--threshold", "0.001", "derive", weights.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(kept(&thresholded), 1);

    // No randomness: a second derivation is byte-identical.
    let again = dir.path().join("again");
    assert!(run(&cfg, &again, &["derive", weights.to_str().unwrap()]).status.success());
    assert_eq!(
        fs::read(exact.join("derived.json")).unwrap(),
        fs::read(again.join("derived.json")).unwrap()
    );
}

#[test]
fn derive_of_all_zero_weights_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.toml", "");
    let weights = write_config(dir.path(), "arch.json", &weights_doc(4, |_, _, _| 0.0));
    let o = run(&cfg, &dir.path().join("d"), &["derive", weights.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn derive_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.toml", "");
    let weights = write_config(dir.path(), "arch.json", "{\"inputs\": 2}");
    let o = run(&cfg, &dir.path().join("d"), &["derive", weights.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&cfg, &dir.path().join("d"), &["derive", "no-such-file.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn retrain_on_the_shipped_fixture_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK.replace("feature_dim = 6", "feature_dim = 16").as_str());
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example_arch.json");
    let out = dir.path().join("r");
    let o = run(&cfg, &out, &["retrain", fixture.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("retrain.json")).unwrap()).unwrap();
    let acc = report["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["seed"], 0);

    let again = dir.path().join("r2");
    assert!(run(&cfg, &again, &["retrain", fixture.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(out.join("retrain.json")).unwrap(), fs::read(again.join("retrain.json")).unwrap());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["search.toml", "prune.toml"] {
        // The config is accepted; only the missing weights file fails.
        let o = bin()
            .current_dir(root.join(".."))
            .args(["--config", root.join(name).to_str().unwrap(), "derive", "missing.json"])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        assert!(stderr(&o).contains("missing.json"), "{name}: {}", stderr(&o));
    }
}
