use std::path::Path;
use std::process::Command;

use ssmnet::cli::{embed_export, parse_config, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};
use ssmnet::datasets::synth_dataset;
use ssmnet::models::{embed_backbone, load_weights};
use ssmnet::pipelines::{init_siamese, prepare_dataset, MetricsReport, RunConfig};

const SMALL: &str = "\
# tiny run
n_way = 3
k_shot = 2
q_queries = 2
eval_queries = 2
epochs = 2
episodes_per_epoch = 2
eval_episodes = 10
filters = 8
embedding_dim = 8
pair_batch = 8
split_base = 4
split_test = 3
";

fn ssmnet(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ssmnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_report(p: &Path) -> MetricsReport {
    let r = MetricsReport::from_json(&std::fs::read_to_string(p).unwrap()).unwrap();
    r.validate().unwrap();
    r
}

#[test]
fn synth_train_eval_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.conf");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = d.join("data");
    let (report, weights) = (d.join("report.json"), d.join("m.ssmw"));

    let (code, err) = ssmnet(&["synth", "--data", s(&data), "--classes", "7", "--per-class", "6", "--out", s(&report)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(read_report(&report).command, "synth");

    let split = d.join("split.txt");
    let (code, err) =
        ssmnet(&["prepare", "--config", s(&cfg), "--data", s(&data), "--split-out", s(&split), "--out", s(&report)]);
    assert_eq!(code, 0, "{err}");
    assert!(std::fs::read_to_string(&split).unwrap().contains("test"));

    let (code, err) = ssmnet(&[
        "train-matching", "--config", s(&cfg), "--data", s(&data), "--weights-out", s(&weights), "--out", s(&report), "--seed", "3",
    ]);
    assert_eq!(code, 0, "{err}");
    let r = read_report(&report);
    assert_eq!((r.command.as_str(), r.seed, r.loss_curve.len()), ("train-matching", 3, 2));
    let mut expected = parse_config(Some(&cfg), &[]).unwrap();
    expected.data_root = data.clone();
    expected.seed = 3;
    assert_eq!(r.config, expected);
    assert_eq!(r.config_hash, expected.hash());

    let split_arg = format!("split_file={}", s(&split));
    let (code, err) = ssmnet(&[
        "eval", "--config", s(&cfg), "--data", s(&data), "--weights", s(&weights), "--out", s(&report), &split_arg,
    ]);
    assert_eq!(code, 0, "{err}");
    let r = read_report(&report);
    assert_eq!(r.accuracy.unwrap().episodes, 10);
    assert!(r.f1.is_some());

    let siamese = d.join("s.ssmw");
    let (code, err) = ssmnet(&[
        "train-siamese", "--config", s(&cfg), "--data", s(&data), "--weights-out", s(&siamese), "--out", s(&report),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(read_report(&report).pair_distance.is_some());
    let ssm = d.join("ssm.ssmw");
    let (code, err) = ssmnet(&[
        "train-ssm", "--config", s(&cfg), "--data", s(&data), "--siamese", s(&siamese), "--weights-out", s(&ssm), "--out", s(&report),
    ]);
    assert_eq!(code, 0, "{err}");
    let (code, err) = ssmnet(&["eval", "--config", s(&cfg), "--data", s(&data), "--weights", s(&ssm), "--out", s(&report)]);
    assert_eq!(code, 0, "{err}");
    let (code, err) = ssmnet(&[
        "cluster-score", "--config", s(&cfg), "--data", s(&data), "--weights", s(&siamese), "--out", s(&report),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(read_report(&report).cluster.unwrap().k, 3);

    let csv = d.join("emb.csv");
    let (code, err) = ssmnet(&[
        "embed", "--config", s(&cfg), "--data", s(&data), "--weights", s(&siamese), "--csv", s(&csv), "--out", s(&report),
    ]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 7 * 6);
    assert!(text.starts_with("path,class,e0,"));
}

#[test]
fn exit_codes_per_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let report = d.join("r.json");
    let w = d.join("w.ssmw");

    let bad_cfg = d.join("bad.conf");
    std::fs::write(&bad_cfg, "n_way = 5\nlearning_speed = 2\n").unwrap();
    let (code, err) = ssmnet(&["train-matching", "--config", s(&bad_cfg), "--weights-out", s(&w), "--out", s(&report)]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("learning_speed") && err.contains("line 2"), "{err}");

    let (code, err) = ssmnet(&["train-matching", "--weights-out", s(&w), "--out", s(&report), "n_way=0"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("n_way"), "{err}");
    let (code, _) = ssmnet(&["fly", "--out", s(&report)]);
    assert_eq!(code, EXIT_CONFIG);

    let missing = d.join("nowhere");
    let (code, err) = ssmnet(&["train-matching", "--data", s(&missing), "--weights-out", s(&w), "--out", s(&report)]);
    assert_eq!(code, EXIT_DATA, "{err}");
    assert!(!report.exists());

    let cfg = d.join("run.conf");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = d.join("data");
    synth_dataset(&data, 7, 6, 32, 0).unwrap();
    let junk = d.join("junk.ssmw");
    std::fs::write(&junk, b"XXXX0000").unwrap();
    let (code, err) = ssmnet(&["eval", "--config", s(&cfg), "--data", s(&data), "--weights", s(&junk), "--out", s(&report)]);
    assert_eq!(code, EXIT_DATA, "{err}");
    assert!(err.contains("bad magic"), "{err}");

    let (code, err) = ssmnet(&[
        "train-matching", "--config", s(&cfg), "--data", s(&data), "--weights-out", s(&w), "--out", s(&report), "lr=1e30",
    ]);
    assert_eq!(code, EXIT_NUMERIC, "{err}");
    assert!(err.contains("epoch"), "{err}");
    assert!(!report.exists());
}

#[test]
fn embed_export_matches_in_process_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        embedding_dim: 4,
        filters: 4,
        split_base: 3,
        ..RunConfig::default()
    };
    let manifest = synth_dataset(&dir.path().join("data"), 3, 1, 32, 4).unwrap();
    let data = prepare_dataset(manifest, &config).unwrap();
    let w = init_siamese(&config).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(embed_export(&config, &data, &w, &a).unwrap(), 3);
    embed_export(&config, &data, &w, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "path,class,e0,e1,e2,e3");
    let direct = embed_backbone(&config.backbone(), &w, "siamese", &data.batch(&[0, 1, 2]).unwrap()).unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(cols[1], data.manifest.records[i].class_name);
        for (j, c) in cols[2..].iter().enumerate() {
            let v: f32 = c.parse().unwrap();
            assert!((v - direct.row(i)[j]).abs() <= 1e-6, "{v} vs {}", direct.row(i)[j]);
        }
    }
    assert!(embed_export(&config, &data, &w, &dir.path().join("missing/dir/x.csv")).is_err());
    assert!(load_weights(dir.path().join("none.ssmw")).is_err());
}
