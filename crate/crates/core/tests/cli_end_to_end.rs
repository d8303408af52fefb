use std::path::Path;

use pqs::accumulate::{AccumConfig, Policy};
use pqs::cli::{config::RunConfig, container, idx};
use pqs::nn;
use pqs::profile::{self, SweepRecord};

mod common;

fn write_config(dir: &Path, extra: serde_json::Value) -> String {
    let data = dir.join("data");
    common::write_fixture(&data, 300, 100);
    let mut cfg = serde_json::json!({
        "preset": "mlp1",
        "data_dir": data,
        "weight_bits": 8,
        "act_bits": 8,
        "seed": 3,
        "train": {
            "schedule": "PtoQ",
            "epochs": 3,
            "qat_epochs": 1,
            "prune": {"target": 0.5, "interval": 1, "increment": 0.25, "group_size": 16},
            "learning_rate": 0.05,
            "batch_size": 32
        },
        "accum": {"p": [12, 16, 20], "policies": ["exact", "saturate", "sorted"]},
        "output_dir": dir.join("out")
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(profile::CSV_HEADER));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn train_then_eval_matches_train_log() {
    let tmp = tempfile::tempdir().unwrap();
    // MLP-2's hidden layer is the prunable one
    let cfg = write_config(tmp.path(), serde_json::json!({"preset": "mlp2"}));
    common::run_cli(&["pqs", "--config", &cfg, "train"]).unwrap();
    let out = tmp.path().join("out");
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["epochs"].as_array().unwrap().len(), 3);
    let trained = log["final_eval"]["accuracy"].as_f64().unwrap();
    assert!(trained > 0.5, "fixture should be learnable, got {trained}");

    let stdout = common::run_cli(&["pqs", "--config", &cfg, "eval"]).unwrap();
    assert!(stdout.starts_with("accuracy"));
    let run_id = log["run_id"].as_str().unwrap();
    let p = log["final_eval"]["p"].as_u64().unwrap() as u32;
    let policy: Policy = log["final_eval"]["policy"].as_str().unwrap().parse().unwrap();
    let rows = csv_rows(&out.join(profile::report_file_name(run_id, policy, p)));
    assert_eq!(rows.len(), 1);
    let evaluated: f64 = rows[0][6].parse().unwrap();
    assert!((evaluated - trained).abs() < 1e-6, "{evaluated} vs {trained}");
    // half of every group of 16 was pruned during the float phase
    let sparsity: f64 = rows[0][1].parse().unwrap();
    assert!((sparsity - 0.5).abs() < 1e-9);
}

#[test]
fn profile_writes_one_csv_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), serde_json::json!({}));
    common::run_cli(&["pqs", "--config", &cfg, "train"]).unwrap();
    common::run_cli(&["pqs", "--config", &cfg, "profile"]).unwrap();
    let out = tmp.path().join("out");
    let csvs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 9);
    let jsonl = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_profile.jsonl"))
        .unwrap();
    let records = profile::read_jsonl(&std::fs::read_to_string(jsonl).unwrap()).unwrap();
    assert_eq!(records.len(), 9);
    for p in [12, 16, 20] {
        let at = |policy: Policy| records.iter().find(|r| r.p == p && r.policy == policy).unwrap();
        // the logging register never changes a result; sorting recovers every non-persistent dot
        let (exact, sorted) = (at(Policy::Exact), at(Policy::Sorted));
        assert_eq!(exact.report.total.persistent, sorted.report.total.persistent);
        assert_eq!(exact.report.total.transient, sorted.report.total.transient);
        if exact.report.total.persistent == 0 {
            assert_eq!(exact.accuracy, sorted.accuracy);
        }
    }
}

#[test]
fn sweep_frontier_is_a_pareto_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = serde_json::json!({"sweep": {"bits": [[8, 8], [4, 4]], "sparsities": [0.0, 0.5]}});
    let cfg = write_config(tmp.path(), sweep);
    let stdout = common::run_cli(&["pqs", "--config", &cfg, "sweep"]).unwrap();
    assert!(stdout.contains("36 records"), "{stdout}");
    let out = tmp.path().join("out");
    let records = profile::read_jsonl(&std::fs::read_to_string(out.join("sweep.jsonl")).unwrap()).unwrap();
    assert_eq!(records.len(), 36);
    assert_eq!(std::fs::read_dir(out.join("models")).unwrap().count(), 4);
    let frontier = csv_rows(&out.join("frontier.csv"));
    assert!(!frontier.is_empty());
    let key = |r: &SweepRecord| (r.run_id.clone(), r.p, r.policy.to_string());
    let mut best = f64::NEG_INFINITY;
    let mut last_p = 0;
    for row in &frontier {
        let (run, p, policy, acc) = (&row[0], row[4].parse::<u32>().unwrap(), &row[5], row[6].parse::<f64>().unwrap());
        assert!(records.iter().any(|r| key(r) == (run.clone(), p, policy.clone())), "{row:?} not in sweep");
        assert!(p >= last_p && acc > best, "frontier must be strictly improving in accuracy as p grows");
        // nothing in the sweep with p at most this width is more accurate
        assert!(records.iter().filter(|r| r.p <= p).all(|r| r.accuracy <= acc + 5e-7));
        best = acc;
        last_p = p;
    }
    // a second run reuses every cached model and reproduces the records
    common::run_cli(&["pqs", "--config", &cfg, "sweep"]).unwrap();
    let again = profile::read_jsonl(&std::fs::read_to_string(out.join("sweep.jsonl")).unwrap()).unwrap();
    assert_eq!(records, again);
}

#[test]
fn container_round_trip_preserves_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), serde_json::json!({}));
    common::run_cli(&["pqs", "--config", &cfg_path, "train"]).unwrap();
    let cfg = RunConfig::load(Path::new(&cfg_path)).unwrap();
    let (model, provenance) = container::load(&cfg.model_path()).unwrap();
    assert_eq!(provenance["run_id"].as_str().unwrap(), cfg.job().run_id());
    let bytes = std::fs::read(cfg.model_path()).unwrap();
    let resaved = tmp.path().join("again.pqsm");
    container::save(&resaved, &model, &provenance).unwrap();
    assert_eq!(bytes, std::fs::read(&resaved).unwrap());

    let test = idx::load_mnist(&cfg.data_dir, idx::Split::Test).unwrap();
    let accum = AccumConfig::new(14, Policy::Saturate).unwrap();
    let (reloaded, _) = container::decode(&bytes).unwrap();
    assert_eq!(nn::evaluate(&model, &test, Some(accum)).unwrap(), nn::evaluate(&reloaded, &test, Some(accum)).unwrap());
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), serde_json::json!({"data_dir": tmp.path().join("missing")}));
    let err = common::run_cli(&["pqs", "--config", &cfg, "train"]).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"preset\": \"mlp9\"}").unwrap();
    let err = common::run_cli(&["pqs", "--config", bad.to_str().unwrap(), "train"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = common::run_cli(&["pqs", "dot", "--w", "9", "--x", "1", "--b", "4", "--p", "8"]).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}
