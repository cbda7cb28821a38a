use std::path::Path;
use std::process::Command;

fn memeguard(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_memeguard"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn ingest_reports_fixture_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic-10/manifest.toml");
    let out = dir.path().join("records.jsonl");
    let stdout = memeguard(&["ingest", "--manifest", p(&manifest), "--out", p(&out), "--stats"]);
    let row = stdout.lines().find(|l| l.starts_with("SYNTHETIC")).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(&cols[..5], ["SYNTHETIC", "train", "6", "3", "9"]);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 9);
}

#[test]
fn train_eval_explain_encode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    memeguard(&["synth", "corpus", "--signal", "interpretation", "--n-train", "200", "--n-test", "40", "--out", p(&corpus)]);
    let config = d.join("train.toml");
    std::fs::write(&config, "learning_rate = 0.01\nbatch_size = 16\nseeds = [0, 1]\nablation_mode = \"BOTH\"\n").unwrap();
    let (train, test, interps) = (corpus.join("train.jsonl"), corpus.join("test.jsonl"), corpus.join("interpretations.jsonl"));
    let run = d.join("run");
    memeguard(&["train", "--config", p(&config), "--records", p(&train), "--interpretations", p(&interps), "--out", p(&run)]);
    for seed in ["seed-0", "seed-1"] {
        assert!(run.join(seed).join("best.ckpt").exists());
        assert!(run.join(seed).join("report.json").exists());
    }

    let table = memeguard(&["eval", "--run_dir", p(&run), "--records", p(&test), "--interpretations", p(&interps)]);
    assert!(table.contains("BOTH/synthetic"), "{table}");
    assert!(table.contains('±'));
    let results: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("results.json")).unwrap()).unwrap();
    assert_eq!(results[0]["per_seed"].as_array().unwrap().len(), 2);
    assert!(results[0]["acc_mean"].as_f64().unwrap() > 0.8);

    let report = d.join("explain/test-00000");
    let ckpt = run.join("seed-0/best.ckpt");
    memeguard(&[
        "explain", "--checkpoint", p(&ckpt), "--meme", "test-00000", "--interpretations", p(&interps), "--records", p(&test),
        "--out", p(&report), "--samples", "200",
    ]);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(report.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["meme_id"], "test-00000");
    let html = std::fs::read_to_string(report.with_extension("html")).unwrap();
    assert!(html.contains("application/json") && html.contains("<span"));

    let npy = d.join("emb.npy");
    memeguard(&["encode", "--records", p(&test), "--interpretations", p(&interps), "--out", p(&npy), "--checkpoint", p(&ckpt)]);
    let bytes = std::fs::read(&npy).unwrap();
    assert_eq!(&bytes[..6], b"\x93NUMPY");
    let index: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("emb.index.json")).unwrap()).unwrap();
    assert_eq!(index["rows"]["test-00039"], 39);
    let width = index["vla_dim"].as_u64().unwrap() + index["mie_dim"].as_u64().unwrap();
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    assert_eq!(bytes.len(), 10 + header_len + 40 * width as usize * 8);
}

#[test]
fn study_build_and_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    memeguard(&["synth", "corpus", "--signal", "image", "--n-train", "30", "--n-test", "0", "--out", p(&corpus)]);
    let study = d.join("study");
    memeguard(&[
        "study", "build", "--records", p(&corpus.join("train.jsonl")), "--interpretations", p(&corpus.join("interpretations.jsonl")),
        "--items", "10", "--controls", "2", "--annotators", "ann1,ann2", "--out", p(&study),
    ]);
    let items: Vec<serde_json::Value> = std::fs::read_to_string(study.join("items.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(items.len(), 12);

    // Fill both sheets: 4 everywhere, controls rated 1 on accuracy.
    for ann in ["ann1", "ann2"] {
        let path = study.join(format!("sheet-{ann}.csv"));
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let header = reader.headers().unwrap().clone();
        let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
        let mut writer = csv::Writer::from_path(&path).unwrap();
        writer.write_record(&header).unwrap();
        for record in rows {
            let control = items.iter().any(|i| i["item_id"] == record[0] && i["is_control"] == true);
            let row: Vec<&str> = header
                .iter()
                .zip(record.iter())
                .map(|(col, value)| match col {
                    "clarity" | "cultural_relevance" | "helpfulness" | "recognition" => "4",
                    "accuracy" if control => "1",
                    "accuracy" => "4",
                    _ => value,
                })
                .collect();
            writer.write_record(row).unwrap();
        }
        writer.flush().unwrap();
    }
    let json = d.join("summary.json");
    let out = memeguard(&[
        "study", "summarize", "--items", p(&study.join("items.jsonl")), "--sheets", p(&study.join("sheet-ann1.csv")),
        p(&study.join("sheet-ann2.csv")), "--json", p(&json),
    ]);
    assert!(out.contains("#. Avg Score >= 4"), "{out}");
    assert!(out.contains("control check ann1: pass"), "{out}");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(summary["summary"]["n_items"], 10);
    assert_eq!(summary["summary"]["dimensions"]["accuracy"]["n_at_least_4"], 10);
}
