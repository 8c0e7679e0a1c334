use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ethicrowd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ethicrowd"))
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .env_remove("ETHICROWD_CORPUS")
        .env_remove("ETHICROWD_VOTE_LOG")
        .env_remove("ETHICROWD_DATA_DIR")
        .env_remove("ETHICROWD_EXPORT_SALT")
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap()
}

/// Writes small deterministic embeddings for every prompt in the data dir.
fn write_embeddings(dir: &Path) -> std::path::PathBuf {
    let corpus = fs::read_to_string(dir.join("corpus.jsonl")).unwrap();
    let path = dir.join("emb.jsonl");
    let mut f = fs::File::create(&path).unwrap();
    for (i, line) in corpus.lines().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        let Some(id) = v["prompt_id"].as_str() else {
            continue;
        };
        let text: Vec<f64> = (0..4)
            .map(|k| (((i * 7 + k * 13) % 17) as f64) / 17.0 - 0.5)
            .collect();
        let image: Vec<f64> = (0..2)
            .map(|k| (((i * 5 + k * 3) % 11) as f64) / 11.0 - 0.5)
            .collect();
        writeln!(
            f,
            "{}",
            serde_json::json!({"prompt_id": id, "text": text, "image": image})
        )
        .unwrap();
    }
    path
}

fn replay_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    let v = ok_json(&ethicrowd(dir.path(), &["simulate", "--replay-fixture"]));
    assert_eq!(v["labels"]["total"], 789);
    assert_eq!(v["evaluated_after_first_phase"], 1108);
    dir
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = ethicrowd(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = TempDir::new().unwrap();
    let out = ethicrowd(
        dir.path(),
        &["gold", "missing", "--label", "ethical", "--phase", "pre"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["code"], "UnknownPrompt");
}

#[test]
fn ingest_filters_non_latin_and_registers_gold() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.jsonl");
    fs::write(
        &input,
        concat!(
            "{\"prompt_id\":\"a\",\"image_ref\":\"a.jpg\",\"question\":\"Is it ok?\",\"answer\":\"yes\"}\n",
            "{\"prompt_id\":\"b\",\"image_ref\":\"b.jpg\",\"question\":\"Is it ok?\",\"answer\":\"\u{4e0d}\u{884c}\"}\n",
            "{\"prompt_id\":\"c\",\"image_ref\":\"c.jpg\",\"question\":\"Why?\",\"answer\":\"because\"}\n",
        ),
    )
    .unwrap();
    let v = ok_json(&ethicrowd(dir.path(), &["ingest", input.to_str().unwrap()]));
    assert_eq!(v["total_ingested"], 3);
    assert_eq!(v["rejected_non_latin"], 1);
    assert_eq!(v["retained"], 2);
    let v = ok_json(&ethicrowd(
        dir.path(),
        &["gold", "c", "--label", "unclear", "--phase", "post"],
    ));
    assert_eq!(v["gold_post"], 1);
    // Re-ingesting the same file changes nothing.
    let v = ok_json(&ethicrowd(dir.path(), &["ingest", input.to_str().unwrap()]));
    assert_eq!(v["retained"], 2);
}

#[test]
fn replay_fixture_stats_and_export() {
    let dir = replay_dir();
    let out = ethicrowd(dir.path(), &["stats"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.contains("369"), "{csv}");
    assert!(csv.contains("386"));

    let stats = ok_json(&ethicrowd(dir.path(), &["stats", "--format", "json"]));
    assert_eq!(stats["labels"]["total"], 789);

    let export_dir = dir.path().join("export");
    let v = ok_json(&ethicrowd(
        dir.path(),
        &[
            "export",
            "--out",
            export_dir.to_str().unwrap(),
            "--salt",
            "00ff",
        ],
    ));
    assert_eq!(v["records"], 789);
    let records = fs::read_to_string(export_dir.join("records.jsonl")).unwrap();
    assert!(!records.contains("sim-"));
    assert!(export_dir.join("manifest.json").exists());

    let out = ethicrowd(
        dir.path(),
        &[
            "export",
            "--out",
            export_dir.to_str().unwrap(),
            "--salt",
            "",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["code"], "EmptySalt");
}

#[test]
fn train_is_reproducible_for_a_seed() {
    let dir = replay_dir();
    let emb = write_embeddings(dir.path());
    let emb = emb.to_str().unwrap();
    let run = |name: &str, seed: &str| {
        let model = dir.path().join(name);
        let v = ok_json(&ethicrowd(
            dir.path(),
            &[
                "train",
                "--embeddings",
                emb,
                "--out",
                model.to_str().unwrap(),
                "--seed",
                seed,
                "--epochs",
                "3",
                "--hidden",
                "8,6,4",
            ],
        ));
        (v, fs::read(model).unwrap())
    };
    let (a, bytes_a) = run("a.bin", "7");
    let (b, bytes_b) = run("b.bin", "7");
    let (c, _) = run("c.bin", "8");
    assert_eq!(a["digest"], b["digest"]);
    assert_eq!(bytes_a, bytes_b);
    assert_ne!(a["digest"], c["digest"]);
    assert_eq!(
        a["metrics"]["train_size"].as_u64().unwrap() + a["metrics"]["test_size"].as_u64().unwrap(),
        789
    );

    let model = dir.path().join("a.bin");
    let e = ok_json(&ethicrowd(
        dir.path(),
        &[
            "evaluate",
            "--model",
            model.to_str().unwrap(),
            "--embeddings",
            emb,
        ],
    ));
    assert_eq!(e["total"], 789);
}

#[test]
fn trust_report_lists_every_annotator() {
    let dir = replay_dir();
    let out = ethicrowd(dir.path(), &["trust"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.lines().count() > 40, "{csv}");
}

#[test]
fn score_histogram_reads_precomputed_scores() {
    let dir = replay_dir();
    let corpus = fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let mut scores = String::from("# prompt_id,score\n");
    for (i, line) in corpus.lines().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        if let Some(id) = v["prompt_id"].as_str() {
            scores.push_str(&format!("{id},{}\n", (i % 10) as f64 / 10.0));
        }
    }
    let path = dir.path().join("scores.csv");
    fs::write(&path, scores).unwrap();
    let v = ok_json(&ethicrowd(
        dir.path(),
        &["score-histogram", "--scores", path.to_str().unwrap()],
    ));
    assert_eq!(v["scored"], 789);
    assert_eq!(v["histogram"].as_array().unwrap().len(), 20);
}
