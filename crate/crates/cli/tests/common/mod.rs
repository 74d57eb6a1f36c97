//! Shared scaffolding for CLI tests: a temp workspace with synthetic data,
//! embedding table, docs, exemplars and config files, plus a binary runner.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use veridex_core::embedding::write_embedding_table;
use veridex_core::synthetic::two_gaussian_claims;

pub struct TestEnv {
    pub dir: tempfile::TempDir,
    /// Config with the file-lookup embedder, for train/eval/ablate/sweep.
    pub pipeline_config: PathBuf,
    /// Config with the hash embedder, for ingest/debunk.
    pub debunk_config: PathBuf,
    /// Text of one bundled claim, also present verbatim as a document.
    pub echo_claim: String,
}

impl TestEnv {
    // not every test target uses every helper
    #[allow(dead_code)]
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// 60 separable claims at d=8 plus docs, exemplars and two configs.
pub fn setup() -> TestEnv {
    setup_sized(60, 8, 12)
}

pub fn setup_sized(count: usize, d: usize, epochs: usize) -> TestEnv {
    let dir = tempfile::tempdir().expect("tempdir");
    let base = dir.path();

    let claims = two_gaussian_claims(count, d, 2.0, 0.3, 20240801);
    let echo_claim = claims[1].record.text.clone();

    let mut dataset = std::fs::File::create(base.join("claims.jsonl")).unwrap();
    for claim in &claims {
        writeln!(dataset, "{}", serde_json::to_string(&claim.record).unwrap()).unwrap();
    }
    let entries: Vec<(String, Vec<f64>)> = claims
        .iter()
        .map(|c| (c.record.id.clone(), c.vector.clone()))
        .collect();
    write_embedding_table(base.join("embeddings.jsonl"), d, &entries).unwrap();

    // two documents of exactly 150 codepoints plus the echo document
    let mut docs = std::fs::File::create(base.join("docs.jsonl")).unwrap();
    for (i, ch) in [(0, 'a'), (1, '言')] {
        let text: String = std::iter::repeat(ch).take(150).collect();
        writeln!(
            docs,
            "{}",
            serde_json::json!({"source_id": format!("doc-{i}"), "text": text})
        )
        .unwrap();
    }
    writeln!(
        docs,
        "{}",
        serde_json::json!({"source_id": "echo", "text": echo_claim})
    )
    .unwrap();

    let mut exemplars = std::fs::File::create(base.join("exemplars.jsonl")).unwrap();
    for (claim, verdict, why) in [
        ("Microwaves destroy nutrients.", "rumor", "Nutrient loss matches other cooking."),
        ("Boiling removes chlorine.", "non-rumor", "Free chlorine does boil off."),
        ("Vaccines carry microchips.", "rumor", "No injectable chip that small exists."),
    ] {
        writeln!(
            exemplars,
            "{}",
            serde_json::json!({"claim": claim, "verdict": verdict, "explanation": why})
        )
        .unwrap();
    }

    let train = serde_json::json!({
        "learning_rate": 0.02,
        "batch_size": 16,
        "epochs": epochs,
        "seed": 7,
        "d": d,
        "experts": 2,
        "top_k": 1,
        "citizens": 2,
        "classes": 2,
        "lstm_hidden": d / 2,
    });
    let pipeline = serde_json::json!({
        "dataset_path": "claims.jsonl",
        "store_path": "store.bin",
        "model_path": "model.bin",
        "reports_dir": ".",
        "embedder": {"backend": "file-lookup", "d": d, "source": "embeddings.jsonl"},
        "train": train,
        "train_fraction": 0.8,
    });
    let pipeline_config = base.join("pipeline.json");
    std::fs::write(&pipeline_config, serde_json::to_string_pretty(&pipeline).unwrap()).unwrap();

    let debunk = serde_json::json!({
        "docs_path": "docs.jsonl",
        "store_path": "store.bin",
        "model_path": "model.bin",
        "reports_dir": ".",
        "embedder": {"backend": "deterministic-hash", "d": d},
        "train": train,
        "retrieval_top_n": 1,
        "prompt_mode": "cot",
        "rag": true,
        "backend": {"kind": "mock", "responses_path": "mock_responses.jsonl"},
        "exemplars_path": "exemplars.jsonl",
        "exemplar_k": 2,
    });
    let debunk_config = base.join("debunk.json");
    std::fs::write(&debunk_config, serde_json::to_string_pretty(&debunk).unwrap()).unwrap();
    // empty canned-response file: registered responses are appended per test
    std::fs::write(base.join("mock_responses.jsonl"), b"").unwrap();

    TestEnv {
        dir,
        pipeline_config,
        debunk_config,
        echo_claim,
    }
}

pub fn veridex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veridex"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run veridex")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout_of(out),
        stderr_of(out)
    );
}
