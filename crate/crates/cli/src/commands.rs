//! The six pipeline commands. All randomness flows from the config seed and
//! every output is deterministic, so re-running a command on identical
//! inputs reproduces its outputs byte for byte.

use std::path::Path;
use std::time::Duration;

use veridex_core::embedding::{load_dataset, split_dataset, EmbeddedClaim, Embedder};
use veridex_core::error::{Error, Result};
use veridex_core::harness::{ablate, sweep};
use veridex_core::knowledge::{chunk_text, load_documents, KnowledgeChunk, VectorStore};
use veridex_core::persist::{load_model, save_model};
use veridex_core::prompt::{
    build_prompt, load_exemplars, select_exemplars, DebunkResponse, GenerationBackend,
    GenerationRequest, HttpBackend, MockBackend, PromptBundle, PromptMode, TemplateSet,
};
use veridex_core::trainer::{evaluate, train};

use crate::config::PipelineConfig;

fn embedder(cfg: &PipelineConfig) -> Result<Embedder> {
    Embedder::from_config(&cfg.embedder)
}

fn load_embedded_split(cfg: &PipelineConfig) -> Result<(Vec<EmbeddedClaim>, Vec<EmbeddedClaim>)> {
    let records = load_dataset(cfg.dataset_path()?)?;
    let embedded = embedder(cfg)?.embed_all(&records)?;
    split_dataset(embedded, cfg.train_fraction, cfg.train.seed)
}

fn templates(cfg: &PipelineConfig) -> Result<TemplateSet> {
    match &cfg.template_dir {
        Some(dir) => TemplateSet::load(dir),
        None => Ok(TemplateSet::builtin()),
    }
}

/// chunk -> embed -> add -> persist. Prints the chunk count and dimension.
pub fn cmd_ingest(docs_path: &Path, store_path: &Path, cfg: &PipelineConfig) -> Result<()> {
    let docs = load_documents(docs_path)?;
    let embedder = embedder(cfg)?;
    let mut store = VectorStore::new();
    for doc in &docs {
        let spans = chunk_text(&doc.text, cfg.chunk_size)?;
        let mut chunks = Vec::with_capacity(spans.len());
        for (i, text) in spans.into_iter().enumerate() {
            let vector = embedder.embed_text(&text).map_err(|e| {
                Error::data(format!("document \"{}\": {e}", doc.source_id))
            })?;
            chunks.push(KnowledgeChunk {
                chunk_id: format!("{}#{i}", doc.source_id),
                source_id: doc.source_id.clone(),
                text,
                vector,
            });
        }
        store.add_chunks(chunks)?;
    }
    if let Some(parent) = store_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    store.persist(store_path)?;
    println!(
        "ingested {} documents into {} chunks (d={}) at {}",
        docs.len(),
        store.len(),
        store.dimension().unwrap_or(cfg.embedder.d),
        store_path.display()
    );
    Ok(())
}

/// Train on the seeded split and write the model file.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<()> {
    let (train_set, test_set) = load_embedded_split(cfg)?;
    println!(
        "training on {} claims ({} held out), d={}, E={}, n={}, variant={}",
        train_set.len(),
        test_set.len(),
        cfg.train.model.d,
        cfg.train.model.experts,
        cfg.train.model.citizens,
        cfg.train.model.variant.name()
    );
    let outcome = train(&train_set, &cfg.train)?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {epoch:>3}  loss {loss:.6}");
    }
    if let Some(parent) = cfg.model_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_model(&outcome.model, &cfg.model_path)?;
    println!("model written to {}", cfg.model_path.display());
    Ok(())
}

/// Evaluate the saved model on the held-out split; emit the per-domain grid
/// plus CSV and JSON reports.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<()> {
    let (_, test_set) = load_embedded_split(cfg)?;
    let model = load_model(&cfg.model_path)?;
    let report = evaluate(&model, &test_set)?;
    print!("{}", report.render_table());

    std::fs::create_dir_all(&cfg.reports_dir)?;
    let csv_path = cfg.reports_dir.join("eval.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    let json_path = cfg.reports_dir.join("eval.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report.to_json())? .as_bytes())?;
    println!("reports written to {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

/// Train and evaluate all four ablation variants on the identical split.
pub fn cmd_ablate(cfg: &PipelineConfig) -> Result<()> {
    let (train_set, test_set) = load_embedded_split(cfg)?;
    let report = ablate(&cfg.train, &train_set, &test_set)?;
    print!("{}", report.to_csv());
    for (variant, gap) in report.accuracy_gaps() {
        println!("accuracy gap vs full, {}: {gap:+.2}", variant.name());
    }
    std::fs::create_dir_all(&cfg.reports_dir)?;
    let path = cfg.reports_dir.join("ablation.csv");
    std::fs::write(&path, report.to_csv())?;
    println!("report written to {}", path.display());
    Ok(())
}

/// Train one model per (experts, citizens) cell and emit the accuracy grid.
pub fn cmd_sweep(
    cfg: &PipelineConfig,
    expert_counts: &[usize],
    citizen_counts: &[usize],
    threads: usize,
) -> Result<()> {
    let (train_set, test_set) = load_embedded_split(cfg)?;
    let grid = sweep(
        expert_counts,
        citizen_counts,
        &cfg.train,
        &train_set,
        &test_set,
        threads,
    )?;
    print!("{}", grid.to_csv());
    std::fs::create_dir_all(&cfg.reports_dir)?;
    let path = cfg.reports_dir.join("sweep.csv");
    std::fs::write(&path, grid.to_csv())?;
    println!("grid written to {}", path.display());
    Ok(())
}

pub struct DebunkOptions {
    pub mode: PromptMode,
    pub rag: bool,
    pub top_n: usize,
    pub dry_run: bool,
}

fn backend_from_config(cfg: &PipelineConfig) -> Result<Box<dyn GenerationBackend>> {
    match cfg.backend.kind.as_str() {
        "mock" => {
            let backend = match &cfg.backend.responses_path {
                Some(path) => MockBackend::from_file(path)?,
                None => MockBackend::new(),
            };
            Ok(Box::new(backend))
        }
        "http" => Ok(Box::new(HttpBackend::from_env(
            Duration::from_secs(cfg.backend.timeout_secs),
            cfg.backend.max_in_flight,
        )?)),
        other => Err(Error::Config(format!("unknown backend kind \"{other}\""))),
    }
}

/// Embed the claim, classify, retrieve, render, generate, emit JSON.
/// With `dry_run` the rendered prompt is printed instead and nothing is
/// generated. A backend failure still emits the verdict and retrieval,
/// marked failed, before the error propagates.
pub fn cmd_debunk(claim_text: &str, cfg: &PipelineConfig, opts: &DebunkOptions) -> Result<()> {
    if claim_text.is_empty() {
        return Err(Error::Config("claim text is empty".into()));
    }
    let model = load_model(&cfg.model_path)?;
    let store = VectorStore::open(&cfg.store_path)?;
    let embedder = embedder(cfg)?;

    let vector = embedder.embed_text(claim_text)?;
    let verdict = model.forward_full(&vector)?;
    let retrieved = store.search(&vector, opts.top_n)?;

    let exemplars = if opts.mode == PromptMode::FewShot {
        let path = cfg.exemplars_path.as_ref().ok_or_else(|| {
            Error::Config("few-shot mode needs exemplars_path in the config".into())
        })?;
        let pool = load_exemplars(path)?;
        select_exemplars(&pool, cfg.exemplar_k.min(pool.len()).max(1))?
    } else {
        Vec::new()
    };

    let bundle = PromptBundle {
        verdict: verdict.clone(),
        knowledge: retrieved.clone(),
        query: claim_text.to_string(),
        mode: opts.mode,
        rag_enabled: opts.rag,
        exemplars,
    };
    let prompt = build_prompt(&bundle, &templates(cfg)?)?;

    if opts.dry_run {
        print!("{prompt}");
        return Ok(());
    }

    let backend = backend_from_config(cfg)?;
    let mut request = GenerationRequest::new(prompt, cfg.backend.model.clone());
    request.temperature = cfg.backend.temperature;

    let retrieved_json: Vec<serde_json::Value> = retrieved
        .iter()
        .map(|hit| {
            serde_json::json!({
                "chunk_id": hit.chunk.chunk_id,
                "source_id": hit.chunk.source_id,
                "score": hit.score,
                "text": hit.chunk.text,
            })
        })
        .collect();

    match backend.generate(&request) {
        Ok(DebunkResponse {
            explanation,
            model_id,
            ..
        }) => {
            let output = serde_json::json!({
                "verdict": verdict.to_json(),
                "retrieved": retrieved_json,
                "prompt_mode": opts.mode.name(),
                "rag": opts.rag,
                "explanation": explanation,
                "explanation_status": "ok",
                "backend": {"name": backend.name(), "model_id": model_id},
            });
            println!("{}", serde_json::to_string_pretty(&output)?);
            Ok(())
        }
        Err(e) => {
            let output = serde_json::json!({
                "verdict": verdict.to_json(),
                "retrieved": retrieved_json,
                "prompt_mode": opts.mode.name(),
                "rag": opts.rag,
                "explanation": serde_json::Value::Null,
                "explanation_status": "failed",
                "error": e.to_string(),
                "backend": {"name": backend.name()},
            });
            println!("{}", serde_json::to_string_pretty(&output)?);
            Err(e)
        }
    }
}
