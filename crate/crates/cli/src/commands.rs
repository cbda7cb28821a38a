use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::{TimeZone, Utc};
use memeguard_core::dataset::{
    compute_split_stats, load_dataset, published_stats, read_records_jsonl, DatasetManifest,
    MemeInput, MemeRecord,
};
use memeguard_core::encoding::{TextEncoder, VisionLanguageEncoder};
use memeguard_core::evaluation::{aggregate_seeds, evaluate_model, render_table, SeedResult};
use memeguard_core::explainer::{explain as explain_interpretation, render_report, ExplainOptions};
use memeguard_core::human_eval::{
    build_study, control_check, export_sheet, read_sheet, render_summary, summarize,
    StudyCandidate, StudyItem,
};
use memeguard_core::interpret::{
    DecodingConfig, HttpBackend, Interpretation, InterpretationCache, InterpretationQuality,
    Interpreter, LmmBackend, MockBackend, PromptBundle,
};
use memeguard_core::jsonl;
use memeguard_core::model::Checkpoint;
use memeguard_core::pipeline::Pipeline;
use memeguard_core::synthetic::{signal_corpus, write_fixture, FixtureSpec, Signal};
use memeguard_core::training::{seed_sweep, TrainConfig, TrainReport, TrainingData};
use memeguard_service::{
    AppState, Durability, EventStore, ModerationService, ServiceConfig, SystemClock,
};
use serde::{Deserialize, Serialize};

use crate::{
    BackendArgs, BackendKind, InterpretArgs, OrderingArg, ServeArgs, SignalArg, StudyCommand,
    SynthCommand,
};

fn read_records(path: &Path) -> Result<Vec<MemeRecord>> {
    read_records_jsonl(path).with_context(|| format!("reading records {}", path.display()))
}

fn read_interpretations(path: &Path) -> Result<Vec<Interpretation>> {
    jsonl::read(path).with_context(|| format!("reading interpretations {}", path.display()))
}

fn text_by_meme(interpretations: &[Interpretation]) -> HashMap<String, String> {
    interpretations
        .iter()
        .map(|i| (i.meme_id.clone(), i.text.clone()))
        .collect()
}

/// The single backend name shared by every interpretation, or "mixed".
fn backend_of(interpretations: &[Interpretation]) -> String {
    let mut names = interpretations.iter().map(|i| i.backend_name.as_str());
    match names.next() {
        Some(first) if names.all(|n| n == first) => first.to_string(),
        Some(_) => "mixed".into(),
        None => "none".into(),
    }
}

fn make_backend(args: &BackendArgs) -> Result<Arc<dyn LmmBackend>> {
    Ok(match args.backend {
        BackendKind::Mock => {
            let name = args.backend_name.clone().unwrap_or_else(|| "mock".into());
            Arc::new(MockBackend::new(name, !args.no_system))
        }
        BackendKind::Http => {
            let endpoint = args
                .endpoint
                .clone()
                .context("--endpoint is required for the http backend")?;
            let name = args.backend_name.clone().unwrap_or_else(|| "http".into());
            Arc::new(HttpBackend::new(
                name,
                endpoint,
                !args.no_system,
                Duration::from_secs(args.timeout_secs),
            )?)
        }
    })
}

pub fn ingest(manifests: &[PathBuf], out: &Path, stats: bool) -> Result<()> {
    let mut records = Vec::new();
    let mut rejected = 0;
    for path in manifests {
        let manifest = DatasetManifest::from_toml_file(path)?;
        let outcome =
            load_dataset(&manifest).with_context(|| format!("loading {}", path.display()))?;
        rejected += outcome.errors.len();
        records.extend(outcome.records);
    }
    jsonl::write(out, &records)?;
    log::info!(
        "wrote {} records to {} ({} rejected)",
        records.len(),
        out.display(),
        rejected
    );
    if stats {
        println!(
            "{:<10} {:<6} {:>8} {:>12} {:>8}  published",
            "dataset", "split", "hateful", "non-hateful", "total"
        );
        for s in compute_split_stats(&records) {
            let published = match published_stats(s.dataset, s.split) {
                Some(p) if p == s => "match".to_string(),
                Some(p) => format!("differs ({}/{})", p.n_hateful, p.n_non_hateful),
                None => "-".to_string(),
            };
            println!(
                "{:<10} {:<6} {:>8} {:>12} {:>8}  {}",
                s.dataset.to_string(),
                s.split.to_string(),
                s.n_hateful,
                s.n_non_hateful,
                s.total(),
                published
            );
        }
    }
    Ok(())
}

pub fn interpret(args: InterpretArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let backend = make_backend(&args.backend)?;
    let cache = InterpretationCache::open(&args.cache, backend.name())?;
    let bundle = PromptBundle::default();
    let interpreter =
        Interpreter::new(backend.as_ref(), &bundle, DecodingConfig::default()).with_cache(&cache);
    let memes: Vec<MemeInput> = records.iter().map(MemeInput::from).collect();
    let mut done = Vec::with_capacity(memes.len());
    let mut failed = 0;
    for (meme, result) in memes
        .iter()
        .zip(interpreter.generate_all(&memes, args.in_flight))
    {
        match result {
            Ok(i) => done.push(i),
            Err(e) => {
                failed += 1;
                log::error!("{}: {e}", meme.id);
            }
        }
    }
    jsonl::write(&args.out, &done)?;
    let count = |q| done.iter().filter(|i| i.quality == q).count();
    let truncated = count(InterpretationQuality::Truncated);
    let empty = count(InterpretationQuality::Empty);
    log::info!(
        "wrote {} interpretations ({truncated} truncated, {empty} empty, {failed} failed)",
        done.len()
    );
    if failed > 0 {
        bail!("{failed} meme(s) could not be interpreted; rerun to retry them");
    }
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingIndex {
    /// Columns `[0, vla_dim)` hold the meme embedding, the rest the
    /// interpretation embedding.
    vla_dim: usize,
    mie_dim: usize,
    rows: BTreeMap<String, usize>,
}

pub fn encode(
    records: &Path,
    interpretations: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let records = read_records(records)?;
    let texts = text_by_meme(&read_interpretations(interpretations)?);
    let (vla, mie) = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            (ckpt.model.vla, ckpt.model.mie)
        }
        None => {
            let (v, m) = TrainConfig::default().encoder_configs(0)?;
            (VisionLanguageEncoder::new(v)?, TextEncoder::new(m)?)
        }
    };
    use rayon::prelude::*;
    let rows = records
        .par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let text = texts
                .get(&r.id)
                .with_context(|| format!("no interpretation for {}", r.id))?;
            let bytes = fs::read(&r.image_ref)
                .with_context(|| format!("reading {}", r.image_ref.display()))?;
            let mut row = vla.encode(&r.id, &bytes, &r.overlay_text)?.vector;
            row.extend(mie.encode(&r.id, text)?.vector);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let (vla_dim, mie_dim) = (vla.hidden_dim(), mie.hidden_dim());
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut writer = {
        use npyz::WriterBuilder;
        npyz::WriteOptions::<f64>::new()
            .default_dtype()
            .shape(&[rows.len() as u64, (vla_dim + mie_dim) as u64])
            .writer(std::io::BufWriter::new(file))
            .begin_nd()?
    };
    writer.extend(rows.iter().flatten().copied())?;
    writer.finish()?;
    let index = EmbeddingIndex {
        vla_dim,
        mie_dim,
        rows: records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect(),
    };
    let index_path = out.with_extension("index.json");
    fs::write(&index_path, serde_json::to_vec_pretty(&index)?)?;
    log::info!(
        "wrote {}x{} embeddings to {}",
        rows.len(),
        vla_dim + mie_dim,
        out.display()
    );
    Ok(())
}

/// Written next to the seed directories so `eval` can label the run.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    backend_name: String,
    config: TrainConfig,
    reports: Vec<TrainReport>,
}

pub fn train(
    config: Option<&Path>,
    records: &Path,
    interpretations: &Path,
    out: &Path,
) -> Result<()> {
    let config: TrainConfig = match config {
        Some(path) => toml::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    let records = read_records(records)?;
    let interps = read_interpretations(interpretations)?;
    let texts = text_by_meme(&interps);
    fs::create_dir_all(out)?;
    let data = TrainingData {
        records: &records,
        interpretations: &texts,
    };
    let runs = seed_sweep(&data, &config, Some(out))?;
    for run in &runs {
        let best = run.report.best().map_or(f64::NAN, |m| m.selection);
        log::info!(
            "seed {}: best epoch {} (selection {best:.4}), {} epochs run",
            run.report.seed,
            run.report.best_epoch,
            run.report.epochs.len()
        );
    }
    let info = RunInfo {
        backend_name: backend_of(&interps),
        config,
        reports: runs.into_iter().map(|r| r.report).collect(),
    };
    fs::write(out.join("run.json"), serde_json::to_vec_pretty(&info)?)?;
    Ok(())
}

fn seed_dirs(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(run_dir).with_context(|| format!("listing {}", run_dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
            let ckpt = entry.path().join("best.ckpt");
            if ckpt.exists() {
                out.push((seed, ckpt));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn eval(
    run_dirs: &[PathBuf],
    records: &Path,
    interpretations: &Path,
    json: Option<&Path>,
) -> Result<()> {
    let records = read_records(records)?;
    let interps = read_interpretations(interpretations)?;
    let texts = text_by_meme(&interps);
    let mut summaries = Vec::new();
    for run_dir in run_dirs {
        let info: Option<RunInfo> = fs::read(run_dir.join("run.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let mut per_seed = Vec::new();
        let mut mode = None;
        for (seed, ckpt) in seed_dirs(run_dir)? {
            let ckpt = Checkpoint::load(&ckpt)?;
            mode = Some(ckpt.model.mode);
            let (auroc, accuracy) = evaluate_model(&ckpt.model, &records, &texts)?;
            per_seed.push(SeedResult {
                seed,
                auroc,
                accuracy,
            });
        }
        let Some(mode) = mode else {
            bail!("no seed checkpoints under {}", run_dir.display());
        };
        let backend = info.map_or_else(|| backend_of(&interps), |i| i.backend_name);
        let dataset = records.first().map(|r| r.dataset);
        summaries.push(aggregate_seeds(
            dataset,
            format!("{mode}/{backend}"),
            per_seed,
        )?);
    }
    print!("{}", render_table(&summaries));
    let path = json.map_or_else(|| run_dirs[0].join("results.json"), Path::to_path_buf);
    fs::write(&path, serde_json::to_vec_pretty(&summaries)?)?;
    log::info!("results written to {}", path.display());
    Ok(())
}

pub fn explain(
    checkpoint: &Path,
    meme_id: &str,
    interpretations: &Path,
    records: &Path,
    out: &Path,
    options: &ExplainOptions,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model;
    let record = read_records(records)?
        .into_iter()
        .find(|r| r.id == meme_id)
        .with_context(|| format!("meme {meme_id} not in records"))?;
    let interpretation = read_interpretations(interpretations)?
        .into_iter()
        .find(|i| i.meme_id == meme_id)
        .with_context(|| format!("no interpretation for meme {meme_id}"))?;
    let meme = MemeInput::from(&record);
    let sample = model.prepare(&meme, Some(&interpretation.text))?;
    let predict = model.text_predictor(&sample.image, &meme.overlay_text);
    let report = explain_interpretation(&predict, &interpretation, options)?;
    let rendered = render_report(&report);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out.with_extension("json"), rendered.json)?;
    fs::write(out.with_extension("html"), rendered.html)?;
    println!(
        "base prediction {:.4}, surrogate R² {:.3}",
        report.base_prediction, report.fidelity_r2
    );
    for w in report.token_weights.iter().take(5) {
        println!("{:>+9.4}  {}", w.weight, w.word);
    }
    Ok(())
}

pub fn study(cmd: StudyCommand) -> Result<()> {
    match cmd {
        StudyCommand::Build {
            records,
            interpretations,
            items,
            controls,
            seed,
            annotators,
            out,
        } => {
            let datasets: HashMap<String, _> = read_records(&records)?
                .into_iter()
                .map(|r| (r.id, r.dataset))
                .collect();
            let pool: Vec<StudyCandidate> = read_interpretations(&interpretations)?
                .into_iter()
                .filter_map(|i| {
                    datasets.get(&i.meme_id).map(|&dataset| StudyCandidate {
                        meme_id: i.meme_id,
                        dataset,
                        interpretation_text: i.text,
                    })
                })
                .collect();
            let study = build_study(&pool, items, controls, seed)?;
            fs::create_dir_all(&out)?;
            jsonl::write(&out.join("items.jsonl"), &study)?;
            for annotator in &annotators {
                let path = out.join(format!("sheet-{annotator}.csv"));
                export_sheet(fs::File::create(&path)?, annotator, &study)?;
            }
            log::info!(
                "{} items ({} controls), {} sheets in {}",
                study.len(),
                controls,
                annotators.len(),
                out.display()
            );
            Ok(())
        }
        StudyCommand::Summarize {
            items,
            sheets,
            control_threshold,
            json,
        } => {
            let items: Vec<StudyItem> = jsonl::read(&items)?;
            let mut scores = Vec::new();
            for sheet in &sheets {
                let file = fs::File::open(sheet)
                    .with_context(|| format!("opening {}", sheet.display()))?;
                scores.extend(
                    read_sheet(file).with_context(|| format!("reading {}", sheet.display()))?,
                );
            }
            let checks = control_check(&scores, &items, control_threshold);
            let summary = summarize(&scores, &items)?;
            print!("{}", render_summary(&summary));
            println!();
            for c in &checks {
                let mean = c
                    .mean_control_accuracy
                    .map_or("-".into(), |m| format!("{m:.2}"));
                let verdict = if c.passed { "pass" } else { "FAIL" };
                println!(
                    "control check {}: {verdict} (mean {mean} over {} controls)",
                    c.annotator_id, c.n_controls_scored
                );
            }
            if let Some(path) = json {
                let record = serde_json::json!({ "summary": summary, "control_checks": checks });
                fs::write(&path, serde_json::to_vec_pretty(&record)?)?;
            }
            Ok(())
        }
    }
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let model = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?
        .model;
    let backend = make_backend(&args.backend)?;
    let cache = InterpretationCache::open(&args.cache, backend.name())?;
    let explain = ExplainOptions {
        n_samples: args.explain_samples,
        ..ExplainOptions::default()
    };
    let pipeline = Arc::new(
        Pipeline::new(backend, model)
            .with_cache(cache)
            .with_explain_options(explain),
    );
    let store = EventStore::open(&args.log, Durability::Sync)?;
    let config = ServiceConfig {
        lease: chrono::Duration::minutes(args.lease_minutes),
        ordering: match args.ordering {
            OrderingArg::Fifo => memeguard_service::Ordering::Fifo,
            OrderingArg::Priority => memeguard_service::Ordering::Priority,
        },
    };
    let service = ModerationService::new(store, pipeline, Arc::new(SystemClock), config);
    let blob_dir = args.blobs.unwrap_or_else(|| args.log.join("blobs"));
    fs::create_dir_all(&blob_dir)?;
    let state = AppState {
        service: Arc::new(service),
        blob_dir,
    };
    let addr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("invalid --host/--port")?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .max_blocking_threads(args.workers.max(1))
        .build()?;
    runtime.block_on(memeguard_service::serve(
        addr,
        state,
        Duration::from_secs(args.retry_secs.max(1)),
    ))?;
    Ok(())
}

pub fn synth(cmd: SynthCommand) -> Result<()> {
    match cmd {
        SynthCommand::Corpus {
            signal,
            n_train,
            n_test,
            seed,
            out,
        } => {
            let signal = match signal {
                SignalArg::Interpretation => Signal::Interpretation,
                SignalArg::Image => Signal::Image,
            };
            let corpus = signal_corpus(&out, signal, n_train, n_test, seed)?;
            jsonl::write(&out.join("train.jsonl"), &corpus.train)?;
            jsonl::write(&out.join("test.jsonl"), &corpus.test)?;
            let epoch = Utc.timestamp_opt(0, 0).single().expect("valid timestamp");
            let mut interps: Vec<Interpretation> = corpus
                .interpretations
                .into_iter()
                .map(|(meme_id, text)| Interpretation {
                    meme_id,
                    caption: String::new(),
                    text,
                    backend_name: "synthetic".into(),
                    prompt_hash: "synthetic".into(),
                    quality: InterpretationQuality::Complete,
                    created_at: epoch,
                })
                .collect();
            interps.sort_by(|a, b| a.meme_id.cmp(&b.meme_id));
            jsonl::write(&out.join("interpretations.jsonl"), &interps)?;
            log::info!(
                "wrote {n_train} train and {n_test} test memes to {}",
                out.display()
            );
            Ok(())
        }
        SynthCommand::Fixture {
            records,
            hateful,
            missing,
            seed,
            out,
        } => {
            if hateful > records || missing > records {
                bail!("--hateful and --missing must not exceed --records");
            }
            let spec = FixtureSpec {
                n_records: records,
                n_hateful: hateful,
                n_missing_images: missing,
                seed,
            };
            let fixture = write_fixture(&out, &spec)?;
            println!("{}", serde_json::to_string_pretty(&fixture.counts)?);
            Ok(())
        }
    }
}
