//! Subcommand implementations.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use daicl_core::corpus::parse_conll_with_report;
use daicl_core::embed::{build_index, join_tokens, EmbedderSpec, Metric, NgramEmbedder, Vocabulary};
use daicl_core::eval::{execute_matrix, gen_synthetic_shift, RunMatrix, SyntheticShiftSpec};
use daicl_core::model::{
    causal_lm_loss, encoder_joint_loss, finite_diff_check, randomize_for_check, AdapterConfig,
    Gradients, ModelConfig, ParamStore, Tape,
};
use daicl_core::prompt::{
    apply_mlm_mask, build_decoder_instance, build_encoder_instance, loss_mask_for_variant,
    render_entity_label, render_inference_prompt, InferMode, InstanceLabel, PromptTemplate, Task,
};
use daicl_core::rng::{mix_seed, rng_from_seed};
use daicl_core::trainer::{
    adaptive_pretrain, compute_retrieval_plans, evaluate, run_cell, train, EvalSplit,
    LabeledExample, ModelKind, RetrievalPlans, Scenario, TrainConfig, TrainData, Variant,
};

use crate::config::{DataPaths, MatrixSpec, RunSpec};
use crate::formats::{self, InstanceDumpLine, NormalizedRecord};
use crate::remote::{inference_eval, CompletionEndpoint, StubServer};

/// Loads corpora for a run (files or the synthetic benchmark) into trainer
/// form, reusing cached retrieval plans when `DAICL_CACHE_DIR` is set.
pub fn load_train_data(
    task: Task,
    paths: Option<&DataPaths>,
    synthetic: Option<&SyntheticShiftSpec>,
    spec: &EmbedderSpec,
    metric: Metric,
    k: usize,
) -> Result<TrainData> {
    let (source_train, source_dev, target_test, target_sentences) = match (paths, synthetic) {
        (Some(paths), None) => {
            let train = formats::records_to_examples(
                &formats::read_normalized(&paths.source_train)?,
                task,
            )?;
            let dev = formats::records_to_examples(
                &formats::read_normalized(&paths.source_dev)?,
                task,
            )?;
            let test = match &paths.target_test {
                Some(p) => formats::records_to_examples(&formats::read_normalized(p)?, task)?,
                None => Vec::new(),
            };
            let target = formats::records_to_sentences(&formats::read_normalized(
                &paths.target_unlabeled,
            )?)?;
            (train, dev, test, target)
        }
        (None, Some(synth_spec)) => {
            let synth = gen_synthetic_shift(synth_spec)
                .map_err(|e| anyhow::anyhow!("synthetic spec: {e}"))?;
            let sa = |v: Vec<(Vec<daicl_core::corpus::Token>, daicl_core::corpus::Sentiment)>| {
                v.into_iter()
                    .map(|(t, s)| LabeledExample::sa(t, s))
                    .collect::<Vec<_>>()
            };
            (
                sa(synth.source_train),
                sa(synth.source_dev),
                sa(synth.target_test),
                synth.target_unlabeled,
            )
        }
        _ => bail!("exactly one of paths/synthetic must be set"),
    };

    let plans = cached_plans(
        task,
        &source_train,
        &source_dev,
        &target_test,
        &target_sentences,
        spec,
        metric,
        k,
    )?;
    TrainData::build_with_plans(
        task,
        source_train,
        source_dev,
        target_test,
        target_sentences,
        spec,
        metric,
        k,
        plans,
    )
    .map_err(|e| anyhow::anyhow!("building training data: {e}"))
}

/// Retrieval-plan disk cache, keyed by a hash of everything that determines
/// the plans. Active only when `DAICL_CACHE_DIR` is set.
#[allow(clippy::too_many_arguments)]
fn cached_plans(
    task: Task,
    source_train: &[LabeledExample],
    source_dev: &[LabeledExample],
    target_test: &[LabeledExample],
    target_sentences: &[Vec<daicl_core::corpus::Token>],
    spec: &EmbedderSpec,
    metric: Metric,
    k: usize,
) -> Result<Option<RetrievalPlans>> {
    let Ok(cache_dir) = std::env::var("DAICL_CACHE_DIR") else {
        return Ok(None);
    };
    let cache_dir = PathBuf::from(cache_dir);
    std::fs::create_dir_all(&cache_dir)?;
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&task)?);
    hasher.update(serde_json::to_vec(spec)?);
    hasher.update(serde_json::to_vec(&metric)?);
    hasher.update(k.to_le_bytes());
    hasher.update(serde_json::to_vec(source_train)?);
    hasher.update(serde_json::to_vec(source_dev)?);
    hasher.update(serde_json::to_vec(target_test)?);
    hasher.update(serde_json::to_vec(target_sentences)?);
    let key = hex(&hasher.finalize());
    let path = cache_dir.join(format!("plans-{key}.json"));
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        let plans: RetrievalPlans = serde_json::from_str(&text)
            .with_context(|| format!("corrupt plan cache {}", path.display()))?;
        return Ok(Some(plans));
    }
    // Compute once, store, and hand back through the cache for uniformity.
    let target_index = build_index(target_sentences, spec, metric)
        .map_err(|e| anyhow::anyhow!("target index: {e}"))?;
    let source_sentences: Vec<Vec<daicl_core::corpus::Token>> =
        source_train.iter().map(|e| e.tokens.clone()).collect();
    let source_index = build_index(&source_sentences, spec, metric)
        .map_err(|e| anyhow::anyhow!("source index: {e}"))?;
    let plans = compute_retrieval_plans(
        &target_index,
        &source_index,
        source_train,
        source_dev,
        target_test,
        spec,
        k,
    )
    .map_err(|e| anyhow::anyhow!("retrieval plans: {e}"))?;
    std::fs::write(&path, serde_json::to_string(&plans)?)?;
    Ok(Some(plans))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `ingest`: raw corpus files → normalized JSON lines.
pub fn ingest(
    task: Task,
    format: &str,
    input: &Path,
    out: &Path,
    drop_labels: bool,
    keep_types: bool,
) -> Result<()> {
    let records = match (task, format) {
        (Task::Ner, "conll") => {
            let text = std::fs::read_to_string(input)
                .with_context(|| format!("reading {}", input.display()))?;
            let (sentences, report) =
                parse_conll_with_report(&text).map_err(|e| anyhow::anyhow!("{e}"))?;
            if report.docstart_lines > 0 {
                eprintln!(
                    "note: dropped {} -DOCSTART- document-boundary line(s)",
                    report.docstart_lines
                );
            }
            formats::ner_to_normalized(&sentences, keep_types)
        }
        (Task::Sa, "reviews") => {
            let reviews = formats::read_reviews(input)?;
            formats::sa_to_normalized(&reviews)
        }
        (_, "normalized") => formats::read_normalized(input)?,
        (task, format) => bail!("unsupported task/format combination: {task:?}/{format}"),
    };
    let records = if drop_labels {
        formats::to_unlabeled(&records)
    } else {
        records
    };
    formats::write_normalized(out, &records)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

/// `index`: build and persist a retrieval index over unlabeled text.
pub fn index_cmd(input: &Path, dim: usize, seed: u64, metric: Metric, out: &Path) -> Result<()> {
    let records = formats::read_normalized(input)?;
    let sentences = formats::records_to_sentences(&records)?;
    let spec = EmbedderSpec::ngram(dim, seed);
    let index = build_index(&sentences, &spec, metric).map_err(|e| anyhow::anyhow!("{e}"))?;
    formats::write_index(out, &index)?;
    println!(
        "indexed {} sentences (dim={dim}, metric={metric:?}) into {}",
        index.len(),
        out.display()
    );
    Ok(())
}

/// `retrieve`: top-k hits for every query against a stored index.
pub fn retrieve(index_path: &Path, queries: &Path, k: usize, out: &Path) -> Result<()> {
    let index = formats::read_index(index_path)?;
    let embedder =
        NgramEmbedder::from_spec(&index.spec).map_err(|e| anyhow::anyhow!("{e}"))?;
    let records = formats::read_normalized(queries)?;
    let sentences = formats::records_to_sentences(&records)?;
    let mut lines = Vec::with_capacity(sentences.len());
    for (query_id, sent) in sentences.iter().enumerate() {
        let hits = index
            .top_k(sent, &embedder, k)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        lines.push(formats::RetrievalDumpLine {
            query_id,
            hits: hits
                .into_iter()
                .map(|h| formats::HitDump {
                    id: h.corpus_id,
                    score: h.score,
                })
                .collect(),
        });
    }
    formats::write_retrieval_dump(out, &lines)?;
    println!("wrote {} retrieval results to {}", lines.len(), out.display());
    Ok(())
}

/// Prompt construction mode for the `prompts` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PromptMode {
    Encoder,
    Decoder,
    Inference,
}

/// `prompts`: render instances or prompts for inspection and golden tests.
#[allow(clippy::too_many_arguments)]
pub fn prompts(
    task: Task,
    mode: PromptMode,
    input: &Path,
    index_path: Option<&Path>,
    demo_mode: InferMode,
    k: usize,
    seed: u64,
    mask_rate: Option<f64>,
    out: &Path,
    delimiter: &str,
    instances_out: Option<&Path>,
) -> Result<()> {
    let records = formats::read_normalized(input)?;
    let examples = formats::records_to_examples(&records, task)?;
    let index = index_path.map(formats::read_index).transpose()?;
    let embedder = index
        .as_ref()
        .map(|i| NgramEmbedder::from_spec(&i.spec))
        .transpose()
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let contexts_for = |tokens: &[daicl_core::corpus::Token]| -> Result<Vec<Vec<daicl_core::corpus::Token>>> {
        match (&index, &embedder) {
            (Some(index), Some(embedder)) => Ok(index
                .top_k(tokens, embedder, k)
                .map_err(|e| anyhow::anyhow!("{e}"))?
                .into_iter()
                .map(|h| index.sentences[h.corpus_id].clone())
                .collect()),
            _ => Ok(Vec::new()),
        }
    };

    let mut prompt_texts = Vec::new();
    let mut instance_lines = Vec::new();
    let template = PromptTemplate::alpaca(task);
    match mode {
        PromptMode::Encoder => {
            // Vocabulary over the inputs and contexts, for id dumps.
            let mut vocab = Vocabulary::new();
            for e in &examples {
                for t in &e.tokens {
                    vocab.intern(t.as_str());
                }
            }
            if let Some(index) = &index {
                for s in &index.sentences {
                    for t in s {
                        vocab.intern(t.as_str());
                    }
                }
            }
            for (i, example) in examples.iter().enumerate() {
                let contexts = contexts_for(&example.tokens)?;
                let inst = build_encoder_instance(
                    &example.tokens,
                    InstanceLabel::Unlabeled,
                    &contexts,
                    &vocab,
                    512,
                )
                .map_err(|e| anyhow::anyhow!("{e}"))?;
                let inst = match mask_rate {
                    Some(rate) => {
                        let mut rng = rng_from_seed(mix_seed(seed, i as u64));
                        apply_mlm_mask(inst, rate, &mut rng).map_err(|e| anyhow::anyhow!("{e}"))?
                    }
                    None => inst,
                };
                let rendered: Vec<&str> = inst
                    .ids
                    .iter()
                    .map(|&id| vocab.token(id).unwrap_or("?"))
                    .collect();
                prompt_texts.push(rendered.join(" "));
                instance_lines.push(InstanceDumpLine {
                    ids: inst.ids.clone(),
                    regions: formats::run_length_encode(&inst.region),
                    mask_positions: inst.mask_positions.clone(),
                });
            }
        }
        PromptMode::Decoder => {
            for example in &examples {
                let contexts = contexts_for(&example.tokens)?;
                let response = match &example.label {
                    daicl_core::trainer::ExampleLabel::Sentiment(s) => s.as_str().to_string(),
                    daicl_core::trainer::ExampleLabel::Bio(_) => {
                        let spans = example.gold_spans().expect("bio label");
                        let entities: Vec<String> = spans
                            .iter()
                            .map(|sp| join_tokens(&example.tokens[sp.start..sp.end]))
                            .collect();
                        render_entity_label(&entities)
                    }
                };
                let text = template
                    .render(&contexts, &join_tokens(&example.tokens), &response)
                    .map_err(|e| anyhow::anyhow!("{e}"))?;
                prompt_texts.push(text);
            }
        }
        PromptMode::Inference => {
            for (i, example) in examples.iter().enumerate() {
                let demos: Vec<(String, String)> = match demo_mode {
                    InferMode::None => Vec::new(),
                    _ => {
                        let contexts = contexts_for(&example.tokens)?;
                        contexts
                            .iter()
                            .map(|c| (join_tokens(c), "None".to_string()))
                            .collect()
                    }
                };
                let _ = i;
                let text = render_inference_prompt(
                    &join_tokens(&example.tokens),
                    &demos,
                    task,
                    demo_mode,
                )
                .map_err(|e| anyhow::anyhow!("{e}"))?;
                prompt_texts.push(text);
            }
        }
    }
    formats::write_prompt_dump(out, &prompt_texts, delimiter)?;
    if let Some(instances_out) = instances_out {
        formats::write_instance_dump(instances_out, &instance_lines)?;
    }
    println!("wrote {} prompts to {}", prompt_texts.len(), out.display());
    Ok(())
}

/// Summary written next to every trained checkpoint.
#[derive(serde::Serialize)]
struct TrainSummary {
    variant: Variant,
    model: ModelKind,
    task: Task,
    seed: u64,
    best_dev_metric: f64,
    target_test_metric: Option<f64>,
    epochs_ran: usize,
    stopped_early: bool,
    aborted_steps: usize,
}

/// `train`: one full training run with artifacts on disk.
pub fn train_cmd(spec: &RunSpec, out_override: Option<&Path>) -> Result<()> {
    let cfg = spec.train_config()?;
    let data = load_train_data(
        spec.task,
        spec.paths.as_ref(),
        spec.synthetic.as_ref(),
        &spec.embedder.spec(),
        spec.metric(),
        spec.k,
    )?;
    let out_dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)?;

    let outcome = match spec.variant {
        Variant::AdaptivePretrain => adaptive_pretrain(spec.model, &data, &cfg)
            .map_err(|e| anyhow::anyhow!("training: {e}"))?,
        v => train(v, spec.model, &data, &cfg).map_err(|e| anyhow::anyhow!("training: {e}"))?,
    };

    formats::write_checkpoint(
        &out_dir.join("checkpoint.ckpt"),
        &outcome.checkpoint.store,
        outcome.checkpoint.step,
        &outcome.checkpoint.val_history,
        &data.vocab,
    )?;
    formats::write_train_log(&out_dir.join("train_log.jsonl"), &outcome.steps, &outcome.history)?;
    formats::write_json(&out_dir.join("history.json"), &outcome.history)?;

    let target_test_metric = if data.target_test.is_empty() {
        None
    } else {
        Some(
            evaluate(
                &outcome.checkpoint.store,
                &data,
                EvalSplit::TargetTest,
                spec.variant,
                spec.model,
                &cfg,
            )
            .map_err(|e| anyhow::anyhow!("evaluation: {e}"))?,
        )
    };
    let summary = TrainSummary {
        variant: spec.variant,
        model: spec.model,
        task: spec.task,
        seed: spec.seed,
        best_dev_metric: outcome
            .checkpoint
            .val_history
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
        target_test_metric,
        epochs_ran: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        aborted_steps: outcome.aborted_steps,
    };
    formats::write_json(&out_dir.join("summary.json"), &summary)?;
    match target_test_metric {
        Some(m) => println!(
            "trained {} ({:?}); best dev {:.4}, target test {:.4}",
            spec.variant.name(),
            spec.model,
            summary.best_dev_metric,
            m
        ),
        None => println!(
            "trained {} ({:?}); best dev {:.4}",
            spec.variant.name(),
            spec.model,
            summary.best_dev_metric
        ),
    }
    Ok(())
}

/// `eval`: checkpoint evaluation, or inference-only evaluation against a
/// completion endpoint.
#[allow(clippy::too_many_arguments)]
pub fn eval_cmd(
    spec: &RunSpec,
    checkpoint: Option<&Path>,
    split: &str,
    inference_mode: Option<InferMode>,
    endpoint_url: Option<&str>,
    endpoint_model: &str,
    concurrency: usize,
    out: Option<&Path>,
) -> Result<()> {
    let data = load_train_data(
        spec.task,
        spec.paths.as_ref(),
        spec.synthetic.as_ref(),
        &spec.embedder.spec(),
        spec.metric(),
        spec.k,
    )?;
    if let Some(mode) = inference_mode {
        let url = endpoint_url.context("--endpoint-url is required with --inference-mode")?;
        let ep = CompletionEndpoint::new(url, endpoint_model);
        let report = inference_eval(
            spec.task,
            mode,
            &ep,
            &data.target_test,
            &data.source_train,
            Some(&data.source_index),
            spec.k,
            spec.seed,
            concurrency,
        )?;
        println!(
            "inference-only ({:?} demos): metric {:.4} over {} examples",
            mode, report.metric, report.examples
        );
        if let Some(out) = out {
            formats::write_json(out, &report)?;
        }
        return Ok(());
    }

    let checkpoint = checkpoint.context("--checkpoint is required unless --inference-mode")?;
    let loaded = formats::read_checkpoint(checkpoint)?;
    let mut data = data;
    if loaded.vocab.len() != data.vocab.len() {
        bail!(
            "checkpoint vocabulary ({} ids) does not match the data ({} ids); \
             evaluate with the config the model was trained with",
            loaded.vocab.len(),
            data.vocab.len()
        );
    }
    data.vocab = loaded.vocab.clone();
    let cfg = spec.train_config()?;
    let split = match split {
        "dev" => EvalSplit::Dev,
        "target_test" => EvalSplit::TargetTest,
        other => bail!("unknown split {other:?} (dev|target_test)"),
    };
    let metric = evaluate(&loaded.store, &data, split, spec.variant, spec.model, &cfg)
        .map_err(|e| anyhow::anyhow!("evaluation: {e}"))?;
    println!("{split:?} metric: {metric:.4}");
    if let Some(out) = out {
        formats::write_json(out, &serde_json::json!({ "split": format!("{split:?}"), "metric": metric }))?;
    }
    Ok(())
}

/// `matrix`: variant × scenario × seed grid with aggregation and reports.
pub fn matrix_cmd(spec: &MatrixSpec, out_override: Option<&Path>) -> Result<()> {
    let out_dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)?;

    // Build scenarios up front; data is shared read-only across workers.
    let mut scenarios = Vec::new();
    for s in &spec.scenarios {
        let data = load_train_data(
            s.task,
            s.paths.as_ref(),
            s.synthetic.as_ref(),
            &s.embedder.spec(),
            s.metric(),
            s.k,
        )
        .with_context(|| format!("scenario {:?}", s.name))?;
        scenarios.push((
            Scenario {
                name: s.name.clone(),
                kind: s.model,
                data,
            },
            s.k,
        ));
    }

    let base_cfg = spec.train.apply(TrainConfig::desk_default());
    let matrix = run_matrix_parallel(&scenarios, &spec.variants, &spec.seeds, &base_cfg, spec.jobs);

    let table = matrix.render_table();
    print!("{table}");
    formats::write_string(&out_dir.join("report.txt"), &table)?;
    formats::write_string(&out_dir.join("report.csv"), &matrix.to_csv())?;
    formats::write_json(
        &out_dir.join("report.json"),
        &serde_json::json!({
            "cells": matrix,
            "aggregates": matrix.aggregate(),
        }),
    )?;
    println!("reports written to {}", out_dir.display());
    Ok(())
}

/// Executes matrix cells on up to `jobs` worker threads. Each cell is an
/// independent deterministic run, so the resulting matrix does not depend on
/// scheduling.
pub fn run_matrix_parallel(
    scenarios: &[(Scenario, usize)],
    variants: &[Variant],
    seeds: &[u64],
    base_cfg: &TrainConfig,
    jobs: usize,
) -> RunMatrix {
    if jobs <= 1 || scenarios.len() * variants.len() * seeds.len() <= 1 {
        let names: Vec<&str> = scenarios.iter().map(|(s, _)| s.name.as_str()).collect();
        return execute_matrix(&names, variants, seeds, |name, variant, seed| {
            let (scenario, k) = scenarios
                .iter()
                .find(|(s, _)| s.name == name)
                .expect("scenario exists");
            let mut cfg = base_cfg.clone();
            cfg.k = *k;
            run_cell(scenario, variant, seed, &cfg).map_err(|e| e.to_string())
        });
    }
    let queue: Mutex<VecDeque<(usize, Variant, u64)>> = Mutex::new(
        scenarios
            .iter()
            .enumerate()
            .flat_map(|(si, _)| {
                variants
                    .iter()
                    .flat_map(move |&v| seeds.iter().map(move |&seed| (si, v, seed)))
            })
            .collect(),
    );
    let results: Mutex<Vec<(String, Variant, u64, Result<f64, String>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop_front();
                let Some((si, variant, seed)) = job else { break };
                let (scenario, k) = &scenarios[si];
                let mut cfg = base_cfg.clone();
                cfg.k = *k;
                let outcome = run_cell(scenario, variant, seed, &cfg).map_err(|e| e.to_string());
                results
                    .lock()
                    .expect("results lock")
                    .push((scenario.name.clone(), variant, seed, outcome));
            });
        }
    });
    let mut matrix = RunMatrix::new();
    for (name, variant, seed, outcome) in results.into_inner().expect("results") {
        match outcome {
            Ok(metric) => matrix.insert(&name, variant, seed, metric),
            Err(e) => matrix.insert_error(&name, variant, seed, e),
        }
    }
    matrix
}

/// One gradient-check suite result.
#[derive(Debug, serde::Serialize)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub pass: bool,
}

/// `gradcheck`: finite-difference verification of every loss path. Returns
/// the per-suite report; the command exits nonzero if any suite fails.
pub fn gradcheck_suites(eps: f64, coords: usize, threshold: f64) -> Result<Vec<GradCheckLine>> {
    use daicl_core::corpus::Token;
    let toks = |words: &[&str]| -> Vec<Token> {
        words.iter().map(|w| Token::new(w).unwrap()).collect()
    };
    let mut vocab = Vocabulary::new();
    for i in 0..12 {
        vocab.intern(&format!("w{i}"));
    }
    let template = PromptTemplate::alpaca(Task::Sa);
    daicl_core::prompt::extend_vocab_for_decoder(&mut vocab, &template);

    let src = toks(&["w0", "w1", "w2"]);
    let ctx1 = toks(&["w3", "w4", "w5", "w6"]);
    let ctx2 = toks(&["w7", "w8", "w9", "w10"]);

    let mut lines = Vec::new();
    let mut push = |name: &str, report: daicl_core::model::GradCheckReport| {
        lines.push(GradCheckLine {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            coords: report.coords_checked,
            pass: report.max_rel_err <= threshold,
        });
    };

    // (a) Encoder joint loss with the classifier head.
    {
        let mut store = ParamStore::init(
            ModelConfig::encoder(vocab.len(), 16, 2, 2, 64).with_classifier(3),
            11,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        randomize_for_check(&mut store, 101);
        let inst = build_encoder_instance(
            &src,
            InstanceLabel::Class(1),
            &[ctx1.clone(), ctx2.clone()],
            &vocab,
            64,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut rng = rng_from_seed(7);
        let inst = apply_mlm_mask(inst, 0.3, &mut rng).map_err(|e| anyhow::anyhow!("{e}"))?;
        let report = finite_diff_check(
            &store,
            |s| {
                let mut tape = Tape::new();
                let parts = encoder_joint_loss(&mut tape, s, &inst, 0.2)?;
                tape.backward(parts.loss)?;
                let mut grads = Gradients::zeros_like(s);
                tape.accumulate_param_grads(s, &mut grads, 1.0);
                Ok((parts.total, grads))
            },
            eps,
            coords,
            1,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        push("encoder joint loss (classifier head)", report);
    }

    // (b) Encoder joint loss with the CRF head.
    {
        let mut store = ParamStore::init(
            ModelConfig::encoder(vocab.len(), 16, 2, 2, 64).with_emissions(3),
            12,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        randomize_for_check(&mut store, 102);
        let inst = build_encoder_instance(
            &src,
            InstanceLabel::Tags(vec![0, 1, 2]),
            &[ctx1.clone()],
            &vocab,
            64,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut rng = rng_from_seed(8);
        let inst = apply_mlm_mask(inst, 0.4, &mut rng).map_err(|e| anyhow::anyhow!("{e}"))?;
        let report = finite_diff_check(
            &store,
            |s| {
                let mut tape = Tape::new();
                let parts = encoder_joint_loss(&mut tape, s, &inst, 0.2)?;
                tape.backward(parts.loss)?;
                let mut grads = Gradients::zeros_like(s);
                tape.accumulate_param_grads(s, &mut grads, 1.0);
                Ok((parts.total, grads))
            },
            eps,
            coords,
            2,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        push("encoder joint loss (CRF head)", report);
    }

    // (c) Causal LM loss, full-token and response-only masks.
    let dec_inst = |variant: Variant| -> Result<daicl_core::prompt::DecoderInstance> {
        let mut inst = build_decoder_instance(&src, &[ctx1.clone()], "positive", &template, &vocab, 128)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        inst.loss_mask = loss_mask_for_variant(&inst, variant);
        Ok(inst)
    };
    for (variant, name) in [
        (Variant::Daicl, "causal LM loss (full-token mask)"),
        (Variant::IclSup, "causal LM loss (response-only mask)"),
    ] {
        let mut store = ParamStore::init(
            ModelConfig::decoder(vocab.len(), 16, 2, 2, 128),
            13,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        randomize_for_check(&mut store, 103);
        let inst = dec_inst(variant)?;
        let report = finite_diff_check(
            &store,
            |s| {
                let mut tape = Tape::new();
                let parts = causal_lm_loss(&mut tape, s, &inst, None)?;
                tape.backward(parts.loss_sum)?;
                let mut grads = Gradients::zeros_like(s);
                tape.accumulate_param_grads(s, &mut grads, 1.0);
                Ok((parts.total, grads))
            },
            eps,
            coords,
            3,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        push(name, report);
    }

    // (d) Causal LM loss with adapters attached (dropout off for exactness).
    {
        let mut store = ParamStore::init(
            ModelConfig::decoder(vocab.len(), 16, 2, 2, 128),
            14,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        store
            .attach_adapters(AdapterConfig {
                rank: 4,
                alpha: 4.0,
                dropout: 0.0,
            })
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        randomize_for_check(&mut store, 104);
        let inst = dec_inst(Variant::Daicl)?;
        let report = finite_diff_check(
            &store,
            |s| {
                let mut tape = Tape::new();
                let parts = causal_lm_loss(&mut tape, s, &inst, None)?;
                tape.backward(parts.loss_sum)?;
                let mut grads = Gradients::zeros_like(s);
                tape.accumulate_param_grads(s, &mut grads, 1.0);
                Ok((parts.total, grads))
            },
            eps,
            coords,
            4,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        push("causal LM loss (low-rank adapters)", report);
    }
    Ok(lines)
}

pub fn gradcheck_cmd(eps: f64, coords: usize, threshold: f64) -> Result<bool> {
    let lines = gradcheck_suites(eps, coords, threshold)?;
    let mut all_pass = true;
    for l in &lines {
        println!(
            "{} {:<42} max_rel_err={:.3e} ({} coords)",
            if l.pass { "PASS" } else { "FAIL" },
            l.name,
            l.max_rel_err,
            l.coords
        );
        all_pass &= l.pass;
    }
    Ok(all_pass)
}

/// `synth`: generate and persist the synthetic domain-shift benchmark.
pub fn synth_cmd(spec: &SyntheticShiftSpec, out_dir: &Path) -> Result<()> {
    let data = gen_synthetic_shift(spec).map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::create_dir_all(out_dir)?;
    let labeled = |v: &[(Vec<daicl_core::corpus::Token>, daicl_core::corpus::Sentiment)]| {
        v.iter()
            .map(|(tokens, label)| NormalizedRecord {
                text: Some(join_tokens(tokens)),
                label: Some(label.as_str().to_string()),
                ..NormalizedRecord::default()
            })
            .collect::<Vec<_>>()
    };
    let unlabeled: Vec<NormalizedRecord> = data
        .target_unlabeled
        .iter()
        .map(|tokens| NormalizedRecord {
            tokens: Some(tokens.iter().map(|t| t.as_str().to_string()).collect()),
            ..NormalizedRecord::default()
        })
        .collect();
    formats::write_normalized(&out_dir.join("source_train.jsonl"), &labeled(&data.source_train))?;
    formats::write_normalized(&out_dir.join("source_dev.jsonl"), &labeled(&data.source_dev))?;
    formats::write_normalized(&out_dir.join("target_unlabeled.jsonl"), &unlabeled)?;
    formats::write_normalized(&out_dir.join("target_test.jsonl"), &labeled(&data.target_test))?;
    formats::write_json(&out_dir.join("spec.json"), spec)?;
    println!(
        "wrote synthetic benchmark ({} train / {} dev / {} unlabeled / {} test) to {}",
        data.source_train.len(),
        data.source_dev.len(),
        data.target_unlabeled.len(),
        data.target_test.len(),
        out_dir.display()
    );
    Ok(())
}

/// `stub-serve`: run the canned-response completion server until killed.
pub fn stub_serve(port: u16, responses: Vec<String>) -> Result<()> {
    let server = StubServer::spawn_on(port, responses)?;
    println!("stub completion server on {}", server.url());
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}
