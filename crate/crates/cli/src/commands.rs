use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use mvr_core::encoder::DualEncoder;
use mvr_core::eval::{collapse_report, recall_at_k};
use mvr_core::index::{build_index, embed_queries, MultiVectorIndex, SearchHit, SearchMode};
use mvr_core::io::{append_jsonl, atomic_write, to_jsonl, write_jsonl};
use mvr_core::scoring::TauMode;
use mvr_core::text::{generate_synthetic, read_corpus, read_examples, write_corpus, write_examples, SyntheticSpec, Vocab};
use mvr_core::train::{checkpoint_hash, load_checkpoint, save_checkpoint, TrainData, TrainState, Trainer};

use crate::config::{require, require_existing, IndexMode, RunConfig, UsageError};
use crate::{AnalyzeArgs, Cli, Command, EvalArgs, GenArgs, IndexArgs, QueryModeArgs, SearchArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynthetic(args) => gen_synthetic(args),
        Command::Train(args) => train(&mut cfg, args),
        Command::Index(args) => index(&mut cfg, args),
        Command::Search(args) => search(&mut cfg, args),
        Command::Eval(args) => eval(&mut cfg, args),
        Command::Analyze(args) => analyze(&mut cfg, args),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<std::path::PathBuf>, flag: Option<std::path::PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

/// Pretty JSON to `out`, or to stdout.
fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit_text(&text, out)
}

fn emit_text(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => atomic_write(path, text.as_bytes())?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn gen_synthetic(args: GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec::default();
    set(&mut spec.n_docs, args.n_docs);
    set(&mut spec.segments_per_doc, args.segments_per_doc);
    set(&mut spec.vocab_size, args.vocab_size);
    set(&mut spec.topic_size, args.topic_size);
    set(&mut spec.segment_len, args.segment_len);
    set(&mut spec.query_len, args.query_len);
    set(&mut spec.queries_per_segment, args.queries_per_segment);
    set(&mut spec.eval_queries_per_segment, args.eval_queries_per_segment);
    set(&mut spec.noise_tokens, args.noise_tokens);
    set(&mut spec.hard_negatives, args.hard_negatives);
    set(&mut spec.seed, args.seed);
    spec.validate()?;

    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("{}: cannot create directory", args.out_dir.display()))?;
    write_corpus(&args.out_dir.join("corpus.jsonl"), &data.corpus)?;
    write_examples(&args.out_dir.join("train.jsonl"), &data.train)?;
    write_examples(&args.out_dir.join("eval.jsonl"), &data.eval)?;
    emit_json(
        &serde_json::json!({
            "spec": spec,
            "n_docs": data.corpus.len(),
            "n_train": data.train.len(),
            "n_eval": data.eval.len(),
        }),
        None,
    )
}

fn train(cfg: &mut RunConfig, args: TrainArgs) -> Result<()> {
    set_path(&mut cfg.paths.corpus, args.corpus);
    set_path(&mut cfg.paths.train, args.train);
    set_path(&mut cfg.paths.checkpoint, args.checkpoint);
    set_path(&mut cfg.paths.metrics, args.metrics);
    set(&mut cfg.train.epochs, args.epochs);
    set(&mut cfg.train.batch_size, args.batch_size);
    set(&mut cfg.train.learning_rate, args.learning_rate);
    set(&mut cfg.train.hard_negatives_per_query, args.hard_negatives);
    set(&mut cfg.train.seed, args.seed);
    set(&mut cfg.train.loss.lambda, args.lambda);
    if let Some(tau) = args.fixed_tau {
        cfg.train.loss.tau_mode = TauMode::Fixed { tau };
    }
    set(&mut cfg.encoder.n_viewers, args.n_viewers);
    set(&mut cfg.encoder.d_model, args.d_model);
    set(&mut cfg.encoder.n_heads, args.n_heads);
    set(&mut cfg.encoder.n_layers, args.n_layers);
    set(&mut cfg.encoder.view_mode, args.view_mode.map(Into::into));
    if args.print_config {
        return emit_text(&cfg.to_toml()?, None);
    }
    cfg.validate()?;
    let corpus_path = require_existing(&cfg.paths.corpus, "--corpus")?;
    let train_path = require_existing(&cfg.paths.train, "--train")?;
    let ckpt_path = require(&cfg.paths.checkpoint, "--checkpoint")?;

    let corpus = read_corpus(corpus_path)?;
    let examples = read_examples(train_path)?;
    let mut state = if args.resume && ckpt_path.exists() {
        let mut state = load_checkpoint(ckpt_path)?;
        state.config.epochs = cfg.train.epochs;
        log::info!("resuming at epoch {} step {}", state.epoch, state.step_in_epoch);
        state
    } else {
        let vocab = Vocab::build(&corpus, cfg.vocab.max_size, cfg.encoder.n_viewers)?;
        let mut enc = cfg.encoder.clone();
        enc.vocab_size = vocab.len();
        let model = DualEncoder::init(enc)?;
        if let Some(m) = &cfg.paths.metrics {
            atomic_write(m, b"")?;
        }
        TrainState::new(cfg.train.clone(), vocab, model)?
    };
    let data = TrainData::prepare(&state.model, &state.vocab, &corpus, &examples, &state.config)?;
    let trainer = Trainer::new(&data);
    let metrics_path = cfg.paths.metrics.clone();
    let mut last = None;
    while state.epoch < state.config.epochs {
        let m = trainer.train_epoch(&mut state)?;
        log::info!("epoch {} tau {:.4} loss {:.5} local {:.5}", m.epoch, m.tau, m.mean_loss, m.mean_local_loss);
        save_checkpoint(&state, ckpt_path)?;
        if let Some(p) = &metrics_path {
            append_jsonl(p, &m)?;
        }
        last = Some(m);
    }
    if last.is_none() {
        save_checkpoint(&state, ckpt_path)?;
    }
    emit_json(
        &serde_json::json!({
            "checkpoint": ckpt_path,
            "checkpoint_sha256": checkpoint_hash(ckpt_path)?,
            "epochs": state.epoch,
            "global_step": state.global_step,
            "last_epoch": last,
        }),
        None,
    )
}

fn index(cfg: &mut RunConfig, args: IndexArgs) -> Result<()> {
    set_path(&mut cfg.paths.checkpoint, args.checkpoint);
    set_path(&mut cfg.paths.corpus, args.corpus);
    set_path(&mut cfg.paths.index, args.index);
    set(&mut cfg.index.mode, args.mode);
    set(&mut cfg.index.ann.m, args.m);
    set(&mut cfg.index.ann.ef_construction, args.ef_construction);
    set(&mut cfg.index.ann.ef_search, args.ef_search);
    cfg.index.ann.validate()?;
    let ckpt_path = require_existing(&cfg.paths.checkpoint, "--checkpoint")?;
    let corpus_path = require_existing(&cfg.paths.corpus, "--corpus")?;
    let out = require(&cfg.paths.index, "--index")?;

    let state = load_checkpoint(ckpt_path)?;
    let corpus = read_corpus(corpus_path)?;
    let mut idx = build_index(&state.model, &state.vocab, &corpus, Some(checkpoint_hash(ckpt_path)?))?;
    if cfg.index.mode == IndexMode::Ann {
        idx.build_graph(cfg.index.ann)?;
    }
    idx.save(out)?;
    emit_json(&idx.manifest(), None)
}

/// Loads the index and the checkpoint it was built from.
fn open_target(cfg: &mut RunConfig, args: QueryModeArgs) -> Result<(MultiVectorIndex, TrainState, SearchMode)> {
    set_path(&mut cfg.paths.index, args.index);
    set_path(&mut cfg.paths.checkpoint, args.checkpoint);
    set(&mut cfg.index.mode, args.mode);
    let index_dir = require_existing(&cfg.paths.index, "--index")?;
    let ckpt_path = require_existing(&cfg.paths.checkpoint, "--checkpoint")?;
    let idx = MultiVectorIndex::load(index_dir)?;
    let hash = checkpoint_hash(ckpt_path)?;
    if let Some(built) = idx.checkpoint_hash() {
        if built != hash {
            bail!(mvr_core::MvrError::Config(format!(
                "index {} was built from checkpoint {built}, not {hash}",
                index_dir.display()
            )));
        }
    }
    let state = load_checkpoint(ckpt_path)?;
    let mode = match cfg.index.mode {
        IndexMode::Flat => SearchMode::Flat,
        IndexMode::Ann => {
            if !idx.has_graph() {
                bail!(UsageError("index has no graph; rebuild it with --mode ann".into()));
            }
            SearchMode::Ann {
                ef: args.ef.map(|e| e as usize),
            }
        }
    };
    Ok((idx, state, mode))
}

#[derive(Serialize)]
struct SearchRecord<'a> {
    query: &'a str,
    hits: Vec<SearchHit>,
}

fn search(cfg: &mut RunConfig, args: SearchArgs) -> Result<()> {
    let mut queries = args.queries.clone();
    if let Some(path) = &args.queries_file {
        let text = fs::read_to_string(path).map_err(|e| mvr_core::MvrError::Io {
            path: path.clone(),
            source: e,
        })?;
        queries.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    if queries.is_empty() {
        bail!(UsageError("no queries: pass --query or --queries-file".into()));
    }
    let (idx, state, mode) = open_target(cfg, args.target)?;
    let vectors = embed_queries(&state.model, &state.vocab, &queries)?;
    let results = idx.search_many(&vectors, args.top_k as usize, mode)?;
    let records: Vec<SearchRecord> = queries
        .iter()
        .zip(results)
        .map(|(q, hits)| SearchRecord { query: q, hits })
        .collect();
    match &args.out {
        Some(p) => write_jsonl(p, &records)?,
        None => emit_text(&to_jsonl(&records)?, None)?,
    }
    Ok(())
}

fn eval(cfg: &mut RunConfig, args: EvalArgs) -> Result<()> {
    set_path(&mut cfg.paths.eval, args.eval);
    if let Some(ks) = args.ks {
        cfg.eval.ks = ks.into_iter().map(|k| k as usize).collect();
    }
    cfg.validate()?;
    let eval_path = require_existing(&cfg.paths.eval, "--eval")?.to_path_buf();
    let (idx, state, mode) = open_target(cfg, args.target)?;
    let examples = read_examples(&eval_path)?;
    let queries: Vec<String> = examples.iter().map(|e| e.query.clone()).collect();
    let vectors = embed_queries(&state.model, &state.vocab, &queries)?;
    let depth = *cfg.eval.ks.iter().max().expect("validated non-empty");
    let results = idx.search_many(&vectors, depth, mode)?;
    let ranked: Vec<Vec<String>> = results
        .into_iter()
        .map(|hits| hits.into_iter().map(|h| h.doc_id).collect())
        .collect();
    let gold: Vec<Vec<String>> = examples.iter().map(|e| e.positive_ids.clone()).collect();
    let report = recall_at_k(&ranked, &gold, &cfg.eval.ks)?;
    emit_json(&report, args.out.as_deref())
}

fn analyze(cfg: &mut RunConfig, args: AnalyzeArgs) -> Result<()> {
    set_path(&mut cfg.paths.checkpoint, args.checkpoint);
    set_path(&mut cfg.paths.corpus, args.corpus);
    set_path(&mut cfg.paths.eval, args.eval);
    set(&mut cfg.eval.normalization, args.normalization.map(Into::into));
    let ckpt_path = require_existing(&cfg.paths.checkpoint, "--checkpoint")?;
    let corpus_path = require_existing(&cfg.paths.corpus, "--corpus")?;
    let eval_path = require_existing(&cfg.paths.eval, "--eval")?;

    let state = load_checkpoint(ckpt_path)?;
    let corpus = read_corpus(corpus_path)?;
    let examples = read_examples(eval_path)?;
    let diag = collapse_report(&state.model, &state.vocab, &corpus, &examples, cfg.eval.normalization)?;
    if let Some(csv) = &args.histogram_csv {
        atomic_write(csv, diag.histogram_csv().as_bytes())?;
    }
    emit_json(&diag, args.out.as_deref())
}
