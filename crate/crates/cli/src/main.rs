//! `hmem`: data generation, training, evaluation, database building,
//! retrieval tracing, interactive sessions and cost reporting.
//!
//! Every command prints human-readable text followed by a `=== json ===`
//! line and one JSON object, so scripts can parse results robustly.

use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hmem_core::compressor::build_hierarchy;
use hmem_core::data::{gen_icl_dataset, read_jsonl, write_jsonl, VocabSpec};
use hmem_core::eval::{evaluate, EvalOptions};
use hmem_core::memstore::{chunk_context, HierDatabase};
use hmem_core::retriever::{format_trace, retrieve_from_db, RetrievalConfig};
use hmem_core::session::{
    format_transcript, DelayedScheduler, ImmediateScheduler, Scheduler, Session, SessionConfig,
    ThreadScheduler, TriggerMode, Turn,
};
use hmem_core::trainer::{instrumented_forwards, train, CostReport, MetricRecord, TrainConfig};
use hmem_core::model::Transformer;
use hmem_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "hmem", version, about = "Hierarchical context compression and retrieval")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [data], [train], [retrieval] and [session] tables; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model checkpoint to read or write.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Hierarchical database file.
    #[arg(long, global = true)]
    db: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ICL train/test split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train end to end and write a checkpoint.
    Train {
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Append one JSON record per step and epoch to this file.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score zero-shot, full-context and compressor-retriever accuracy.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        /// Include per-sample traces in the JSON block.
        #[arg(long)]
        traces: bool,
        #[command(flatten)]
        retrieval: RetrievalFlags,
    },
    /// Compress a token file into a database, one chunk per line.
    BuildDb {
        /// Whitespace-separated token ids; each line is a chunk unless --chunk-len is given.
        #[arg(long)]
        context: PathBuf,
        /// Re-chunk the whole token stream into pieces of this length.
        #[arg(long)]
        chunk_len: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Trace a retrieval for a query.
    Retrieve {
        /// File with whitespace-separated query token ids.
        #[arg(long)]
        query: PathBuf,
        #[command(flatten)]
        retrieval: RetrievalFlags,
    },
    /// Run a scripted or interactive session.
    Session {
        /// JSON lines of turns ({"tokens": [...], "trigger_at": n}); stdin lines of ids otherwise.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        window_size: Option<usize>,
        #[arg(long)]
        retrieval_slots: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long, value_enum)]
        trigger: Option<TriggerArg>,
        #[arg(long = "async", value_enum)]
        async_mode: Option<Toggle>,
        /// Background scheduler when async is on.
        #[arg(long, value_enum, default_value = "thread")]
        scheduler: SchedulerArg,
        /// Token boundaries a delayed scheduler waits before releasing a result.
        #[arg(long, default_value_t = 2)]
        latency: usize,
        /// Write the grown database here.
        #[arg(long)]
        save_db: Option<PathBuf>,
        #[command(flatten)]
        retrieval: RetrievalFlags,
    },
    /// Forward and activation cost of the pipeline.
    Cost {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        d: usize,
        /// Forward count used in the activation estimate; defaults to 2L+2.
        #[arg(long)]
        t: Option<usize>,
    },
}

#[derive(Args, Default)]
struct RetrievalFlags {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    top_c: Option<usize>,
    #[arg(long)]
    num_ret: Option<usize>,
    #[arg(long)]
    early_stop: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
}

impl RetrievalFlags {
    fn apply(&self, k: &mut usize, r: &mut RetrievalConfig) {
        if let Some(v) = self.k {
            *k = v;
        }
        if let Some(v) = self.top_c {
            r.top_c = v;
        }
        if let Some(v) = self.num_ret {
            r.num_ret_tokens = v;
        }
        if self.early_stop.is_some() {
            r.early_stop_threshold = self.early_stop;
        }
        if self.max_depth.is_some() {
            r.max_depth = self.max_depth;
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TriggerArg {
    Always,
    Token,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Thread,
    Immediate,
    Delayed,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    data: DataSection,
    train: Option<TrainConfig>,
    retrieval: Option<RetrievalConfig>,
    session: SessionSection,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    n_train: usize,
    n_test: usize,
    vocab: VocabSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_test: 400,
            vocab: VocabSpec::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SessionSection {
    window_size: usize,
    retrieval_slots: usize,
    max_new_tokens: usize,
    trigger: TriggerMode,
    #[serde(rename = "async")]
    async_on: bool,
}

impl Default for SessionSection {
    fn default() -> Self {
        Self {
            window_size: 48,
            retrieval_slots: 4,
            max_new_tokens: 8,
            trigger: TriggerMode::Always,
            async_on: false,
        }
    }
}

/// A failure with its exit code: 1 usage, 2 data or format, 3 numerical.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } => 3,
            Error::Config(_) | Error::WindowOverflow { .. } => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("=== json ===");
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let file = match &cli.common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            toml::from_str::<FileConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let seed = cli.common.seed.or(file.seed).unwrap_or(0);
    let mut tcfg = file.train.clone().unwrap_or_else(|| default_train_config(&file.data.vocab));
    tcfg.seed = seed;
    if let Some(r) = &file.retrieval {
        tcfg.retrieval = r.clone();
    }
    let common = &cli.common;
    match cli.command {
        Command::GenData { out, n_train, n_test } => gen_data(
            &out,
            seed,
            n_train.unwrap_or(file.data.n_train),
            n_test.unwrap_or(file.data.n_test),
            &file.data.vocab,
        ),
        Command::Train {
            data,
            epochs,
            lr,
            batch_size,
            metrics,
        } => {
            tcfg.epochs = epochs.unwrap_or(tcfg.epochs);
            tcfg.lr = lr.unwrap_or(tcfg.lr);
            tcfg.batch_size = batch_size.unwrap_or(tcfg.batch_size);
            let out = require(&common.checkpoint, "--checkpoint")?;
            cmd_train(&data, &tcfg, out, metrics.as_deref())
        }
        Command::Eval {
            data,
            limit,
            traces,
            retrieval,
        } => {
            retrieval.apply(&mut tcfg.k, &mut tcfg.retrieval);
            let model = load_model(common)?;
            cmd_eval(&model, &data, &tcfg, limit, traces)
        }
        Command::BuildDb { context, chunk_len, k } => {
            let model = load_model(common)?;
            let out = require(&common.db, "--db")?;
            cmd_build_db(&model, &context, chunk_len, k.unwrap_or(tcfg.k), out)
        }
        Command::Retrieve { query, retrieval } => {
            retrieval.apply(&mut tcfg.k, &mut tcfg.retrieval);
            let model = load_model(common)?;
            let db = HierDatabase::load(require(&common.db, "--db")?)?;
            cmd_retrieve(&model, &db, &query, &tcfg.retrieval)
        }
        Command::Session {
            script,
            window_size,
            retrieval_slots,
            max_new_tokens,
            trigger,
            async_mode,
            scheduler,
            latency,
            save_db,
            retrieval,
        } => {
            retrieval.apply(&mut tcfg.k, &mut tcfg.retrieval);
            let s = &file.session;
            let config = SessionConfig {
                window_size: window_size.unwrap_or(s.window_size),
                retrieval_slots: retrieval_slots.unwrap_or(s.retrieval_slots),
                k: tcfg.k,
                retrieval: tcfg.retrieval.clone(),
                trigger: match trigger {
                    Some(TriggerArg::Always) => TriggerMode::Always,
                    Some(TriggerArg::Token) => TriggerMode::Token,
                    None => s.trigger,
                },
                max_new_tokens: max_new_tokens.unwrap_or(s.max_new_tokens),
            };
            let async_on = async_mode.map_or(s.async_on, |t| t == Toggle::On);
            let sched: Option<Box<dyn Scheduler>> = async_on.then(|| -> Box<dyn Scheduler> {
                match scheduler {
                    SchedulerArg::Thread => Box::new(ThreadScheduler::default()),
                    SchedulerArg::Immediate => Box::new(ImmediateScheduler::default()),
                    SchedulerArg::Delayed => Box::new(DelayedScheduler::new(latency)),
                }
            });
            let model = load_model(common)?;
            cmd_session(model, common.db.as_deref(), config, sched, script.as_deref(), save_db.as_deref())
        }
        Command::Cost { n, k, d, t } => {
            let model = match &common.checkpoint {
                Some(_) => Some(load_model(common)?),
                None => None,
            };
            cmd_cost(n, k, d, t, model.as_ref())
        }
    }
}

/// Desk-scale ICL recipe matched to the vocabulary.
fn default_train_config(vocab: &VocabSpec) -> TrainConfig {
    TrainConfig::icl_recipe(vocab.vocab_size())
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| usage(format!("{flag} is required")))
}

fn load_model(common: &Common) -> Result<Transformer, Failure> {
    Ok(Transformer::load(require(&common.checkpoint, "--checkpoint")?)?)
}

fn gen_data(out: &Path, seed: u64, n_train: usize, n_test: usize, vocab: &VocabSpec) -> CmdResult {
    let ds = gen_icl_dataset(seed, n_train, n_test, vocab)?;
    fs::create_dir_all(out).map_err(|e| data_error(format!("{}: {e}", out.display())))?;
    write_jsonl(out.join("train.jsonl"), &ds.train)?;
    write_jsonl(out.join("test.jsonl"), &ds.test)?;
    let stats = serde_json::to_string_pretty(&ds.stats).map_err(Error::from)?;
    fs::write(out.join("stats.json"), format!("{stats}\n")).map_err(Error::from)?;
    if n_test == 0 {
        eprintln!("warning: the test split is empty");
    }
    println!("train samples        {}", ds.stats.n_train);
    println!("test samples         {}", ds.stats.n_test);
    println!("mean context tokens  {:.2}", ds.stats.mean_full_context_len);
    println!("answer vocabulary    {}", ds.stats.answer_vocab);
    println!("held-out family      {}", ds.stats.heldout_family);
    println!("vocabulary size      {}", vocab.vocab_size());
    Ok(json!({ "stats": ds.stats, "vocab_size": vocab.vocab_size(), "out": out }))
}

fn cmd_train(data: &Path, cfg: &TrainConfig, out: &Path, metrics: Option<&Path>) -> CmdResult {
    let train_set = read_jsonl(data.join("train.jsonl"))?;
    let test_set = read_jsonl(data.join("test.jsonl")).unwrap_or_default();
    let mut log = match metrics {
        Some(p) => Some(io::BufWriter::new(
            fs::File::create(p).map_err(|e| data_error(format!("{}: {e}", p.display())))?,
        )),
        None => None,
    };
    let mut log_error = None;
    let outcome = train(cfg, None, &train_set, &test_set, |r| {
        if let Some(w) = log.as_mut() {
            use std::io::Write;
            let line = serde_json::to_string(r).expect("records serialize");
            if let Err(e) = writeln!(w, "{line}") {
                log_error.get_or_insert(e);
            }
        }
        match r {
            MetricRecord::Pretrain { step, loss, .. } if (step + 1) % 500 == 0 => {
                println!("pretrain step {}: loss {loss:.4}", step + 1);
            }
            MetricRecord::Epoch {
                epoch,
                train_loss,
                accuracy,
                match_rate,
            } => {
                println!("epoch {epoch}: train loss {train_loss:.4}, held-out accuracy {accuracy:.3}, match rate {match_rate:.3}");
            }
            _ => {}
        }
    })?;
    drop(log);
    if let Some(e) = log_error {
        return Err(data_error(format!("writing metrics: {e}")));
    }
    outcome.model.save(out)?;
    println!("checkpoint written to {}", out.display());
    let count = |f: fn(&MetricRecord) -> bool| outcome.history.iter().filter(|r| f(r)).count();
    let steps = count(|r| matches!(r, MetricRecord::Step { .. }));
    let pretrain_steps = count(|r| matches!(r, MetricRecord::Pretrain { .. }));
    if let Some(d) = &outcome.diverged {
        eprintln!("training diverged at step {}; kept the last good weights", d.step);
        return Err(Error::Diverged {
            step: d.step,
            loss: d.loss,
        }
        .into());
    }
    Ok(json!({
        "checkpoint": out,
        "steps": steps,
        "pretrain_steps": pretrain_steps,
        "parameters": outcome.model.num_parameters(),
        "epochs": outcome.history.iter().filter(|r| matches!(r, MetricRecord::Epoch { .. })).collect::<Vec<_>>(),
    }))
}

fn cmd_eval(model: &Transformer, data: &Path, cfg: &TrainConfig, limit: Option<usize>, traces: bool) -> CmdResult {
    let mut test_set = read_jsonl(data.join("test.jsonl"))?;
    if let Some(n) = limit {
        test_set.truncate(n);
    }
    if test_set.is_empty() {
        return Err(data_error("the test split is empty"));
    }
    let report = evaluate(
        model,
        &test_set,
        &EvalOptions {
            k: cfg.k,
            retrieval: cfg.retrieval.clone(),
            baselines: true,
            keep_samples: true,
        },
    )?;
    print!("{}", report.table());
    let mut value = serde_json::to_value(&report).map_err(Error::from)?;
    if !traces {
        for s in value["samples"].as_array_mut().into_iter().flatten() {
            if let Some(obj) = s.as_object_mut() {
                obj.remove("trace");
            }
        }
    }
    Ok(value)
}

fn parse_tokens(line: &str) -> Result<Vec<u32>, Failure> {
    line.split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| data_error(format!("bad token id {t:?}"))))
        .collect()
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<u32>>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| data_error(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_tokens)
        .collect()
}

fn cmd_build_db(model: &Transformer, context: &Path, chunk_len: Option<usize>, k: usize, out: &Path) -> CmdResult {
    let lines = read_token_lines(context)?;
    let chunks = match chunk_len {
        Some(n) => chunk_context(&lines.concat(), n)?,
        None => lines,
    };
    if chunks.is_empty() {
        return Err(data_error("the context file holds no tokens"));
    }
    let max = model.config().max_positions;
    if let Some(c) = chunks.iter().find(|c| c.len() > max) {
        return Err(usage(format!(
            "a chunk of {} tokens exceeds the model's {max} positions",
            c.len()
        )));
    }
    let mut db = HierDatabase::new(k, model.config().d_model, model.fingerprint()?);
    let mut shapes = Vec::new();
    for c in &chunks {
        let h = build_hierarchy(model, c, k)?;
        let lens: Vec<usize> = (0..h.levels.len()).map(|l| h.level_len(l)).collect();
        let id = db.put_chunk(h)?;
        println!("chunk {id}: {} tokens, level lengths {lens:?}", c.len());
        shapes.push(json!({ "id": id, "tokens": c.len(), "level_lengths": lens }));
    }
    db.save(out)?;
    println!("{} chunks written to {}", db.len(), out.display());
    Ok(json!({ "db": out, "k": k, "chunks": shapes }))
}

/// Widest level a full descent can visit; a larger C makes the descent dense.
fn max_level_width(db: &HierDatabase) -> usize {
    let depth = db.iter().map(|(_, h)| h.depth()).max().unwrap_or(0);
    (0..=depth)
        .map(|s| db.iter().map(|(_, h)| h.level_len(h.depth().saturating_sub(s))).sum::<usize>())
        .max()
        .unwrap_or(0)
}

fn cmd_retrieve(model: &Transformer, db: &HierDatabase, query: &Path, cfg: &RetrievalConfig) -> CmdResult {
    db.check_fingerprint(model.fingerprint()?)?;
    let tokens = read_token_lines(query)?.concat();
    let r = retrieve_from_db(model, db, &tokens, cfg)?;
    let width = max_level_width(db);
    let dense = cfg.top_c >= width;
    if dense {
        println!("top_c {} covers the widest level ({width}): dense descent", cfg.top_c);
    }
    for (i, t) in r.traces.iter().enumerate() {
        println!("retrieval token {i}");
        print!("{}", format_trace(t));
    }
    let rows = r.prefix.shape()[0];
    let norms: Vec<f64> = (0..rows)
        .map(|i| r.prefix.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    println!("soft prefix: {rows} x {}, row norms {norms:.4?}", r.prefix.shape()[1]);
    Ok(json!({ "dense": dense, "traces": r.traces, "prefix_rows": rows, "prefix_norms": norms }))
}

#[derive(Serialize)]
struct SessionSummary {
    chunks: usize,
    live_tokens: usize,
    pending: bool,
}

fn cmd_session(
    model: Transformer,
    db_path: Option<&Path>,
    config: SessionConfig,
    sched: Option<Box<dyn Scheduler>>,
    script: Option<&Path>,
    save_db: Option<&Path>,
) -> CmdResult {
    let db = match db_path {
        Some(p) => HierDatabase::load(p)?,
        None => HierDatabase::new(config.k, model.config().d_model, model.fingerprint()?),
    };
    let mut session = Session::new(Arc::new(model), db, config, sched)?;
    match script {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| data_error(format!("{}: {e}", p.display())))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let turn: Turn = serde_json::from_str(line)
                    .map_err(|e| data_error(format!("{}:{}: {e}", p.display(), i + 1)))?;
                session.turn(&turn)?;
            }
        }
        None => {
            // Interactive: one turn per line; a trailing `!n` injects CALL_RETRIEVAL at step n.
            for line in io::stdin().lock().lines() {
                let line = line.map_err(|e| data_error(e.to_string()))?;
                let (ids, trigger) = match line.split_once('!') {
                    Some((ids, n)) => (ids, Some(n.trim().parse().map_err(|_| data_error("bad trigger step"))?)),
                    None => (line.as_str(), None),
                };
                let reply = session.turn(&Turn {
                    tokens: parse_tokens(ids)?,
                    trigger_at: trigger,
                })?;
                println!("> {reply:?}");
            }
        }
    }
    session.finish()?;
    print!("{}", format_transcript(session.transcript()));
    let summary = SessionSummary {
        chunks: session.state().db.len(),
        live_tokens: session.state().live.len(),
        pending: session.state().pending,
    };
    let (transcript, db) = session.into_parts();
    if let Some(p) = save_db {
        db.save(p)?;
    }
    Ok(json!({ "summary": summary, "transcript": transcript }))
}

fn cmd_cost(n: usize, k: usize, d: usize, t: Option<usize>, model: Option<&Transformer>) -> CmdResult {
    if n == 0 || k < 2 || d == 0 || t == Some(0) {
        return Err(usage("n, d and t must be positive and k at least 2"));
    }
    let mut report = CostReport::new(n, k, d);
    if let Some(t) = t {
        report.activation_estimate = hmem_core::trainer::activation_estimate(t, n, d);
    }
    println!("levels L             {}", report.levels);
    println!("forwards 2L+2        {}", report.forwards_per_sample);
    println!("activation estimate  {}", report.activation_estimate);
    let instrumented = match model {
        Some(m) => {
            let c = instrumented_forwards(m, n, k)?;
            println!(
                "instrumented         {} (build {}, encode {}, descent {})",
                c.retrieval_total(),
                c.build,
                c.encode,
                c.descent
            );
            Some(c)
        }
        None => None,
    };
    Ok(json!({ "report": report, "instrumented": instrumented }))
}
