//! `ragforge` command-line driver.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures. `RAGFORGE_THREADS` caps every worker pool.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ragforge::checkpoint::Checkpoint;
use ragforge::config::RunConfig;
use ragforge::corpus::{self, Chunk, QaExample, SynthConfig};
use ragforge::index::{load_snapshot, save_snapshot, IndexKind, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
use ragforge::refresher::{rebuild, reencode_kb, RefreshConfig};
use ragforge::trainer::{compare_modes, evaluate, train, CompareReport, MetricsLog};

const THREADS_ENV: &str = "RAGFORGE_THREADS";

#[derive(Parser)]
#[command(name = "ragforge", version, about = "Retrieval-augmented QA trainer with live index refresh")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fact corpus and its questions.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint, metrics log and final index.
    Train(RunArgs),
    /// Evaluate a checkpoint and print the report as JSON.
    Eval(EvalArgs),
    /// Train frozen and end-to-end models for several seeds and compare.
    Compare(CompareArgs),
    /// Print the header fields of an index snapshot file.
    InspectIndex(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    entities: usize,
    #[arg(long)]
    relations: usize,
    #[arg(long)]
    facts_per_passage: usize,
    /// Number of facts [default: min(4 × entities, entities × relations)]
    #[arg(long)]
    facts: Option<usize>,
    #[arg(long, default_value_t = SynthConfig::default().vocab_size)]
    vocab: usize,
    /// Output directory for corpus.jsonl and qa.jsonl.
    #[arg(long)]
    out: PathBuf,
}

/// Training options. Each flag overrides the same key in `--config`.
#[derive(Args)]
struct RunArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    qa: Option<String>,
    #[arg(long)]
    eval_qa: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// frozen or end2end
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    refresh_every: Option<String>,
    /// sync or async
    #[arg(long)]
    refresh_mode: Option<String>,
    #[arg(long)]
    refresh_workers: Option<String>,
    /// exact or ivf
    #[arg(long)]
    index: Option<String>,
    #[arg(long)]
    clusters: Option<String>,
    #[arg(long)]
    nprobe: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    enc_dim: Option<String>,
    #[arg(long)]
    gen_dim: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    log_timing: bool,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    qa: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    nprobe: usize,
    #[arg(long, default_value = "exact")]
    index: String,
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 8)]
    max_decode_len: usize,
    #[arg(long, default_value_t = corpus::DEFAULT_CHUNK_WORDS)]
    chunk_words: usize,
    #[arg(long)]
    prepend_title: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Snapshot file.
    path: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(ragforge::Error),
}

impl From<ragforge::Error> for Failure {
    fn from(e: ragforge::Error) -> Self {
        match e {
            ragforge::Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::InspectIndex(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Worker cap from the environment, if set.
fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(ragforge::Error::io(path, e)))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(ragforge::Error::io(path, e))
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let facts = a
        .facts
        .unwrap_or_else(|| (4 * a.entities).min(a.entities * a.relations));
    let cfg = SynthConfig {
        seed: a.seed,
        n_entities: a.entities,
        n_relations: a.relations,
        n_facts: facts,
        facts_per_passage: a.facts_per_passage,
        vocab_size: a.vocab,
        ..SynthConfig::default()
    };
    let (docs, qa) =
        corpus::synth_world(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let corpus_path = a.out.join("corpus.jsonl");
    let mut w = create_file(&corpus_path)?;
    corpus::write_corpus(&mut w, &docs)
        .and_then(|_| w.flush())
        .map_err(io_err(&corpus_path))?;
    let qa_path = a.out.join("qa.jsonl");
    let mut w = create_file(&qa_path)?;
    corpus::write_qa(&mut w, &qa)
        .and_then(|_| w.flush())
        .map_err(io_err(&qa_path))?;
    println!(
        "wrote {} documents to {} and {} questions to {}",
        docs.len(),
        corpus_path.display(),
        qa.len(),
        qa_path.display()
    );
    Ok(())
}

impl RunArgs {
    fn pairs(&self) -> CliResult<Vec<(String, String)>> {
        let mut out: Vec<(String, String)> = [
            ("corpus", &self.corpus),
            ("qa", &self.qa),
            ("eval_qa", &self.eval_qa),
            ("out", &self.out),
            ("mode", &self.mode),
            ("k", &self.k),
            ("steps", &self.steps),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("refresh_every", &self.refresh_every),
            ("refresh_mode", &self.refresh_mode),
            ("refresh_workers", &self.refresh_workers),
            ("index", &self.index),
            ("clusters", &self.clusters),
            ("nprobe", &self.nprobe),
            ("eval_every", &self.eval_every),
            ("vocab", &self.vocab),
            ("enc_dim", &self.enc_dim),
            ("gen_dim", &self.gen_dim),
            ("hidden", &self.hidden),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
        if self.log_timing {
            out.push(("log_timing".into(), "true".into()));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// File first, then flags; validated before anything is written.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Failure::Usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                ragforge::config::parse_pairs(&text)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
            }
            None => Vec::new(),
        };
        pairs.extend(self.pairs()?);
        let mut cfg = RunConfig::default();
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let cap = thread_cap()?;
        if let Some(cap) = cap {
            let w = &mut cfg.train.refresh.num_workers;
            *w = (*w).min(cap);
        }
        let errs = cfg.validate(true);
        if !errs.is_empty() {
            return Err(ragforge::Error::Config(errs).into());
        }
        Ok(cfg)
    }
}

struct Data {
    chunks: Vec<Chunk>,
    train: Vec<QaExample>,
    eval: Vec<QaExample>,
}

fn load_data(cfg: &RunConfig) -> CliResult<Data> {
    let vocab = cfg.dims.vocab;
    let docs = corpus::load_corpus(cfg.corpus.as_ref().expect("validated"))?;
    let chunks = corpus::chunk_corpus(&docs, cfg.chunk_words, vocab, cfg.prepend_title);
    if chunks.is_empty() {
        return Err(Failure::Runtime(ragforge::Error::InvalidArgument(
            "corpus produced no chunks".into(),
        )));
    }
    let train = corpus::load_qa(cfg.qa.as_ref().expect("validated"), vocab)?;
    let eval = match &cfg.eval_qa {
        Some(p) => corpus::load_qa(p, vocab)?,
        None => train.clone(),
    };
    Ok(Data { chunks, train, eval })
}

fn cmd_train(a: RunArgs) -> CliResult {
    let cfg = a.resolve()?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("out directory is required".into()))?;
    let data = load_data(&cfg)?;
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let metrics_path = out.join("metrics.jsonl");
    let sink = create_file(&metrics_path)?;
    let outcome = train(
        &cfg.train,
        cfg.dims,
        data.chunks,
        &data.train,
        &data.eval,
        MetricsLog::streaming(Box::new(sink)),
    )?;
    let ckpt = Checkpoint {
        params: outcome.params,
        seed: cfg.train.seed,
        step: cfg.train.steps,
        mode: cfg.train.mode,
    };
    ckpt.save(out.join("checkpoint"))?;
    save_snapshot(&outcome.final_snapshot, out.join("index.rgf"))?;
    println!("{}", serde_json::to_string(&outcome.final_eval).expect("report serializes"));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let kind: IndexKind = a.index.parse().map_err(|e: ragforge::Error| Failure::Usage(e.to_string()))?;
    let mut errs = Vec::new();
    for (name, v) in [
        ("k", a.k),
        ("nprobe", a.nprobe),
        ("clusters", a.clusters),
        ("max_decode_len", a.max_decode_len),
        ("chunk_words", a.chunk_words),
    ] {
        if v == 0 {
            errs.push(format!("{name} must be at least 1"));
        }
    }
    for (name, p) in [("corpus", &a.corpus), ("qa", &a.qa)] {
        if !p.is_file() {
            errs.push(format!("{name} file {} does not exist", p.display()));
        }
    }
    if !errs.is_empty() {
        return Err(ragforge::Error::Config(errs).into());
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let vocab = ckpt.params.dims().vocab;
    let docs = corpus::load_corpus(&a.corpus)?;
    let chunks = corpus::chunk_corpus(&docs, a.chunk_words, vocab, a.prepend_title);
    let qa = corpus::load_qa(&a.qa, vocab)?;
    let workers = thread_cap()?.unwrap_or_else(default_parallelism);
    let passage = &ckpt.params.encoders.passage;
    let refresh = RefreshConfig {
        index_kind: kind,
        clusters: a.clusters,
        ..RefreshConfig::default()
    };
    let snapshot = rebuild(
        reencode_kb(passage, &chunks, workers)?,
        chunks.iter().map(|c| c.chunk_id).collect(),
        0,
        passage.fingerprint(),
        &refresh,
    )?;
    let mut report = evaluate(&ckpt.params, &snapshot, &chunks, &qa, a.k, a.nprobe, a.max_decode_len)?;
    report.step = ckpt.step;
    report.mode = Some(ckpt.mode);
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> CliResult {
    if a.seeds.is_empty() {
        return Err(Failure::Usage("--seeds needs at least one seed".into()));
    }
    let cfg = a.run.resolve()?;
    let data = load_data(&cfg)?;
    let parallel = thread_cap()?.unwrap_or_else(default_parallelism);
    let report = compare_modes(
        &cfg.train,
        cfg.dims,
        &data.chunks,
        &data.train,
        &data.eval,
        &a.seeds,
        parallel,
    )?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", render_table(&report, cfg.train.k));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

fn render_table(r: &CompareReport, k: usize) -> String {
    let mut s = format!(
        "{:<8} {:>6} {:>8} {:>10} {:>8}\n",
        "mode",
        "seed",
        "EM",
        format!("recall@{k}"),
        "EM gap"
    );
    for row in &r.rows {
        let em = |mode| {
            r.rows
                .iter()
                .find(|o| o.seed == row.seed && o.mode == mode)
                .map(|o| o.exact_match_percent)
        };
        let gap = match (em(ragforge::trainer::TrainMode::End2End), em(ragforge::trainer::TrainMode::Frozen)) {
            (Some(e), Some(f)) => format!("{:+.2}", e - f),
            _ => "-".into(),
        };
        s.push_str(&format!(
            "{:<8} {:>6} {:>8.2} {:>10} {:>8}\n",
            row.mode.as_str(),
            row.seed,
            row.exact_match_percent,
            fmt_opt(row.retrieval_recall_at_k),
            gap
        ));
    }
    s.push_str(&format!(
        "median EM: frozen {:.2}, end2end {:.2}, gap {:+.2}\n",
        r.median_em_frozen, r.median_em_end2end, r.em_gap
    ));
    s.push_str(&format!(
        "median recall@{k}: frozen {}, end2end {}\n",
        fmt_opt(r.median_recall_frozen),
        fmt_opt(r.median_recall_end2end)
    ));
    s
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    let snap = load_snapshot(&a.path)?;
    println!("magic {}", String::from_utf8_lossy(SNAPSHOT_MAGIC));
    println!("version {SNAPSHOT_VERSION}");
    println!("generation {}", snap.generation());
    println!("kind {}", snap.kind().as_str());
    println!("n {}", snap.len());
    println!("dim {}", snap.dim());
    println!("clusters {}", snap.num_clusters());
    println!("fingerprint {:016x}", snap.encoder_fingerprint());
    Ok(())
}
