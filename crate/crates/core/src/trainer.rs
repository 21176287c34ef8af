//! Training loop, exact-match evaluation, and frozen vs end-to-end
//! comparison.
//!
//! Each step retrieves candidates from the newest published snapshot (whose
//! embeddings may be stale), re-encodes those candidates with the current
//! passage encoder to score them, and applies one plain SGD update. In
//! frozen mode the passage encoder is never updated.

use std::io::Write;
use std::time::Instant;

use parking_lot::Mutex;

use rand::Rng;
use serde::Serialize;

use crate::corpus::{Chunk, QaExample};
use crate::error::{Error, Result};
use crate::index::{IndexSnapshot, SearchResult};
use crate::model::{accumulate_backward, forward, ExampleForward, ModelDims, ModelGrads, ModelParams};
use crate::refresher::{RefreshConfig, RefreshEvent, RefreshState, Refresher};
use crate::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Passage encoder fixed; question encoder and generator train.
    Frozen,
    /// All three components train.
    End2End,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Frozen => "frozen",
            TrainMode::End2End => "end2end",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(TrainMode::Frozen),
            "end2end" => Ok(TrainMode::End2End),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub k: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub refresh: RefreshConfig,
    pub nprobe: usize,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub max_decode_len: usize,
    /// Uniform init range of the encoders.
    pub encoder_init_scale: f64,
    /// Uniform init range of the generator.
    pub generator_init_scale: f64,
    /// Include wall-clock fields in the metrics log. Off by default so that
    /// sync-mode logs are byte-for-byte reproducible.
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::End2End,
            k: 5,
            steps: 2000,
            batch_size: 8,
            lr: 0.5,
            refresh: RefreshConfig::default(),
            nprobe: 4,
            seed: 0,
            eval_every: 0,
            max_decode_len: 8,
            encoder_init_scale: 1.0,
            generator_init_scale: 0.5,
            log_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.k < 1 {
            errs.push("k must be at least 1".into());
        }
        if self.steps < 1 {
            errs.push("steps must be at least 1".into());
        }
        if self.batch_size < 1 {
            errs.push("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push("lr must be a finite non-negative number".into());
        }
        if self.nprobe < 1 {
            errs.push("nprobe must be at least 1".into());
        }
        if self.max_decode_len < 1 {
            errs.push("max_decode_len must be at least 1".into());
        }
        for (name, v) in [
            ("encoder_init_scale", self.encoder_init_scale),
            ("generator_init_scale", self.generator_init_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive"));
            }
        }
        errs.extend(self.refresh.validate());
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub snapshot_generation_used: u64,
    /// Retrieved chunk ids per batch example.
    pub retrieved: Vec<Vec<u32>>,
    /// Whether each example's gold chunk was retrieved; empty without gold ids.
    pub gold_retrieved: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub mode: Option<TrainMode>,
    pub k: usize,
    pub n_examples: usize,
    pub exact_match_percent: f64,
    /// Fraction of examples whose gold chunk is among the top-k.
    pub retrieval_recall_at_k: Option<f64>,
    /// Fraction of examples whose gold chunk has the highest posterior.
    pub top1_accuracy: Option<f64>,
    pub snapshot_generation: u64,
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MetricsRecord {
    Step(StepRecord),
    Eval(EvalReport),
    Refresh(RefreshEvent),
}

/// In-memory metrics with optional streaming to a JSON Lines writer.
#[derive(Default)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every record is written and flushed as it is pushed.
    pub fn streaming(sink: Box<dyn Write + Send>) -> Self {
        Self {
            records: Vec::new(),
            sink: Some(sink),
        }
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            let line = serde_json::to_string(&record).expect("metrics serialize");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("metrics log", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("metrics serialize"));
            s.push('\n');
        }
        s
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalReport> {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Eval(e) => Some(e),
            _ => None,
        })
    }

    pub fn refreshes(&self) -> impl Iterator<Item = &RefreshEvent> {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Refresh(e) => Some(e),
            _ => None,
        })
    }
}

impl std::fmt::Debug for MetricsLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricsLog")
            .field("records", &self.records.len())
            .finish()
    }
}

fn to_query(q: &[f64]) -> Vec<f32> {
    q.iter().map(|&x| x as f32).collect()
}

/// Top-k MIPS over the snapshot with the current question encoder.
pub fn retrieve(
    params: &ModelParams,
    snapshot: &IndexSnapshot,
    question: &[u32],
    k: usize,
    nprobe: usize,
) -> Result<SearchResult> {
    let q = params.encoders.question.encode(question)?;
    let nprobe = nprobe.min(snapshot.num_clusters().max(1));
    snapshot.search(&to_query(&q), k, nprobe)
}

fn gather<'a>(chunks: &'a [Chunk], ids: &[u32]) -> Result<Vec<(u32, &'a [u32])>> {
    ids.iter()
        .map(|&id| {
            chunks
                .get(id as usize)
                .filter(|c| c.chunk_id == id)
                .map(|c| (id, c.token_ids.as_slice()))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown chunk id {id}")))
        })
        .collect()
}

/// Loss of one example against fixed candidates, scored with fresh
/// encodings. Independent of any snapshot.
pub fn example_forward(
    params: &ModelParams,
    chunks: &[Chunk],
    candidates: &[u32],
    example: &QaExample,
) -> Result<ExampleForward> {
    forward(
        params,
        &example.question_token_ids,
        &gather(chunks, candidates)?,
        &example.answer_token_ids,
    )
}

/// One SGD step over `batch`. Reuses `grads` as scratch space.
pub fn train_step(
    params: &mut ModelParams,
    grads: &mut ModelGrads,
    batch: &[&QaExample],
    snapshot: &IndexSnapshot,
    chunks: &[Chunk],
    config: &TrainConfig,
    step: u64,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let started = Instant::now();
    let end2end = config.mode == TrainMode::End2End;
    grads.clear();
    let weight = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut retrieved = Vec::with_capacity(batch.len());
    let mut gold_retrieved = Vec::new();
    for ex in batch {
        let hits = retrieve(params, snapshot, &ex.question_token_ids, config.k, config.nprobe)?;
        let fwd = accumulate_backward(
            params,
            &ex.question_token_ids,
            &gather(chunks, &hits.chunk_ids)?,
            &ex.answer_token_ids,
            weight,
            end2end,
            grads,
        )?;
        loss += weight * fwd.loss;
        if let Some(gold) = ex.gold_chunk_id {
            gold_retrieved.push(hits.chunk_ids.contains(&gold));
        }
        retrieved.push(hits.chunk_ids);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}")));
    }
    params.encoders.question.sgd_step(&grads.question, config.lr);
    params.generator.sgd_step(&grads.generator, config.lr);
    if end2end {
        params.encoders.passage.sgd_step(&grads.passage, config.lr);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("parameters after step {step}")));
    }
    Ok(StepRecord {
        step,
        loss,
        snapshot_generation_used: snapshot.generation(),
        retrieved,
        gold_retrieved,
        timing_ms: config
            .log_timing
            .then(|| started.elapsed().as_secs_f64() * 1e3),
    })
}

/// Greedy-decodes every example against its highest-posterior retrieved
/// chunk and scores exact token-sequence match.
pub fn evaluate(
    params: &ModelParams,
    snapshot: &IndexSnapshot,
    chunks: &[Chunk],
    eval_set: &[QaExample],
    k: usize,
    nprobe: usize,
    max_decode_len: usize,
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let gen = &params.generator;
    let mut exact = 0usize;
    let mut with_gold = 0usize;
    let mut recalled = 0usize;
    let mut top1 = 0usize;
    for ex in eval_set {
        let hits = retrieve(params, snapshot, &ex.question_token_ids, k, nprobe)?;
        let cands = gather(chunks, &hits.chunk_ids)?;
        let q = params.encoders.question.encode(&ex.question_token_ids)?;
        let docs = cands
            .iter()
            .map(|(_, t)| params.encoders.passage.encode(t))
            .collect::<Result<Vec<_>>>()?;
        let post = crate::model::doc_posterior(&q, &docs, &hits.chunk_ids)?;
        let best = post.argmax();
        let predicted = gen.greedy_decode(
            &gen.context(&ex.question_token_ids)?,
            &gen.context(cands[best].1)?,
            max_decode_len,
        )?;
        if predicted == ex.answer_token_ids {
            exact += 1;
        }
        if let Some(gold) = ex.gold_chunk_id {
            with_gold += 1;
            if hits.chunk_ids.contains(&gold) {
                recalled += 1;
            }
            if hits.chunk_ids[best] == gold {
                top1 += 1;
            }
        }
    }
    let n = eval_set.len();
    let frac = |x: usize| (with_gold > 0).then(|| x as f64 / with_gold as f64);
    Ok(EvalReport {
        step: 0,
        mode: None,
        k,
        n_examples: n,
        exact_match_percent: 100.0 * exact as f64 / n as f64,
        retrieval_recall_at_k: frac(recalled),
        top1_accuracy: frac(top1),
        snapshot_generation: snapshot.generation(),
    })
}

/// Result of a full training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: MetricsLog,
    pub final_eval: EvalReport,
    pub refresh: RefreshState,
    pub final_snapshot: std::sync::Arc<IndexSnapshot>,
}

/// Seeded with-replacement batch schedule; depends only on the seed and the
/// training-set size, so both modes see identical batches.
pub struct BatchSampler {
    rng: rand_chacha::ChaCha8Rng,
    n: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n: usize) -> Self {
        Self {
            rng: seeded_rng(seed, "batches"),
            n,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.rng.random_range(0..self.n)).collect()
    }
}

/// Runs the full loop: initial index build (generation 1), then
/// `steps` SGD steps, each followed by a refresh-controller tick.
pub fn train(
    config: &TrainConfig,
    dims: ModelDims,
    chunks: Vec<Chunk>,
    train_set: &[QaExample],
    eval_set: &[QaExample],
    metrics: MetricsLog,
) -> Result<TrainOutcome> {
    let params = ModelParams::init(
        config.seed,
        dims,
        config.encoder_init_scale,
        config.generator_init_scale,
    );
    train_from(config, params, chunks, train_set, eval_set, metrics)
}

/// As [`train`], starting from the given parameters.
pub fn train_from(
    config: &TrainConfig,
    mut params: ModelParams,
    chunks: Vec<Chunk>,
    train_set: &[QaExample],
    eval_set: &[QaExample],
    mut metrics: MetricsLog,
) -> Result<TrainOutcome> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut refresher = Refresher::new(config.refresh, chunks, &params.encoders.passage)?;
    let mut grads = ModelGrads::zeros_like(&params);
    let mut sampler = BatchSampler::new(config.seed, train_set.len());

    let log_events = |refresher: &Refresher, metrics: &mut MetricsLog| -> Result<()> {
        for mut ev in refresher.drain_events() {
            if !config.log_timing {
                ev.reencode_ms = 0;
                ev.rebuild_ms = 0;
            }
            metrics.push(MetricsRecord::Refresh(ev))?;
        }
        Ok(())
    };
    let run_eval = |params: &ModelParams, refresher: &Refresher, step: u64| -> Result<EvalReport> {
        let snapshot = refresher.poll_latest();
        let mut report = evaluate(
            params,
            &snapshot,
            refresher.chunks(),
            eval_set,
            config.k,
            config.nprobe,
            config.max_decode_len,
        )?;
        report.step = step;
        report.mode = Some(config.mode);
        Ok(report)
    };

    for step in 1..=config.steps {
        let snapshot = refresher.poll_latest();
        let batch: Vec<&QaExample> = sampler
            .next_batch(config.batch_size)
            .into_iter()
            .map(|i| &train_set[i])
            .collect();
        let record = train_step(
            &mut params,
            &mut grads,
            &batch,
            &snapshot,
            refresher.chunks(),
            config,
            step,
        )?;
        metrics.push(MetricsRecord::Step(record))?;
        refresher.on_step(step, &params.encoders.passage)?;
        log_events(&refresher, &mut metrics)?;
        if config.eval_every > 0 && step % config.eval_every == 0 && step != config.steps {
            let report = run_eval(&params, &refresher, step)?;
            metrics.push(MetricsRecord::Eval(report))?;
        }
    }
    refresher.wait_idle()?;
    log_events(&refresher, &mut metrics)?;
    let final_eval = run_eval(&params, &refresher, config.steps)?;
    metrics.push(MetricsRecord::Eval(final_eval.clone()))?;
    Ok(TrainOutcome {
        params,
        metrics,
        final_eval,
        refresh: refresher.state(),
        final_snapshot: refresher.poll_latest(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub mode: TrainMode,
    pub seed: u64,
    pub exact_match_percent: f64,
    pub retrieval_recall_at_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub median_em_frozen: f64,
    pub median_em_end2end: f64,
    /// End-to-end minus frozen median EM.
    pub em_gap: f64,
    pub median_recall_frozen: Option<f64>,
    pub median_recall_end2end: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains frozen and end-to-end models for every seed on identical data and
/// batch schedules. Up to `parallel` runs execute at once; the report does
/// not depend on that number.
pub fn compare_modes(
    base: &TrainConfig,
    dims: ModelDims,
    chunks: &[Chunk],
    train_set: &[QaExample],
    eval_set: &[QaExample],
    seeds: &[u64],
    parallel: usize,
) -> Result<CompareReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let jobs: Vec<(u64, TrainMode)> = seeds
        .iter()
        .flat_map(|&seed| [(seed, TrainMode::Frozen), (seed, TrainMode::End2End)])
        .collect();
    let run = |&(seed, mode): &(u64, TrainMode)| -> Result<CompareRow> {
        let cfg = TrainConfig { mode, seed, ..*base };
        let out = train(&cfg, dims, chunks.to_vec(), train_set, eval_set, MetricsLog::new())?;
        Ok(CompareRow {
            mode,
            seed,
            exact_match_percent: out.final_eval.exact_match_percent,
            retrieval_recall_at_k: out.final_eval.retrieval_recall_at_k,
        })
    };
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CompareRow>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..parallel.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let row = run(job);
                results.lock()[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let pick = |mode: TrainMode, f: &dyn Fn(&CompareRow) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = rows.iter().filter(|r| r.mode == mode).map(f).collect();
        v.map(|v| median(&v))
    };
    let median_em_frozen = pick(TrainMode::Frozen, &|r| Some(r.exact_match_percent)).unwrap();
    let median_em_end2end = pick(TrainMode::End2End, &|r| Some(r.exact_match_percent)).unwrap();
    Ok(CompareReport {
        median_recall_frozen: pick(TrainMode::Frozen, &|r| r.retrieval_recall_at_k),
        median_recall_end2end: pick(TrainMode::End2End, &|r| r.retrieval_recall_at_k),
        em_gap: median_em_end2end - median_em_frozen,
        median_em_frozen,
        median_em_end2end,
        rows,
    })
}
