//! Periodic knowledge-base re-encoding and re-indexing.
//!
//! Every `N` training steps the controller deep-copies the current passage
//! encoder and, on a background thread, re-encodes every chunk and rebuilds
//! the index from that copy. The finished snapshot replaces the published
//! one with a single pointer swap, so readers see either the old or the new
//! snapshot in full. A trigger that arrives while a refresh is still running
//! is counted and dropped, never queued.
//!
//! Training reads whatever [`Refresher::poll_latest`] returns and never waits
//! for a refresh in async mode; the index it searches may be up to
//! `N` steps plus one refresh duration behind the encoder that scores the
//! retrieved chunks.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::corpus::Chunk;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::index::{Embeddings, IndexKind, IndexSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshMode {
    /// The refresh completes inside the triggering step.
    Sync,
    /// The refresh runs on a background thread.
    Async,
}

impl RefreshMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RefreshMode::Sync => "sync",
            RefreshMode::Async => "async",
        }
    }
}

impl std::str::FromStr for RefreshMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(RefreshMode::Sync),
            "async" => Ok(RefreshMode::Async),
            other => Err(Error::InvalidArgument(format!("unknown refresh mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefreshConfig {
    /// When false the initial snapshot is the only one ever published.
    pub enabled: bool,
    pub every_n_steps: u64,
    pub num_workers: usize,
    pub mode: RefreshMode,
    pub index_kind: IndexKind,
    /// IVF cluster count.
    pub clusters: usize,
    /// IVF k-means seed.
    pub seed: u64,
}

impl Default for RefreshConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            every_n_steps: 100,
            num_workers: 1,
            mode: RefreshMode::Sync,
            index_kind: IndexKind::Exact,
            clusters: 16,
            seed: 0,
        }
    }
}

impl RefreshConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.every_n_steps < 1 {
            errs.push("refresh_every must be at least 1".to_string());
        }
        if self.num_workers < 1 {
            errs.push("num_workers must be at least 1".to_string());
        }
        if self.index_kind == IndexKind::Ivf && self.clusters < 1 {
            errs.push("clusters must be at least 1".to_string());
        }
        errs
    }
}

/// Point-in-time view of the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RefreshState {
    pub published_generation: u64,
    pub in_flight: bool,
    /// Fingerprint of the parameters captured by the latest trigger.
    pub captured_fingerprint: Option<u64>,
    pub refreshes_started: u64,
    pub refreshes_completed: u64,
    pub triggers_skipped: u64,
}

/// One line of the refresh log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RefreshEvent {
    pub step: u64,
    pub generation: u64,
    pub capture_fingerprint: u64,
    pub reencode_ms: u64,
    pub rebuild_ms: u64,
    pub skipped: bool,
}

/// What `on_step` did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepAction {
    NotDue,
    Started,
    /// Sync mode: the refresh already published.
    Completed,
    Skipped,
}

/// Test and instrumentation seam, invoked on the refresh thread before
/// re-encoding starts.
pub trait RefreshHook: Send + Sync {
    fn before_reencode(&self, step: u64);
}

/// Sleeps for a fixed duration, simulating an expensive re-encode.
pub struct DelayHook(pub Duration);

impl RefreshHook for DelayHook {
    fn before_reencode(&self, _step: u64) {
        std::thread::sleep(self.0);
    }
}

/// Encodes every chunk with `params`. Workers own disjoint contiguous
/// shards and write preassigned rows, so the result does not depend on
/// `num_workers`.
pub fn reencode_kb(params: &EncoderParams, chunks: &[Chunk], num_workers: usize) -> Result<Embeddings> {
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty knowledge base".into()));
    }
    let dim = params.dim();
    let mut out = Embeddings::new(dim, vec![0.0; chunks.len() * dim])?;
    let workers = num_workers.clamp(1, chunks.len());
    let per = chunks.len().div_ceil(workers);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = chunks
            .chunks(per)
            .zip(out.as_mut_slice().chunks_mut(per * dim))
            .map(|(shard, rows)| {
                scope.spawn(move || -> Result<()> {
                    for (chunk, row) in shard.iter().zip(rows.chunks_mut(dim)) {
                        let e = params.encode(&chunk.token_ids)?;
                        for (dst, x) in row.iter_mut().zip(e) {
                            *dst = x as f32;
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("re-encode worker panicked")?;
        }
        Ok(())
    })?;
    Ok(out)
}

/// Builds the snapshot that follows `prev_generation`.
pub fn rebuild(
    embeddings: Embeddings,
    chunk_ids: Vec<u32>,
    prev_generation: u64,
    encoder_fingerprint: u64,
    config: &RefreshConfig,
) -> Result<IndexSnapshot> {
    let generation = prev_generation + 1;
    match config.index_kind {
        IndexKind::Exact => {
            IndexSnapshot::build_exact(embeddings, chunk_ids, generation, encoder_fingerprint)
        }
        IndexKind::Ivf => {
            let clusters = config.clusters.min(chunk_ids.len());
            IndexSnapshot::build_ivf(
                embeddings,
                chunk_ids,
                generation,
                encoder_fingerprint,
                clusters,
                config.seed,
            )
        }
    }
}

struct Shared {
    latest: RwLock<Arc<IndexSnapshot>>,
    in_flight: AtomicBool,
    started: AtomicU64,
    completed: AtomicU64,
    skipped: AtomicU64,
    captured: Mutex<Option<u64>>,
    failure: Mutex<Option<Error>>,
}

/// Owns the published snapshot and the refresh schedule.
pub struct Refresher {
    config: RefreshConfig,
    chunks: Arc<Vec<Chunk>>,
    chunk_ids: Arc<Vec<u32>>,
    shared: Arc<Shared>,
    events_tx: Sender<RefreshEvent>,
    events_rx: Receiver<RefreshEvent>,
    worker: Option<JoinHandle<()>>,
    hook: Option<Arc<dyn RefreshHook>>,
}

impl Refresher {
    /// Encodes the knowledge base with `initial` and publishes generation 1
    /// before returning.
    pub fn new(config: RefreshConfig, chunks: Vec<Chunk>, initial: &EncoderParams) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let chunk_ids: Vec<u32> = chunks.iter().map(|c| c.chunk_id).collect();
        let embeddings = reencode_kb(initial, &chunks, config.num_workers)?;
        let first = rebuild(embeddings, chunk_ids.clone(), 0, initial.fingerprint(), &config)?;
        let (events_tx, events_rx) = channel();
        Ok(Self {
            config,
            chunks: Arc::new(chunks),
            chunk_ids: Arc::new(chunk_ids),
            shared: Arc::new(Shared {
                latest: RwLock::new(Arc::new(first)),
                in_flight: AtomicBool::new(false),
                started: AtomicU64::new(0),
                completed: AtomicU64::new(0),
                skipped: AtomicU64::new(0),
                captured: Mutex::new(None),
                failure: Mutex::new(None),
            }),
            events_tx,
            events_rx,
            worker: None,
            hook: None,
        })
    }

    pub fn with_hook(mut self, hook: Arc<dyn RefreshHook>) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn config(&self) -> &RefreshConfig {
        &self.config
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// Newest published snapshot. Never waits for an in-flight refresh.
    pub fn poll_latest(&self) -> Arc<IndexSnapshot> {
        self.shared.latest.read().clone()
    }

    pub fn state(&self) -> RefreshState {
        let s = &self.shared;
        RefreshState {
            published_generation: self.poll_latest().generation(),
            in_flight: s.in_flight.load(Ordering::Acquire),
            captured_fingerprint: *s.captured.lock(),
            refreshes_started: s.started.load(Ordering::Relaxed),
            refreshes_completed: s.completed.load(Ordering::Relaxed),
            triggers_skipped: s.skipped.load(Ordering::Relaxed),
        }
    }

    /// Called once per training step with the post-update passage encoder.
    pub fn on_step(&mut self, step: u64, passage: &EncoderParams) -> Result<StepAction> {
        self.take_failure()?;
        if !self.config.enabled || step == 0 || !step.is_multiple_of(self.config.every_n_steps) {
            return Ok(StepAction::NotDue);
        }
        if self.shared.in_flight.swap(true, Ordering::AcqRel) {
            self.shared.skipped.fetch_add(1, Ordering::Relaxed);
            let _ = self.events_tx.send(RefreshEvent {
                step,
                generation: self.poll_latest().generation(),
                capture_fingerprint: passage.fingerprint(),
                reencode_ms: 0,
                rebuild_ms: 0,
                skipped: true,
            });
            return Ok(StepAction::Skipped);
        }
        self.reap_worker();

        let captured = passage.clone();
        let fingerprint = captured.fingerprint();
        *self.shared.captured.lock() = Some(fingerprint);
        self.shared.started.fetch_add(1, Ordering::Relaxed);

        let job = Job {
            step,
            params: captured,
            fingerprint,
            config: self.config,
            chunks: Arc::clone(&self.chunks),
            chunk_ids: Arc::clone(&self.chunk_ids),
            shared: Arc::clone(&self.shared),
            events: self.events_tx.clone(),
            hook: self.hook.clone(),
        };
        match self.config.mode {
            RefreshMode::Sync => {
                job.run();
                self.take_failure()?;
                Ok(StepAction::Completed)
            }
            RefreshMode::Async => {
                self.worker = Some(
                    std::thread::Builder::new()
                        .name("kb-refresh".into())
                        .spawn(move || job.run())
                        .map_err(|e| Error::io("kb-refresh thread", e))?,
                );
                Ok(StepAction::Started)
            }
        }
    }

    /// Blocks until no refresh is running. Used at the end of training and
    /// in tests.
    pub fn wait_idle(&mut self) -> Result<()> {
        if let Some(h) = self.worker.take() {
            h.join().expect("refresh thread panicked");
        }
        self.take_failure()
    }

    /// Refresh events recorded since the last call, in completion order.
    pub fn drain_events(&self) -> Vec<RefreshEvent> {
        self.events_rx.try_iter().collect()
    }

    fn reap_worker(&mut self) {
        if let Some(h) = self.worker.take() {
            // in_flight was clear, so the thread is finishing or finished.
            h.join().expect("refresh thread panicked");
        }
    }

    fn take_failure(&self) -> Result<()> {
        match self.shared.failure.lock().take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl Drop for Refresher {
    fn drop(&mut self) {
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

struct Job {
    step: u64,
    params: EncoderParams,
    fingerprint: u64,
    config: RefreshConfig,
    chunks: Arc<Vec<Chunk>>,
    chunk_ids: Arc<Vec<u32>>,
    shared: Arc<Shared>,
    events: Sender<RefreshEvent>,
    hook: Option<Arc<dyn RefreshHook>>,
}

impl Job {
    fn run(self) {
        if let Some(hook) = &self.hook {
            hook.before_reencode(self.step);
        }
        let result = (|| -> Result<(IndexSnapshot, u64, u64)> {
            let t0 = Instant::now();
            let embeddings = reencode_kb(&self.params, &self.chunks, self.config.num_workers)?;
            let reencode_ms = t0.elapsed().as_millis() as u64;
            let t1 = Instant::now();
            // Only this job can publish while in_flight is set.
            let prev = self.shared.latest.read().generation();
            let snapshot = rebuild(
                embeddings,
                self.chunk_ids.as_ref().clone(),
                prev,
                self.fingerprint,
                &self.config,
            )?;
            Ok((snapshot, reencode_ms, t1.elapsed().as_millis() as u64))
        })();
        match result {
            Ok((snapshot, reencode_ms, rebuild_ms)) => {
                let generation = snapshot.generation();
                *self.shared.latest.write() = Arc::new(snapshot);
                self.shared.completed.fetch_add(1, Ordering::Relaxed);
                let _ = self.events.send(RefreshEvent {
                    step: self.step,
                    generation,
                    capture_fingerprint: self.fingerprint,
                    reencode_ms,
                    rebuild_ms,
                    skipped: false,
                });
            }
            Err(e) => *self.shared.failure.lock() = Some(e),
        }
        self.shared.in_flight.store(false, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chunk_corpus, synth_world, SynthConfig};
    use crate::encoder::init_encoder;
    use std::sync::mpsc::sync_channel;

    fn kb() -> Vec<Chunk> {
        let (docs, _) = synth_world(&SynthConfig {
            n_entities: 20,
            n_relations: 3,
            n_facts: 40,
            facts_per_passage: 2,
            vocab_size: 500,
            ..Default::default()
        })
        .unwrap();
        chunk_corpus(&docs, 100, 500, false)
    }

    #[test]
    fn reencode_is_independent_of_worker_count() {
        let chunks = kb();
        let p = init_encoder(1, "passage", 500, 8, 0.3);
        let one = reencode_kb(&p, &chunks, 1).unwrap();
        let four = reencode_kb(&p, &chunks, 4).unwrap();
        let many = reencode_kb(&p, &chunks, 1000).unwrap();
        assert_eq!(one, four);
        assert_eq!(one, many);
        for (i, c) in chunks.iter().enumerate() {
            let direct: Vec<f32> = p.encode(&c.token_ids).unwrap().iter().map(|&x| x as f32).collect();
            assert_eq!(one.row(i), direct.as_slice());
        }
        assert!(reencode_kb(&p, &[], 2).is_err());
    }

    #[test]
    fn rebuild_increments_generation() {
        let chunks = kb();
        let p = init_encoder(1, "passage", 500, 8, 0.3);
        let e = reencode_kb(&p, &chunks, 1).unwrap();
        let ids: Vec<u32> = chunks.iter().map(|c| c.chunk_id).collect();
        let cfg = RefreshConfig::default();
        let s = rebuild(e.clone(), ids.clone(), 4, 99, &cfg).unwrap();
        assert_eq!(s.generation(), 5);
        assert_eq!(s.encoder_fingerprint(), 99);
        assert_eq!(s, IndexSnapshot::build_exact(e.clone(), ids.clone(), 5, 99).unwrap());
        let ivf = RefreshConfig {
            index_kind: IndexKind::Ivf,
            clusters: 4,
            seed: 3,
            ..cfg
        };
        assert_eq!(
            rebuild(e.clone(), ids.clone(), 1, 0, &ivf).unwrap(),
            rebuild(e, ids, 1, 0, &ivf).unwrap()
        );
    }

    #[test]
    fn sync_schedule_counts_refreshes() {
        let chunks = kb();
        let p = init_encoder(1, "passage", 500, 8, 0.3);
        let cfg = RefreshConfig {
            every_n_steps: 5,
            ..Default::default()
        };
        let mut r = Refresher::new(cfg, chunks, &p).unwrap();
        assert_eq!(r.poll_latest().generation(), 1);
        for step in 1..=20 {
            r.on_step(step, &p).unwrap();
        }
        let st = r.state();
        assert_eq!(st.refreshes_completed, 4);
        assert_eq!(st.published_generation, 5);
        assert_eq!(st.triggers_skipped, 0);
        let events = r.drain_events();
        assert_eq!(events.iter().map(|e| e.step).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    }

    #[test]
    fn huge_interval_never_refreshes() {
        let p = init_encoder(1, "passage", 500, 8, 0.3);
        let cfg = RefreshConfig {
            every_n_steps: 1_000_000,
            ..Default::default()
        };
        let mut r = Refresher::new(cfg, kb(), &p).unwrap();
        for step in 1..=100 {
            assert_eq!(r.on_step(step, &p).unwrap(), StepAction::NotDue);
        }
        assert_eq!(r.poll_latest().generation(), 1);
        assert_eq!(r.state().refreshes_started, 0);
    }

    /// Blocks each refresh until the test releases it.
    struct Gate {
        entered: Mutex<std::sync::mpsc::SyncSender<u64>>,
        release: Mutex<Receiver<()>>,
    }

    impl RefreshHook for Gate {
        fn before_reencode(&self, step: u64) {
            self.entered.lock().send(step).unwrap();
            self.release.lock().recv().unwrap();
        }
    }

    #[test]
    fn overlapping_trigger_is_skipped_and_reads_stay_stale() {
        let (entered_tx, entered_rx) = sync_channel(4);
        let (release_tx, release_rx) = channel();
        let gate = Arc::new(Gate {
            entered: Mutex::new(entered_tx),
            release: Mutex::new(release_rx),
        });
        let p = init_encoder(1, "passage", 500, 8, 0.3);
        let cfg = RefreshConfig {
            every_n_steps: 2,
            mode: RefreshMode::Async,
            ..Default::default()
        };
        let mut r = Refresher::new(cfg, kb(), &p).unwrap().with_hook(gate);

        assert_eq!(r.on_step(1, &p).unwrap(), StepAction::NotDue);
        assert_eq!(r.on_step(2, &p).unwrap(), StepAction::Started);
        assert_eq!(entered_rx.recv().unwrap(), 2);
        assert!(r.state().in_flight);
        assert_eq!(r.on_step(3, &p).unwrap(), StepAction::NotDue);
        assert_eq!(r.on_step(4, &p).unwrap(), StepAction::Skipped);
        // Still the initial snapshot while the refresh is parked.
        assert_eq!(r.poll_latest().generation(), 1);

        release_tx.send(()).unwrap();
        r.wait_idle().unwrap();
        let st = r.state();
        assert_eq!(st.triggers_skipped, 1);
        assert_eq!(st.refreshes_completed, 1);
        assert_eq!(st.published_generation, 2);
        assert!(!st.in_flight);
        assert_eq!(r.poll_latest().generation(), 2);
        let events = r.drain_events();
        assert_eq!(events.len(), 2);
        assert!(events[0].skipped && events[0].step == 4);
        assert!(!events[1].skipped && events[1].generation == 2);
    }

    #[test]
    fn snapshot_embeds_params_captured_at_trigger() {
        let chunks = kb();
        let p0 = init_encoder(1, "passage", 500, 8, 0.3);
        let cfg = RefreshConfig {
            every_n_steps: 1,
            mode: RefreshMode::Async,
            num_workers: 3,
            ..Default::default()
        };
        let mut r = Refresher::new(cfg, chunks.clone(), &p0).unwrap();
        let mut p = p0.clone();
        p.bias[0] += 0.5;
        let captured = p.clone();
        r.on_step(1, &p).unwrap();
        // Mutating the trainer's copy after the trigger must not leak in.
        p.bias[1] -= 0.5;
        r.wait_idle().unwrap();
        let snap = r.poll_latest();
        assert_eq!(snap.encoder_fingerprint(), captured.fingerprint());
        assert_eq!(snap.embeddings(), &reencode_kb(&captured, &chunks, 1).unwrap());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let p = init_encoder(1, "passage", 500, 8, 0.3);
        let cfg = RefreshConfig {
            every_n_steps: 0,
            ..Default::default()
        };
        assert!(matches!(Refresher::new(cfg, kb(), &p), Err(Error::Config(_))));
    }
}
