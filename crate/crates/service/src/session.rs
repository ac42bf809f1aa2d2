//! The single per-process session behind the HTTP API, the event stream
//! and the `serve` command.
//!
//! All mutation goes through [`Session`] methods. Training runs on its own
//! worker thread, latent moves are decoded on a regeneration thread that
//! always works on the newest request, and a clock thread drives the
//! sequencer. Subscribers receive [`StreamEvent`]s over a broadcast channel.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rhythmvae::encoding::{encode_pattern, patterns_from_midi, Grid, Pattern, RhythmTensor};
use rhythmvae::midi::{write_smf, DrumMap, MidiError, OutputNotes};
use rhythmvae::sequencer::{
    AutomationClip, ClockDriver, EventSink, MidiEvent, Sequencer, SequencerError, SequencerHandle, TransportState, PPQ,
};
use rhythmvae::vae::{self, EpochReport, LatentVector, LossBreakdown, TrainConfig, VaeError, VaeModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

const EVENT_BUFFER: usize = 1024;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("a training run is already active")]
    TrainingActive,
    #[error("the corpus needs at least 2 patterns, it has {0}")]
    CorpusTooSmall(usize),
    #[error("no trained model")]
    NoModel,
    #[error("no pattern to export")]
    NothingToExport,
    #[error("{0}")]
    InvalidRequest(String),
    #[error("timed out waiting for the pattern")]
    Timeout,
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Sequencer(#[from] SequencerError),
    #[error(transparent)]
    Midi(#[from] MidiError),
}

impl SessionError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::TrainingActive => "training_active",
            SessionError::CorpusTooSmall(_) => "corpus_too_small",
            SessionError::NoModel => "no_model",
            SessionError::NothingToExport => "nothing_to_export",
            SessionError::InvalidRequest(_) => "invalid_request",
            SessionError::Timeout => "timeout",
            SessionError::Vae(VaeError::InvalidConfig(_)) => "invalid_config",
            SessionError::Vae(
                VaeError::BadMagic
                | VaeError::UnsupportedVersion(_)
                | VaeError::DimensionMismatch { .. }
                | VaeError::CorruptPayload(_),
            ) => "corrupt_model",
            SessionError::Vae(_) => "model_error",
            SessionError::Sequencer(SequencerError::NoModel) => "no_model",
            SessionError::Sequencer(SequencerError::NotPlaying) => "not_playing",
            SessionError::Sequencer(SequencerError::EmptyClip) => "empty_clip",
            SessionError::Sequencer(_) => "sequencer_error",
            SessionError::Midi(_) => "midi_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TrainingStatus {
    Idle,
    /// `epoch` is the one-based epoch in progress.
    Training { epoch: usize, of: usize },
    Done,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub filename: String,
    pub patterns: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A pattern as three 9×32 matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternPayload {
    pub onsets: Grid,
    pub velocities: Grid,
    pub offsets: Grid,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentVector>,
}

impl PatternPayload {
    pub fn new(pattern: &Pattern, latent: Option<LatentVector>) -> Self {
        let t = encode_pattern(pattern).unwrap_or_default();
        PatternPayload { onsets: t.onsets, velocities: t.velocities, offsets: t.offsets, latent }
    }

    /// Rebuilds the pattern, checking every invariant.
    pub fn to_pattern(&self) -> Result<Pattern, SessionError> {
        let t = RhythmTensor { onsets: self.onsets, velocities: self.velocities, offsets: self.offsets };
        t.validate().map_err(|e| SessionError::InvalidRequest(e.to_string()))?;
        let raw = rhythmvae::encoding::DecoderOutput::from(&t);
        Ok(rhythmvae::encoding::decode_tensor(&raw, 0.5))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutomationState {
    pub recording: bool,
    pub playing: bool,
    pub clip_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub status: TrainingStatus,
    pub has_model: bool,
    pub latent: LatentVector,
    pub transport: TransportState,
    pub threshold: f64,
    pub corpus_patterns: usize,
    pub epochs_completed: usize,
    pub automation: AutomationState,
}

/// Everything `GET /status` returns: the snapshot plus corpus, config and
/// loss history, enough for a client to rebuild its view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    #[serde(flatten)]
    pub snapshot: StatusSnapshot,
    pub corpus: Vec<CorpusReport>,
    pub config: TrainConfig,
    pub history: Vec<EpochReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Loss { epoch: usize, beta: f64, train: LossBreakdown, val: LossBreakdown },
    Pattern(Box<PatternPayload>),
    Status(StatusSnapshot),
    Error { code: String, message: String },
}

/// Messages a client may send on the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InboundMessage {
    Latent { x: f64, y: f64 },
}

struct State {
    corpus: Vec<CorpusReport>,
    dataset: Vec<RhythmTensor>,
    status: TrainingStatus,
    history: Vec<EpochReport>,
    config: TrainConfig,
    model: Option<Arc<VaeModel>>,
    latent: LatentVector,
    cancel: Option<Arc<AtomicBool>>,
    worker: Option<JoinHandle<()>>,
    clip: AutomationClip,
    drum_map: DrumMap,
}

#[derive(Default)]
struct Slot {
    pending: Option<(u64, LatentVector)>,
    submitted: u64,
    completed: u64,
    last_error: Option<String>,
    shutdown: bool,
}

#[derive(Default)]
struct Coalescer {
    slot: Mutex<Slot>,
    cv: Condvar,
}

impl Coalescer {
    fn lock(&self) -> MutexGuard<'_, Slot> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Sink shared between the clock thread and the session, which flushes
/// note-offs when the transport stops.
#[derive(Clone)]
pub struct SharedSink(Arc<Mutex<Box<dyn EventSink>>>);

impl SharedSink {
    pub fn new(sink: Box<dyn EventSink>) -> Self {
        SharedSink(Arc::new(Mutex::new(sink)))
    }
}

impl EventSink for SharedSink {
    fn send(&mut self, event: &MidiEvent) -> std::io::Result<()> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).send(event)
    }
}

/// Drops every event; the default when no MIDI port is configured.
pub struct DiscardSink;

impl EventSink for DiscardSink {
    fn send(&mut self, _: &MidiEvent) -> std::io::Result<()> {
        Ok(())
    }
}

struct Inner {
    state: Mutex<State>,
    seq: SequencerHandle,
    events: broadcast::Sender<StreamEvent>,
    coalescer: Coalescer,
    active_runs: AtomicUsize,
    max_concurrent_runs: AtomicUsize,
    sink: SharedSink,
}

struct Guard {
    inner: Arc<Inner>,
    clock: Mutex<Option<ClockDriver>>,
    regenerator: Mutex<Option<JoinHandle<()>>>,
}

impl Drop for Guard {
    fn drop(&mut self) {
        {
            let mut slot = self.inner.coalescer.lock();
            slot.shutdown = true;
            self.inner.coalescer.cv.notify_all();
        }
        if let Some(c) = self.clock.lock().unwrap_or_else(|e| e.into_inner()).take() {
            c.stop();
        }
        if let Some(t) = self.regenerator.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = t.join();
        }
        let cancel = self.inner.lock().cancel.clone();
        if let Some(c) = cancel {
            c.store(true, Ordering::Relaxed);
        }
    }
}

#[derive(Clone)]
pub struct Session {
    inner: Arc<Inner>,
    _guard: Arc<Guard>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Self::with_sink(Box::new(DiscardSink))
    }

    /// A session whose sequencer plays into `sink`.
    pub fn with_sink(sink: Box<dyn EventSink>) -> Self {
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let seq = SequencerHandle::new(Sequencer::new());
        {
            let tx = events.clone();
            seq.lock().on_pattern_change(move |c| {
                let _ = tx.send(StreamEvent::Pattern(Box::new(PatternPayload::new(&c.pattern, c.latent))));
            });
        }
        let sink = SharedSink::new(sink);
        let inner = Arc::new(Inner {
            state: Mutex::new(State {
                corpus: Vec::new(),
                dataset: Vec::new(),
                status: TrainingStatus::Idle,
                history: Vec::new(),
                config: TrainConfig::default(),
                model: None,
                latent: LatentVector::default(),
                cancel: None,
                worker: None,
                clip: AutomationClip::new(),
                drum_map: DrumMap::default(),
            }),
            seq: seq.clone(),
            events,
            coalescer: Coalescer::default(),
            active_runs: AtomicUsize::new(0),
            max_concurrent_runs: AtomicUsize::new(0),
            sink: sink.clone(),
        });
        let regen_inner = inner.clone();
        let regenerator = std::thread::spawn(move || regenerate_loop(&regen_inner));
        let clock = ClockDriver::spawn(seq, Box::new(sink), ClockDriver::DEFAULT_PUMP_HZ);
        let guard = Guard { inner: inner.clone(), clock: Mutex::new(Some(clock)), regenerator: Mutex::new(Some(regenerator)) };
        Session { inner, _guard: Arc::new(guard) }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamEvent> {
        self.inner.events.subscribe()
    }

    pub fn set_drum_map(&self, map: DrumMap) {
        self.inner.lock().drum_map = map;
    }

    /// Parses each file into two-bar patterns and adds them to the dataset.
    /// Failures are reported per file.
    pub fn upload_corpus(&self, files: Vec<(String, Vec<u8>)>) -> Vec<CorpusReport> {
        let map = self.inner.lock().drum_map.clone();
        let mut reports = Vec::with_capacity(files.len());
        let mut tensors = Vec::new();
        for (filename, bytes) in files {
            match patterns_from_midi(&bytes, &map) {
                Ok(patterns) => {
                    reports.push(CorpusReport { filename, patterns: patterns.len(), error: None });
                    tensors.extend(patterns.iter().filter_map(|p| encode_pattern(p).ok()));
                }
                Err(e) => reports.push(CorpusReport { filename, patterns: 0, error: Some(e.to_string()) }),
            }
        }
        {
            let mut st = self.inner.lock();
            st.corpus.extend(reports.iter().cloned());
            st.dataset.extend(tensors);
        }
        self.inner.broadcast_status();
        reports
    }

    /// Adds already-encoded patterns to the dataset.
    pub fn add_patterns(&self, name: &str, patterns: &[Pattern]) {
        let mut st = self.inner.lock();
        st.corpus.push(CorpusReport { filename: name.to_string(), patterns: patterns.len(), error: None });
        st.dataset.extend(patterns.iter().filter_map(|p| encode_pattern(p).ok()));
    }

    pub fn start_training(&self, cfg: TrainConfig) -> Result<(), SessionError> {
        cfg.validate()?;
        let mut st = self.inner.lock();
        if matches!(st.status, TrainingStatus::Training { .. }) {
            return Err(SessionError::TrainingActive);
        }
        if st.dataset.len() < 2 {
            return Err(SessionError::CorpusTooSmall(st.dataset.len()));
        }
        if let Some(w) = st.worker.take() {
            // the previous run has already reported its final status
            let _ = w.join();
        }
        let runs = self.inner.active_runs.fetch_add(1, Ordering::SeqCst) + 1;
        self.inner.max_concurrent_runs.fetch_max(runs, Ordering::SeqCst);
        let cancel = Arc::new(AtomicBool::new(false));
        st.cancel = Some(cancel.clone());
        st.status = TrainingStatus::Training { epoch: 1, of: cfg.epochs };
        st.history.clear();
        st.config = cfg;
        let dataset = st.dataset.clone();
        let inner = self.inner.clone();
        st.worker = Some(std::thread::spawn(move || train_worker(&inner, &dataset, &cfg, &cancel)));
        drop(st);
        self.inner.broadcast_status();
        Ok(())
    }

    /// Requests cancellation at the next batch boundary. Returns whether a
    /// run was active.
    pub fn stop_training(&self) -> bool {
        let st = self.inner.lock();
        match (&st.status, &st.cancel) {
            (TrainingStatus::Training { .. }, Some(c)) => {
                c.store(true, Ordering::Relaxed);
                true
            }
            _ => false,
        }
    }

    /// Blocks until the current training run, if any, has finished.
    pub fn wait_for_training(&self) {
        let worker = self.inner.lock().worker.take();
        if let Some(w) = worker {
            let _ = w.join();
        }
    }

    pub fn active_runs(&self) -> usize {
        self.inner.active_runs.load(Ordering::SeqCst)
    }

    /// Largest number of simultaneous training runs ever observed.
    pub fn max_concurrent_runs(&self) -> usize {
        self.inner.max_concurrent_runs.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        self.inner.snapshot()
    }

    pub fn report(&self) -> SessionReport {
        let snapshot = self.inner.snapshot();
        let st = self.inner.lock();
        SessionReport { snapshot, corpus: st.corpus.clone(), config: st.config, history: st.history.clone() }
    }

    /// Installs a model, e.g. one loaded from disk at startup.
    pub fn set_model(&self, model: VaeModel) -> Result<(), SessionError> {
        let model = Arc::new(model);
        {
            let mut st = self.inner.lock();
            if matches!(st.status, TrainingStatus::Training { .. }) {
                return Err(SessionError::TrainingActive);
            }
            st.model = Some(model.clone());
        }
        self.inner.seq.lock().set_model(model);
        self.inner.resubmit_latent();
        self.inner.broadcast_status();
        Ok(())
    }

    /// Queues a latent move without waiting for the decoder. Returns the
    /// request's sequence number.
    pub fn submit_latent(&self, z: LatentVector) -> Result<u64, SessionError> {
        if !z.is_finite() {
            return Err(SessionError::InvalidRequest("latent coordinates must be finite".into()));
        }
        {
            let mut st = self.inner.lock();
            if st.model.is_none() {
                return Err(SessionError::NoModel);
            }
            st.latent = z;
        }
        self.inner.seq.lock().record_latent(z)?;
        Ok(self.inner.enqueue(z))
    }

    /// Moves the latent point and waits until a pattern at least as new as
    /// this request has been published.
    pub fn set_latent(&self, z: LatentVector, timeout: Duration) -> Result<PatternPayload, SessionError> {
        let ticket = self.submit_latent(z)?;
        self.inner.wait_for(ticket, timeout)?;
        self.pattern()
    }

    /// The pattern the sequencer is currently publishing.
    pub fn pattern(&self) -> Result<PatternPayload, SessionError> {
        let (model, latent) = {
            let st = self.inner.lock();
            (st.model.clone().ok_or(SessionError::NoModel)?, st.latent)
        };
        let seq = self.inner.seq.lock();
        if let Some(p) = seq.pattern() {
            return Ok(PatternPayload::new(&p, seq.latent()));
        }
        let threshold = seq.threshold();
        drop(seq);
        Ok(PatternPayload::new(&model.generate(latent, threshold)?, Some(latent)))
    }

    pub fn transport(&self, playing: Option<bool>, tempo_bpm: Option<f64>) -> Result<TransportState, SessionError> {
        let (state, offs) = {
            let mut seq = self.inner.seq.lock();
            if let Some(t) = tempo_bpm {
                seq.set_tempo(t)?;
            }
            let was_playing = seq.transport().playing;
            let offs = match playing {
                Some(true) if !was_playing => {
                    seq.start(0);
                    Vec::new()
                }
                Some(false) if was_playing => seq.stop(),
                _ => Vec::new(),
            };
            (seq.transport(), offs)
        };
        let mut sink = self.inner.sink.clone();
        for e in &offs {
            let _ = sink.send(e);
        }
        self.inner.broadcast_status();
        Ok(state)
    }

    pub fn automation_record(&self) -> Result<(), SessionError> {
        self.inner.seq.lock().start_recording()?;
        self.inner.broadcast_status();
        Ok(())
    }

    /// Ends recording and playback. Returns the length of the stored clip.
    pub fn automation_stop(&self) -> usize {
        let clip = {
            let mut seq = self.inner.seq.lock();
            seq.stop_automation();
            seq.is_recording().then(|| seq.stop_recording())
        };
        let len = {
            let mut st = self.inner.lock();
            if let Some(c) = clip {
                st.clip = c;
            }
            st.clip.len()
        };
        self.inner.broadcast_status();
        len
    }

    pub fn automation_play(&self) -> Result<(), SessionError> {
        let clip = self.inner.lock().clip.clone();
        self.inner.seq.lock().play_automation(clip)?;
        self.inner.broadcast_status();
        Ok(())
    }

    pub fn automation_clip(&self) -> AutomationClip {
        self.inner.lock().clip.clone()
    }

    pub fn export_midi(&self, tempo_bpm: f64) -> Result<Vec<u8>, SessionError> {
        let pattern = self.inner.seq.lock().pattern().ok_or(SessionError::NothingToExport)?;
        Ok(write_smf(&pattern, PPQ as u16, tempo_bpm, &OutputNotes::default())?)
    }

    pub fn save_model(&self) -> Result<Vec<u8>, SessionError> {
        let model = self.inner.lock().model.clone().ok_or(SessionError::NoModel)?;
        Ok(model.save_weights())
    }

    pub fn load_model(&self, bytes: &[u8]) -> Result<(), SessionError> {
        let model = VaeModel::load_weights(bytes)?;
        self.set_model(model)
    }

    pub fn threshold(&self) -> f64 {
        self.inner.seq.lock().threshold()
    }

    pub fn set_threshold(&self, value: f64) -> Result<(), SessionError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(SessionError::InvalidRequest(format!("threshold {value} is outside [0, 1]")));
        }
        self.inner.seq.lock().set_threshold(value);
        self.inner.resubmit_latent();
        Ok(())
    }
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn snapshot(&self) -> StatusSnapshot {
        let (transport, threshold, recording, playing) = {
            let seq = self.seq.lock();
            (seq.transport(), seq.threshold(), seq.is_recording(), seq.automation_playing())
        };
        let st = self.lock();
        StatusSnapshot {
            status: st.status.clone(),
            has_model: st.model.is_some(),
            latent: st.latent,
            transport,
            threshold,
            corpus_patterns: st.dataset.len(),
            epochs_completed: st.history.len(),
            automation: AutomationState { recording, playing, clip_samples: st.clip.len() },
        }
    }

    fn broadcast_status(&self) {
        let _ = self.events.send(StreamEvent::Status(self.snapshot()));
    }

    fn enqueue(&self, z: LatentVector) -> u64 {
        let mut slot = self.coalescer.lock();
        slot.submitted += 1;
        let ticket = slot.submitted;
        slot.pending = Some((ticket, z));
        self.coalescer.cv.notify_all();
        ticket
    }

    /// Re-decodes the current latent point, e.g. after the model changed.
    fn resubmit_latent(&self) {
        let (has_model, z) = {
            let st = self.lock();
            (st.model.is_some(), st.latent)
        };
        if has_model {
            self.enqueue(z);
        }
    }

    fn wait_for(&self, ticket: u64, timeout: Duration) -> Result<(), SessionError> {
        let deadline = Instant::now() + timeout;
        let mut slot = self.coalescer.lock();
        while slot.completed < ticket {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(SessionError::Timeout);
            }
            slot = self.coalescer.cv.wait_timeout(slot, left).unwrap_or_else(|e| e.into_inner()).0;
        }
        match &slot.last_error {
            Some(msg) if slot.completed == ticket => Err(SessionError::InvalidRequest(msg.clone())),
            _ => Ok(()),
        }
    }

    fn regenerate(&self, z: LatentVector) -> Result<(), SessionError> {
        let (model, threshold) = {
            let seq = self.seq.lock();
            (seq.model().ok_or(SessionError::NoModel)?, seq.threshold())
        };
        let pattern = model.generate(z, threshold)?;
        self.seq.lock().publish_decoded(z, Arc::new(pattern));
        Ok(())
    }
}

fn regenerate_loop(inner: &Inner) {
    loop {
        let (ticket, z) = {
            let mut slot = inner.coalescer.lock();
            loop {
                if slot.shutdown {
                    return;
                }
                if let Some(job) = slot.pending.take() {
                    break job;
                }
                slot = inner.coalescer.cv.wait(slot).unwrap_or_else(|e| e.into_inner());
            }
        };
        let result = inner.regenerate(z);
        let mut slot = inner.coalescer.lock();
        slot.completed = ticket;
        slot.last_error = result.err().map(|e| e.to_string());
        inner.coalescer.cv.notify_all();
    }
}

fn train_worker(inner: &Arc<Inner>, dataset: &[RhythmTensor], cfg: &TrainConfig, cancel: &AtomicBool) {
    let epochs = cfg.epochs;
    let result = vae::train(
        dataset,
        cfg,
        |report, model| {
            let snapshot = Arc::new(model.clone());
            {
                let mut st = inner.lock();
                st.history.push(*report);
                st.status = TrainingStatus::Training { epoch: (report.epoch + 1).min(epochs), of: epochs };
                st.model = Some(snapshot.clone());
            }
            inner.seq.lock().set_model(snapshot);
            let _ = inner.events.send(StreamEvent::Loss {
                epoch: report.epoch,
                beta: report.beta,
                train: report.train,
                val: report.val,
            });
            inner.broadcast_status();
            inner.resubmit_latent();
        },
        Some(cancel),
    );
    {
        let mut st = inner.lock();
        match result {
            Ok(outcome) => {
                if !outcome.cancelled || st.model.is_none() {
                    let model = Arc::new(outcome.model);
                    st.model = Some(model.clone());
                    inner.seq.lock().set_model(model);
                }
                st.status = TrainingStatus::Done;
            }
            Err(e) => st.status = TrainingStatus::Failed { reason: e.to_string() },
        }
        st.cancel = None;
        inner.active_runs.fetch_sub(1, Ordering::SeqCst);
    }
    inner.broadcast_status();
    inner.resubmit_latent();
}

#[cfg(test)]
mod tests {
    use super::*;
    use rhythmvae::synth::template_corpus;

    fn trained_session() -> Session {
        let s = Session::new();
        s.set_model(VaeModel::new(1)).unwrap();
        s
    }

    #[test]
    fn error_codes() {
        assert_eq!(SessionError::NoModel.code(), "no_model");
        assert_eq!(SessionError::Vae(VaeError::BadMagic).code(), "corrupt_model");
        assert_eq!(SessionError::Sequencer(SequencerError::EmptyClip).code(), "empty_clip");
    }

    #[test]
    fn no_model_rejections() {
        let s = Session::new();
        assert!(matches!(s.pattern(), Err(SessionError::NoModel)));
        assert!(matches!(s.submit_latent(LatentVector::default()), Err(SessionError::NoModel)));
        assert!(matches!(s.save_model(), Err(SessionError::NoModel)));
        assert!(matches!(s.export_midi(120.0), Err(SessionError::NothingToExport)));
    }

    #[test]
    fn empty_and_invalid_uploads() {
        let s = Session::new();
        assert!(s.upload_corpus(vec![]).is_empty());
        let r = s.upload_corpus(vec![("junk.mid".into(), b"hello".to_vec())]);
        assert_eq!(r.len(), 1);
        assert!(r[0].error.is_some());
        assert_eq!(s.snapshot().corpus_patterns, 0);
        assert!(matches!(s.start_training(TrainConfig::default()), Err(SessionError::CorpusTooSmall(0))));
    }

    #[test]
    fn latent_roundtrip_through_regenerator() {
        let s = trained_session();
        let z = LatentVector::new(0.4, -1.1);
        let p = s.set_latent(z, Duration::from_secs(10)).unwrap();
        assert_eq!(p.latent, Some(z));
        let expected = VaeModel::new(1).generate(z, 0.5).unwrap();
        assert_eq!(p.to_pattern().unwrap(), expected);
        assert!(matches!(
            s.set_latent(LatentVector::new(f64::NAN, 0.0), Duration::from_secs(1)),
            Err(SessionError::InvalidRequest(_))
        ));
    }

    #[test]
    fn threshold_bounds() {
        let s = trained_session();
        assert!(s.set_threshold(0.9).is_ok());
        assert_eq!(s.threshold(), 0.9);
        assert!(s.set_threshold(1.5).is_err());
    }

    #[test]
    fn stop_training_mid_run() {
        let s = Session::new();
        s.add_patterns("synthetic", &template_corpus(8, 1));
        let mut rx = s.subscribe();
        s.start_training(TrainConfig { epochs: 100, batch_size: 4, ..Default::default() }).unwrap();
        assert!(matches!(s.start_training(TrainConfig::default()), Err(SessionError::TrainingActive)));
        let mut losses = 0;
        while losses < 3 {
            if let Ok(StreamEvent::Loss { .. }) = rx.blocking_recv() {
                losses += 1;
            }
        }
        assert!(s.stop_training());
        s.wait_for_training();
        let report = s.report();
        assert_eq!(report.snapshot.status, TrainingStatus::Done);
        // the worker can finish at most the epoch that was in flight
        assert!((3..=4).contains(&report.history.len()), "{}", report.history.len());
        assert_eq!(s.active_runs(), 0);
        assert_eq!(s.max_concurrent_runs(), 1);
        assert!(!s.stop_training());
    }
}
