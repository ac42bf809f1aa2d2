//! Looping step sequencer with microtiming, live latent control and
//! automation record/replay.
//!
//! Time is measured in ticks at 480 per quarter note; a pattern loops every
//! two bars (3840 ticks). [`Sequencer`] is a pure state machine driven by
//! explicit `tick(now)` calls, so tests can run it against a mock clock.
//! [`ClockDriver`] pumps it from wall-clock time on a background thread.
//!
//! Pattern swaps happen per step. Each step is latched from the currently
//! published pattern half a step (one 32nd) before its grid position, which
//! is the earliest any of its onsets can fire. Step 0 latches on the loop
//! boundary itself since its early onsets wrap to the end of the loop.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{Pattern, NUM_STEPS};
use crate::midi::{
    midi_velocity, ChannelMessage, DrumClass, EventKind, MidiError, MidiFile, OutputNotes, SmfFormat, TrackEvent,
    DRUM_CHANNEL, META_TEMPO,
};
use crate::vae::{LatentVector, VaeError, VaeModel};

pub const PPQ: u64 = 480;
pub const SIXTEENTH: u64 = PPQ / 4;
pub const THIRTY_SECOND: u64 = PPQ / 8;
pub const LOOP_TICKS: u64 = SIXTEENTH * NUM_STEPS as u64;
pub const MIN_TEMPO: f64 = 20.0;
pub const MAX_TEMPO: f64 = 999.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequencerError {
    #[error("time moved backwards from {last} to {now}")]
    TimeWentBackwards { last: u64, now: u64 },
    #[error("tempo {0} is outside [20, 999] bpm")]
    InvalidTempo(f64),
    #[error("no trained model loaded")]
    NoModel,
    #[error("transport is not playing")]
    NotPlaying,
    #[error("automation clip is empty")]
    EmptyClip,
    #[error("automation positions must increase: {next} after {last}")]
    NonIncreasingPosition { last: u64, next: u64 },
    #[error(transparent)]
    Vae(#[from] VaeError),
}

/// A scheduled note-on. Its note-off follows one sixteenth later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimedEvent {
    pub fire_at: u64,
    pub class: DrumClass,
    pub velocity_midi: u8,
}

/// Note-on events for one pass of `pattern` starting at `loop_start`.
///
/// Onsets pulled before the loop start by a negative offset wrap to the end
/// of the loop. Sorted by time, then class.
pub fn schedule_pattern(pattern: &Pattern, loop_start: u64) -> Vec<TimedEvent> {
    let mut events: Vec<TimedEvent> = (0..NUM_STEPS).flat_map(|s| step_events(pattern, s, loop_start)).collect();
    events.sort();
    events
}

fn step_events(pattern: &Pattern, step: usize, loop_start: u64) -> impl Iterator<Item = TimedEvent> + '_ {
    pattern.onsets.iter().filter(move |o| o.step == step).map(move |o| {
        let shift = (o.offset * THIRTY_SECOND as f64).round() as i64;
        let mut fire_at = loop_start as i64 + (o.step as u64 * SIXTEENTH) as i64 + shift;
        if fire_at < loop_start as i64 {
            fire_at += LOOP_TICKS as i64;
        }
        TimedEvent { fire_at: fire_at as u64, class: o.class, velocity_midi: midi_velocity(o.velocity) }
    })
}

/// Tick at which global slot `slot` (loop · 32 + step) is latched.
fn latch_time(slot: u64) -> u64 {
    let (k, s) = (slot / NUM_STEPS as u64, slot % NUM_STEPS as u64);
    k * LOOP_TICKS + if s == 0 { 0 } else { s * SIXTEENTH - THIRTY_SECOND }
}

/// Recorded latent positions over song time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AutomationClip {
    samples: Vec<(u64, LatentVector)>,
}

impl AutomationClip {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: Vec<(u64, LatentVector)>) -> Result<Self, SequencerError> {
        let mut clip = Self::new();
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(SequencerError::NonIncreasingPosition { last: w[0].0, next: w[1].0 });
            }
        }
        clip.samples = samples;
        Ok(clip)
    }

    /// Appends a sample. A sample at the same position as the last one
    /// replaces it.
    pub fn push(&mut self, position: u64, z: LatentVector) -> Result<(), SequencerError> {
        match self.samples.last_mut() {
            Some((last, v)) if *last == position => *v = z,
            Some((last, _)) if *last > position => {
                return Err(SequencerError::NonIncreasingPosition { last: *last, next: position })
            }
            _ => self.samples.push((position, z)),
        }
        Ok(())
    }

    pub fn samples(&self) -> &[(u64, LatentVector)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Linear interpolation between samples, holding the first and last
    /// values outside the recorded range.
    pub fn value_at(&self, position: u64) -> Option<LatentVector> {
        let first = self.samples.first()?;
        if position <= first.0 {
            return Some(first.1);
        }
        let i = self.samples.partition_point(|(p, _)| *p <= position);
        if i == self.samples.len() {
            return Some(self.samples[i - 1].1);
        }
        let ((p0, z0), (p1, z1)) = (self.samples[i - 1], self.samples[i]);
        let t = (position - p0) as f64 / (p1 - p0) as f64;
        Some(z0.lerp(z1, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportState {
    pub tempo_bpm: f64,
    pub playing: bool,
    pub song_position: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteKind {
    On,
    Off,
}

/// A note message at a tick, ready for a sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MidiEvent {
    pub at: u64,
    pub kind: NoteKind,
    pub class: DrumClass,
    pub note: u8,
    pub velocity: u8,
}

/// Sent whenever a new pattern is published.
#[derive(Debug, Clone)]
pub struct PatternChange {
    pub position: u64,
    pub latent: Option<LatentVector>,
    pub pattern: Arc<Pattern>,
}

type Listener = Box<dyn FnMut(&PatternChange) + Send>;

pub struct Sequencer {
    tempo_bpm: f64,
    playing: bool,
    position: u64,
    generation: u64,
    next_slot: u64,
    pattern: Option<Arc<Pattern>>,
    model: Option<Arc<VaeModel>>,
    threshold: f64,
    latent: Option<LatentVector>,
    pending: BTreeMap<(u64, DrumClass), TimedEvent>,
    note_offs: BTreeMap<(u64, u8), MidiEvent>,
    output_notes: OutputNotes,
    recording: Option<AutomationClip>,
    playback: Option<AutomationClip>,
    listener: Option<Listener>,
}

impl std::fmt::Debug for Sequencer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sequencer")
            .field("tempo_bpm", &self.tempo_bpm)
            .field("playing", &self.playing)
            .field("position", &self.position)
            .field("latent", &self.latent)
            .finish_non_exhaustive()
    }
}

impl Default for Sequencer {
    fn default() -> Self {
        Self::new()
    }
}

impl Sequencer {
    pub fn new() -> Self {
        Sequencer {
            tempo_bpm: 120.0,
            playing: false,
            position: 0,
            generation: 0,
            next_slot: 0,
            pattern: None,
            model: None,
            threshold: 0.5,
            latent: None,
            pending: BTreeMap::new(),
            note_offs: BTreeMap::new(),
            output_notes: OutputNotes::default(),
            recording: None,
            playback: None,
            listener: None,
        }
    }

    pub fn transport(&self) -> TransportState {
        TransportState { tempo_bpm: self.tempo_bpm, playing: self.playing, song_position: self.position }
    }

    /// Incremented by every [`Sequencer::start`].
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn set_tempo(&mut self, bpm: f64) -> Result<(), SequencerError> {
        if !(MIN_TEMPO..=MAX_TEMPO).contains(&bpm) {
            return Err(SequencerError::InvalidTempo(bpm));
        }
        self.tempo_bpm = bpm;
        Ok(())
    }

    pub fn set_output_notes(&mut self, notes: OutputNotes) {
        self.output_notes = notes;
    }

    pub fn set_model(&mut self, model: Arc<VaeModel>) {
        self.model = Some(model);
    }

    pub fn model(&self) -> Option<Arc<VaeModel>> {
        self.model.clone()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold.clamp(0.0, 1.0);
    }

    pub fn latent(&self) -> Option<LatentVector> {
        self.latent
    }

    pub fn pattern(&self) -> Option<Arc<Pattern>> {
        self.pattern.clone()
    }

    pub fn on_pattern_change(&mut self, f: impl FnMut(&PatternChange) + Send + 'static) {
        self.listener = Some(Box::new(f));
    }

    /// Publishes a pattern for the steps that have not been latched yet.
    pub fn set_pattern(&mut self, pattern: Pattern) {
        self.publish(None, Arc::new(pattern));
    }

    fn publish(&mut self, latent: Option<LatentVector>, pattern: Arc<Pattern>) {
        if latent.is_some() {
            self.latent = latent;
        }
        self.pattern = Some(pattern.clone());
        if let Some(f) = self.listener.as_mut() {
            f(&PatternChange { position: self.position, latent, pattern });
        }
    }

    /// Decodes `z` with the current model and threshold and publishes the
    /// result. Records the call when automation recording is active.
    pub fn set_latent(&mut self, z: LatentVector) -> Result<Arc<Pattern>, SequencerError> {
        let model = self.model.clone().ok_or(SequencerError::NoModel)?;
        let pattern = Arc::new(model.generate(z, self.threshold)?);
        self.publish_latent(z, pattern.clone())?;
        Ok(pattern)
    }

    /// Records `z` and publishes a pattern already decoded from it.
    pub fn publish_latent(&mut self, z: LatentVector, pattern: Arc<Pattern>) -> Result<(), SequencerError> {
        self.record_latent(z)?;
        self.publish_decoded(z, pattern);
        Ok(())
    }

    /// Appends `z` at the current position if automation recording is on.
    pub fn record_latent(&mut self, z: LatentVector) -> Result<(), SequencerError> {
        match self.recording.as_mut() {
            Some(clip) => clip.push(self.position, z),
            None => Ok(()),
        }
    }

    /// Publishes a pattern decoded from `z` without recording it.
    pub fn publish_decoded(&mut self, z: LatentVector, pattern: Arc<Pattern>) {
        self.publish(Some(z), pattern);
    }

    /// Starts playback at `position`. Steps whose latch time has already
    /// passed in the current loop are latched at once; their onsets earlier
    /// than `position` are skipped.
    pub fn start(&mut self, position: u64) {
        self.playing = true;
        self.generation += 1;
        self.position = position;
        self.pending.clear();
        let loop_index = position / LOOP_TICKS;
        self.next_slot = loop_index * NUM_STEPS as u64;
        while latch_time(self.next_slot) <= position {
            self.latch(self.next_slot);
            self.next_slot += 1;
        }
        self.pending.retain(|_, e| e.fire_at >= position);
    }

    /// Stops playback and returns note-offs for every sounding note.
    pub fn stop(&mut self) -> Vec<MidiEvent> {
        self.playing = false;
        self.pending.clear();
        self.recording = None;
        let at = self.position;
        std::mem::take(&mut self.note_offs).into_values().map(|e| MidiEvent { at, ..e }).collect()
    }

    fn latch(&mut self, slot: u64) {
        let (k, s) = (slot / NUM_STEPS as u64, (slot % NUM_STEPS as u64) as usize);
        let loop_start = k * LOOP_TICKS;
        if let Some(clip) = &self.playback {
            let z = clip.value_at(loop_start + s as u64 * SIXTEENTH).expect("playback clip is non-empty");
            let changed = self.latent.is_none_or(|cur| cur.x.to_bits() != z.x.to_bits() || cur.y.to_bits() != z.y.to_bits());
            if changed || self.pattern.is_none() {
                if let Some(model) = self.model.clone() {
                    // a decoder failure leaves the previous pattern playing
                    if let Ok(p) = model.generate(z, self.threshold) {
                        self.publish(Some(z), Arc::new(p));
                    }
                }
            }
        }
        if let Some(pattern) = self.pattern.clone() {
            for e in step_events(&pattern, s, loop_start) {
                self.pending.insert((e.fire_at, e.class), e);
            }
        }
    }

    /// Advances the transport to `now` and returns the note-ons that fall
    /// due, in time order. The first call after [`Sequencer::start`] also
    /// includes onsets exactly at the start position.
    pub fn tick(&mut self, now: u64) -> Result<Vec<TimedEvent>, SequencerError> {
        if !self.playing {
            return Ok(Vec::new());
        }
        if now < self.position {
            return Err(SequencerError::TimeWentBackwards { last: self.position, now });
        }
        while latch_time(self.next_slot) <= now {
            self.latch(self.next_slot);
            self.next_slot += 1;
        }
        self.position = now;
        let later = self.pending.split_off(&(now + 1, DrumClass::Kick));
        Ok(std::mem::replace(&mut self.pending, later).into_values().collect())
    }

    /// [`Sequencer::tick`] plus note-off bookkeeping: sends due note-ons and
    /// note-offs to `sink` in time order, note-offs first on ties.
    pub fn pump(&mut self, now: u64, sink: &mut dyn EventSink) -> Result<usize, SequencerError> {
        let mut due: Vec<MidiEvent> = Vec::new();
        for e in self.tick(now)? {
            let note = self.output_notes.note(e.class);
            // a retrigger supersedes a note-off that would cut the new hit short
            self.note_offs.retain(|_, off| off.note != note || off.at <= e.fire_at);
            let on = MidiEvent { at: e.fire_at, kind: NoteKind::On, class: e.class, note, velocity: e.velocity_midi };
            due.push(on);
            let at = e.fire_at + SIXTEENTH;
            self.note_offs.insert((at, note), MidiEvent { at, kind: NoteKind::Off, velocity: 0, ..on });
        }
        let later = self.note_offs.split_off(&(now + 1, 0));
        due.extend(std::mem::replace(&mut self.note_offs, later).into_values());
        due.sort_by_key(|e| (e.at, e.kind == NoteKind::On, e.note));
        for e in &due {
            sink.send(e).map_err(|_| SequencerError::NotPlaying)?;
        }
        Ok(due.len())
    }

    pub fn start_recording(&mut self) -> Result<(), SequencerError> {
        if !self.playing {
            return Err(SequencerError::NotPlaying);
        }
        self.recording = Some(AutomationClip::new());
        Ok(())
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    /// Ends recording and returns the captured clip (possibly empty).
    pub fn stop_recording(&mut self) -> AutomationClip {
        self.recording.take().unwrap_or_default()
    }

    /// Replays `clip` at every step boundary from now on.
    pub fn play_automation(&mut self, clip: AutomationClip) -> Result<(), SequencerError> {
        if clip.is_empty() {
            return Err(SequencerError::EmptyClip);
        }
        if self.model.is_none() {
            return Err(SequencerError::NoModel);
        }
        self.playback = Some(clip);
        Ok(())
    }

    pub fn stop_automation(&mut self) {
        self.playback = None;
    }

    pub fn automation_playing(&self) -> bool {
        self.playback.is_some()
    }
}

/// Destination for note messages.
pub trait EventSink: Send {
    fn send(&mut self, event: &MidiEvent) -> io::Result<()>;
}

/// Collects events in memory; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct CaptureSink {
    events: Arc<Mutex<Vec<MidiEvent>>>,
}

impl CaptureSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<MidiEvent> {
        self.events.lock().expect("capture lock").clone()
    }

    pub fn take(&self) -> Vec<MidiEvent> {
        std::mem::take(&mut *self.events.lock().expect("capture lock"))
    }
}

impl EventSink for CaptureSink {
    fn send(&mut self, event: &MidiEvent) -> io::Result<()> {
        self.events.lock().expect("capture lock").push(*event);
        Ok(())
    }
}

/// Records the performance and renders it as a format-0 file.
#[derive(Debug, Clone, Default)]
pub struct SmfSink {
    events: Vec<MidiEvent>,
}

impl SmfSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_smf(&self, tempo_bpm: f64) -> Result<Vec<u8>, MidiError> {
        if !(MIN_TEMPO..=MAX_TEMPO).contains(&tempo_bpm) {
            return Err(MidiError::InvalidTempo(tempo_bpm));
        }
        let micros = (60_000_000.0 / tempo_bpm).round() as u32;
        let mut track = vec![TrackEvent {
            delta: 0,
            kind: EventKind::Meta { kind: META_TEMPO, data: micros.to_be_bytes()[1..].to_vec() },
        }];
        let origin = self.events.first().map_or(0, |e| e.at);
        let mut now = origin;
        for e in &self.events {
            let delta = u32::try_from(e.at - now).map_err(|_| MidiError::VlqOverflow(u32::MAX))?;
            now = e.at;
            let message = match e.kind {
                NoteKind::On => ChannelMessage::NoteOn { note: e.note, velocity: e.velocity },
                NoteKind::Off => ChannelMessage::NoteOff { note: e.note, velocity: 0 },
            };
            track.push(TrackEvent { delta, kind: EventKind::Channel { channel: DRUM_CHANNEL, message } });
        }
        track.push(TrackEvent::end_of_track(0));
        MidiFile { format: SmfFormat::SingleTrack, ppq: PPQ as u16, tracks: vec![track] }.to_bytes()
    }
}

impl EventSink for SmfSink {
    fn send(&mut self, event: &MidiEvent) -> io::Result<()> {
        self.events.push(*event);
        Ok(())
    }
}

/// A real-time MIDI output port, fed raw channel messages.
pub trait MidiOutput: Send {
    fn send_message(&mut self, bytes: &[u8]) -> io::Result<()>;
}

/// Writes raw MIDI bytes to any byte stream, such as a serial device or a
/// virtual port's file handle.
pub struct RawMidiOutput<W>(pub W);

impl<W: Write + Send> MidiOutput for RawMidiOutput<W> {
    fn send_message(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.write_all(bytes)?;
        self.0.flush()
    }
}

/// Sends note-ons and note-offs on the drum channel to a MIDI port.
pub struct MidiPortSink<O> {
    port: O,
}

impl<O: MidiOutput> MidiPortSink<O> {
    pub fn new(port: O) -> Self {
        MidiPortSink { port }
    }

    pub fn into_inner(self) -> O {
        self.port
    }
}

impl<O: MidiOutput> EventSink for MidiPortSink<O> {
    fn send(&mut self, e: &MidiEvent) -> io::Result<()> {
        let bytes = match e.kind {
            NoteKind::On => [0x90 | DRUM_CHANNEL, e.note & 0x7F, e.velocity.clamp(1, 127)],
            NoteKind::Off => [0x80 | DRUM_CHANNEL, e.note & 0x7F, 0],
        };
        self.port.send_message(&bytes)
    }
}

/// Shared, lockable sequencer.
#[derive(Debug, Clone, Default)]
pub struct SequencerHandle(Arc<Mutex<Sequencer>>);

impl SequencerHandle {
    pub fn new(seq: Sequencer) -> Self {
        SequencerHandle(Arc::new(Mutex::new(seq)))
    }

    pub fn lock(&self) -> MutexGuard<'_, Sequencer> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Like [`Sequencer::set_latent`] but decodes outside the lock so the
    /// clock thread is never held up by the decoder.
    pub fn set_latent(&self, z: LatentVector) -> Result<Arc<Pattern>, SequencerError> {
        let (model, threshold) = {
            let s = self.lock();
            (s.model().ok_or(SequencerError::NoModel)?, s.threshold())
        };
        let pattern = Arc::new(model.generate(z, threshold)?);
        self.lock().publish_latent(z, pattern.clone())?;
        Ok(pattern)
    }
}

/// Drives a sequencer from the wall clock on a background thread.
pub struct ClockDriver {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Box<dyn EventSink>>>,
}

impl ClockDriver {
    pub const DEFAULT_PUMP_HZ: f64 = 500.0;

    pub fn spawn(seq: SequencerHandle, mut sink: Box<dyn EventSink>, pump_hz: f64) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let period = Duration::from_secs_f64(1.0 / pump_hz.max(1.0));
        let thread = std::thread::spawn(move || {
            // (wall time, song position, tempo, start generation) of the last re-anchor
            let mut anchor: Option<(Instant, u64, f64, u64)> = None;
            while !flag.load(Ordering::Relaxed) {
                {
                    let mut s = seq.lock();
                    let t = s.transport();
                    if t.playing {
                        let fresh = anchor.is_none_or(|(_, _, bpm, g)| bpm != t.tempo_bpm || g != s.generation());
                        if fresh {
                            anchor = Some((Instant::now(), t.song_position, t.tempo_bpm, s.generation()));
                        }
                        let (at, pos, bpm, _) = anchor.expect("anchored");
                        let ticks_per_sec = PPQ as f64 * bpm / 60.0;
                        let now = pos + (at.elapsed().as_secs_f64() * ticks_per_sec) as u64;
                        let _ = s.pump(now.max(t.song_position), sink.as_mut());
                    } else {
                        anchor = None;
                    }
                }
                std::thread::sleep(period);
            }
            sink
        });
        ClockDriver { stop, thread: Some(thread) }
    }

    /// Stops the thread and hands back the sink.
    pub fn stop(mut self) -> Option<Box<dyn EventSink>> {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.take().and_then(|t| t.join().ok())
    }
}

impl Drop for ClockDriver {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::GridOnset;
    use crate::midi::parse_smf;

    fn onset(class: DrumClass, step: usize, velocity: f64, offset: f64) -> GridOnset {
        GridOnset { class, step, velocity, offset }
    }

    fn pat(onsets: Vec<GridOnset>) -> Pattern {
        Pattern::new(onsets).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let p = pat(vec![onset(DrumClass::Kick, 0, 1.0, 0.0)]);
        assert_eq!(schedule_pattern(&p, 0), vec![TimedEvent { fire_at: 0, class: DrumClass::Kick, velocity_midi: 127 }]);
        let p = pat(vec![onset(DrumClass::Snare, 1, 0.5, -1.0)]);
        assert_eq!(schedule_pattern(&p, 0)[0].fire_at, 60);
        let p = pat(vec![onset(DrumClass::Kick, 0, 0.5, -0.5)]);
        assert_eq!(schedule_pattern(&p, 0)[0].fire_at, 3810);
        assert_eq!(schedule_pattern(&p, 7680)[0].fire_at, 7680 + 3810);
        let p = pat(vec![onset(DrumClass::Kick, 3, 0.001, 0.0)]);
        assert_eq!(schedule_pattern(&p, 0)[0].velocity_midi, 1);
    }

    #[test]
    fn latch_times() {
        assert_eq!(latch_time(0), 0);
        assert_eq!(latch_time(1), 60);
        assert_eq!(latch_time(31), 31 * 120 - 60);
        assert_eq!(latch_time(32), 3840);
        assert_eq!(latch_time(33), 3840 + 60);
    }

    #[test]
    fn tick_interval_semantics() {
        let mut s = Sequencer::new();
        s.set_pattern(pat(vec![onset(DrumClass::Kick, 0, 1.0, 0.0), onset(DrumClass::Snare, 1, 1.0, -1.0)]));
        s.start(0);
        let ev = s.tick(120).unwrap();
        assert_eq!(ev.iter().map(|e| e.fire_at).collect::<Vec<_>>(), vec![0, 60]);
        assert!(s.tick(120).unwrap().is_empty());
        assert_eq!(s.tick(100), Err(SequencerError::TimeWentBackwards { last: 120, now: 100 }));
    }

    #[test]
    fn stopped_sequencer_is_silent() {
        let mut s = Sequencer::new();
        s.set_pattern(pat(vec![onset(DrumClass::Kick, 0, 1.0, 0.0)]));
        assert!(s.tick(5000).unwrap().is_empty());
        s.start(0);
        assert_eq!(s.tick(0).unwrap().len(), 1);
        s.stop();
        assert!(s.tick(10_000).unwrap().is_empty());
    }

    #[test]
    fn start_mid_loop_skips_past_onsets() {
        let mut s = Sequencer::new();
        s.set_pattern(pat(vec![
            onset(DrumClass::Kick, 0, 1.0, -0.5),
            onset(DrumClass::Snare, 8, 1.0, 0.5),
            onset(DrumClass::Snare, 4, 1.0, 0.0),
        ]));
        s.start(970);
        let ev = s.tick(3839).unwrap();
        assert_eq!(ev.iter().map(|e| e.fire_at).collect::<Vec<_>>(), vec![990, 3810]);
    }

    #[test]
    fn swaps_never_split_a_step() {
        let a = pat((0..32).map(|s| onset(DrumClass::Kick, s, 1.0, 0.0)).collect());
        let b = pat((0..32).map(|s| onset(DrumClass::Snare, s, 1.0, 0.0)).collect());
        let mut s = Sequencer::new();
        s.set_pattern(a);
        s.start(0);
        s.tick(500).unwrap();
        s.set_pattern(b);
        // step 4 latched at 420 with the old pattern, step 5 latches at 540
        let ev = s.tick(700).unwrap();
        let classes: Vec<(u64, DrumClass)> = ev.iter().map(|e| (e.fire_at, e.class)).collect();
        assert_eq!(classes, vec![(600, DrumClass::Snare)]);
        let mut s2 = Sequencer::new();
        s2.set_pattern(pat((0..32).map(|s| onset(DrumClass::Kick, s, 1.0, 0.0)).collect()));
        s2.start(0);
        s2.tick(450).unwrap();
        s2.set_pattern(pat((0..32).map(|s| onset(DrumClass::Snare, s, 1.0, 0.0)).collect()));
        assert_eq!(s2.tick(480).unwrap()[0].class, DrumClass::Kick);
    }

    #[test]
    fn pump_pairs_note_offs() {
        let mut s = Sequencer::new();
        s.set_pattern(pat(vec![onset(DrumClass::Kick, 0, 1.0, 0.0), onset(DrumClass::Kick, 1, 0.5, 0.0)]));
        s.start(0);
        let mut sink = CaptureSink::new();
        s.pump(3839, &mut sink).unwrap();
        let ev = sink.events();
        let summary: Vec<(u64, NoteKind)> = ev.iter().map(|e| (e.at, e.kind)).collect();
        assert_eq!(
            summary,
            vec![(0, NoteKind::On), (120, NoteKind::Off), (120, NoteKind::On), (240, NoteKind::Off)]
        );
        assert!(ev.iter().all(|e| e.note == 36));
    }

    #[test]
    fn stop_releases_sounding_notes() {
        let mut s = Sequencer::new();
        s.set_pattern(pat(vec![onset(DrumClass::HihatClosed, 0, 1.0, 0.0)]));
        s.start(0);
        let mut sink = CaptureSink::new();
        s.pump(10, &mut sink).unwrap();
        let offs = s.stop();
        assert_eq!(offs.len(), 1);
        assert_eq!((offs[0].kind, offs[0].at, offs[0].note), (NoteKind::Off, 10, 42));
    }

    #[test]
    fn tempo_bounds() {
        let mut s = Sequencer::new();
        assert!(s.set_tempo(20.0).is_ok());
        assert!(s.set_tempo(999.0).is_ok());
        assert_eq!(s.set_tempo(19.9), Err(SequencerError::InvalidTempo(19.9)));
        assert!(s.set_tempo(f64::NAN).is_err());
    }

    #[test]
    fn clip_interpolation() {
        let clip = AutomationClip::from_samples(vec![
            (0, LatentVector::new(0.0, 0.0)),
            (3840, LatentVector::new(1.0, 1.0)),
        ])
        .unwrap();
        assert_eq!(clip.value_at(1920), Some(LatentVector::new(0.5, 0.5)));
        assert_eq!(clip.value_at(9999), Some(LatentVector::new(1.0, 1.0)));
        let late = AutomationClip::from_samples(vec![(100, LatentVector::new(2.0, 3.0))]).unwrap();
        assert_eq!(late.value_at(0), Some(LatentVector::new(2.0, 3.0)));
        assert_eq!(AutomationClip::new().value_at(0), None);
        assert!(AutomationClip::from_samples(vec![(5, LatentVector::default()), (5, LatentVector::default())]).is_err());
    }

    #[test]
    fn clip_push_rules() {
        let mut c = AutomationClip::new();
        c.push(10, LatentVector::new(1.0, 0.0)).unwrap();
        c.push(10, LatentVector::new(2.0, 0.0)).unwrap();
        assert_eq!(c.samples(), &[(10, LatentVector::new(2.0, 0.0))]);
        assert!(c.push(5, LatentVector::default()).is_err());
    }

    #[test]
    fn latent_requires_model_and_recording_requires_play() {
        let mut s = Sequencer::new();
        assert_eq!(s.set_latent(LatentVector::default()), Err(SequencerError::NoModel));
        assert_eq!(s.start_recording(), Err(SequencerError::NotPlaying));
        s.start(0);
        s.start_recording().unwrap();
        let clip = s.stop_recording();
        assert!(clip.is_empty());
        s.set_model(Arc::new(VaeModel::new(1)));
        assert_eq!(s.play_automation(clip), Err(SequencerError::EmptyClip));
    }

    #[test]
    fn set_latent_while_stopped_publishes_silently() {
        let mut s = Sequencer::new();
        s.set_model(Arc::new(VaeModel::new(2)));
        let z = LatentVector::new(0.3, -0.4);
        let a = s.set_latent(z).unwrap();
        let b = s.set_latent(z).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.pattern(), Some(b));
        assert!(s.tick(10_000).unwrap().is_empty());
        assert_eq!(s.transport().song_position, 0);
    }

    #[test]
    fn recording_captures_positions() {
        let mut s = Sequencer::new();
        s.set_model(Arc::new(VaeModel::new(3)));
        s.start(0);
        s.start_recording().unwrap();
        s.set_latent(LatentVector::new(0.0, 0.0)).unwrap();
        s.tick(3840).unwrap();
        s.set_latent(LatentVector::new(1.0, 1.0)).unwrap();
        let clip = s.stop_recording();
        assert_eq!(
            clip.samples(),
            &[(0, LatentVector::new(0.0, 0.0)), (3840, LatentVector::new(1.0, 1.0))]
        );
    }

    #[test]
    fn listener_sees_publications() {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let mut s = Sequencer::new();
        s.on_pattern_change(move |c| log.lock().unwrap().push(c.position));
        s.set_pattern(Pattern::default());
        s.start(0);
        s.tick(200).unwrap();
        s.set_pattern(Pattern::default());
        assert_eq!(*seen.lock().unwrap(), vec![0, 200]);
    }

    #[test]
    fn port_sink_bytes() {
        let mut sink = MidiPortSink::new(RawMidiOutput(Vec::new()));
        let on = MidiEvent { at: 0, kind: NoteKind::On, class: DrumClass::Kick, note: 36, velocity: 100 };
        sink.send(&on).unwrap();
        sink.send(&MidiEvent { kind: NoteKind::Off, velocity: 0, ..on }).unwrap();
        assert_eq!(sink.into_inner().0, vec![0x99, 36, 100, 0x89, 36, 0]);
    }

    #[test]
    fn smf_sink_reparses() {
        let mut s = Sequencer::new();
        s.set_pattern(pat(vec![onset(DrumClass::Kick, 0, 1.0, 0.0), onset(DrumClass::Snare, 4, 0.8, 0.25)]));
        s.start(0);
        let mut sink = SmfSink::new();
        s.pump(3840 * 2 - 1, &mut sink).unwrap();
        let bytes = sink.to_smf(120.0).unwrap();
        let file = parse_smf(&bytes).unwrap();
        let notes = crate::midi::extract_drum_notes(&file);
        assert_eq!(notes.len(), 4);
        assert_eq!(notes.iter().map(|n| n.tick).collect::<Vec<_>>(), vec![0, 495, 3840, 4335]);
    }

    #[test]
    fn clock_driver_emits_in_real_time() {
        let handle = SequencerHandle::default();
        {
            let mut s = handle.lock();
            s.set_tempo(999.0).unwrap();
            s.set_pattern(pat((0..32).map(|st| onset(DrumClass::Kick, st, 1.0, 0.0)).collect()));
            s.start(0);
        }
        let sink = CaptureSink::new();
        let driver = ClockDriver::spawn(handle.clone(), Box::new(sink.clone()), 500.0);
        std::thread::sleep(Duration::from_millis(300));
        driver.stop();
        // 999 bpm is ~7992 ticks/s, so ~2400 ticks or ~20 sixteenths in 300 ms
        let ons = sink.events().iter().filter(|e| e.kind == NoteKind::On).count();
        assert!((5..=40).contains(&ons), "{ons} note-ons");
        assert!(handle.lock().transport().song_position > 0);
    }
}
