//! Grid representation of drum patterns.
//!
//! A two-bar 4/4 pattern is a 9×32 grid of sixteenth-note cells holding an
//! onset flag, a normalized velocity and a microtiming offset measured in
//! thirty-second notes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{extract_drum_notes, map_note_to_class, parse_smf, DrumClass, DrumMap, DrumNote, MidiError};

pub const NUM_CLASSES: usize = DrumClass::COUNT;
pub const NUM_STEPS: usize = 32;
/// Cells per matrix.
pub const NUM_CELLS: usize = NUM_CLASSES * NUM_STEPS;
/// Length of a flattened tensor: onsets, then velocities, then offsets.
pub const NUM_FEATURES: usize = 3 * NUM_CELLS;

/// Largest representable offset; the offset interval is half-open at +1.
pub const OFFSET_MAX: f64 = 1.0 - 1.0 / (1u32 << 23) as f64;
/// Quietest velocity a decoded onset may carry.
pub const MIN_VELOCITY: f64 = 1.0 / 127.0;

pub type Grid = [[f64; NUM_STEPS]; NUM_CLASSES];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("step {0} is outside the 32-step window")]
    StepOutOfRange(usize),
    #[error("velocity {0} is outside (0, 1]")]
    VelocityOutOfRange(f64),
    #[error("offset {0} is outside [-1, 1)")]
    OffsetOutOfRange(f64),
    #[error("two onsets for {class} at step {step}")]
    DuplicateCell { class: DrumClass, step: usize },
    #[error("tensor cell [{class}][{step}]: {reason}")]
    InvalidCell { class: usize, step: usize, reason: &'static str },
    #[error("expected {expected} features, got {actual}")]
    FeatureCount { expected: usize, actual: usize },
}

/// One onset on the sixteenth-note grid.
///
/// `step` is relative to the pattern (0–31) inside a [`Pattern`], and
/// absolute from song start when produced by [`quantize_notes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOnset {
    pub class: DrumClass,
    pub step: usize,
    pub velocity: f64,
    pub offset: f64,
}

impl GridOnset {
    fn check_values(&self) -> Result<(), EncodingError> {
        if !(self.velocity > 0.0 && self.velocity <= 1.0) {
            return Err(EncodingError::VelocityOutOfRange(self.velocity));
        }
        if !(-1.0..=OFFSET_MAX).contains(&self.offset) {
            return Err(EncodingError::OffsetOutOfRange(self.offset));
        }
        Ok(())
    }
}

/// A two-bar pattern: at most one onset per (class, step) cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub onsets: Vec<GridOnset>,
}

impl Pattern {
    pub const LENGTH_STEPS: usize = NUM_STEPS;

    /// Validates and orders onsets by step, then class.
    pub fn new(mut onsets: Vec<GridOnset>) -> Result<Self, EncodingError> {
        onsets.sort_by_key(|o| (o.step, o.class));
        let p = Pattern { onsets };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        let mut seen = [[false; NUM_STEPS]; NUM_CLASSES];
        for o in &self.onsets {
            if o.step >= NUM_STEPS {
                return Err(EncodingError::StepOutOfRange(o.step));
            }
            o.check_values()?;
            let cell = &mut seen[o.class.index()][o.step];
            if *cell {
                return Err(EncodingError::DuplicateCell { class: o.class, step: o.step });
            }
            *cell = true;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.onsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }
}

/// The three matrices a pattern encodes to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhythmTensor {
    pub onsets: Grid,
    pub velocities: Grid,
    pub offsets: Grid,
}

impl Default for RhythmTensor {
    fn default() -> Self {
        let zero = [[0.0; NUM_STEPS]; NUM_CLASSES];
        RhythmTensor { onsets: zero, velocities: zero, offsets: zero }
    }
}

fn flatten_into(grids: [&Grid; 3], out: &mut [f64]) {
    for (g, grid) in grids.into_iter().enumerate() {
        for (i, row) in grid.iter().enumerate() {
            let start = g * NUM_CELLS + i * NUM_STEPS;
            out[start..start + NUM_STEPS].copy_from_slice(row);
        }
    }
}

fn grids_from(features: &[f64]) -> Result<[Grid; 3], EncodingError> {
    if features.len() != NUM_FEATURES {
        return Err(EncodingError::FeatureCount { expected: NUM_FEATURES, actual: features.len() });
    }
    let mut grids = [[[0.0; NUM_STEPS]; NUM_CLASSES]; 3];
    for (g, grid) in grids.iter_mut().enumerate() {
        for (i, row) in grid.iter_mut().enumerate() {
            let start = g * NUM_CELLS + i * NUM_STEPS;
            row.copy_from_slice(&features[start..start + NUM_STEPS]);
        }
    }
    Ok(grids)
}

impl RhythmTensor {
    /// Row-major `[onsets | velocities | offsets]`, 864 values.
    pub fn to_features(&self) -> Vec<f64> {
        let mut out = vec![0.0; NUM_FEATURES];
        self.write_features(&mut out);
        out
    }

    pub fn write_features(&self, out: &mut [f64]) {
        flatten_into([&self.onsets, &self.velocities, &self.offsets], out);
    }

    pub fn from_features(features: &[f64]) -> Result<Self, EncodingError> {
        let [onsets, velocities, offsets] = grids_from(features)?;
        let t = RhythmTensor { onsets, velocities, offsets };
        t.validate()?;
        Ok(t)
    }

    /// Checks value ranges and the onset/velocity/offset coupling.
    pub fn validate(&self) -> Result<(), EncodingError> {
        for i in 0..NUM_CLASSES {
            for t in 0..NUM_STEPS {
                let (on, vel, off) = (self.onsets[i][t], self.velocities[i][t], self.offsets[i][t]);
                let bad = |reason| Err(EncodingError::InvalidCell { class: i, step: t, reason });
                if on != 0.0 && on != 1.0 {
                    return bad("onset is not 0 or 1");
                }
                if !(0.0..=1.0).contains(&vel) {
                    return bad("velocity outside [0, 1]");
                }
                if !(-1.0..1.0).contains(&off) {
                    return bad("offset outside [-1, 1)");
                }
                if on == 0.0 && (vel != 0.0 || off != 0.0) {
                    return bad("velocity or offset set on a silent cell");
                }
            }
        }
        Ok(())
    }

    pub fn onset_count(&self) -> usize {
        self.onsets.iter().flatten().filter(|v| **v == 1.0).count()
    }
}

/// Raw decoder output, one 9×32 matrix per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderOutput {
    pub onset_probs: Grid,
    pub velocities: Grid,
    pub offsets: Grid,
}

impl DecoderOutput {
    pub fn from_features(features: &[f64]) -> Result<Self, EncodingError> {
        let [onset_probs, velocities, offsets] = grids_from(features)?;
        Ok(DecoderOutput { onset_probs, velocities, offsets })
    }

    pub fn to_features(&self) -> Vec<f64> {
        let mut out = vec![0.0; NUM_FEATURES];
        flatten_into([&self.onset_probs, &self.velocities, &self.offsets], &mut out);
        out
    }
}

impl From<&RhythmTensor> for DecoderOutput {
    fn from(t: &RhythmTensor) -> Self {
        DecoderOutput { onset_probs: t.onsets, velocities: t.velocities, offsets: t.offsets }
    }
}

/// Snaps drum notes to the nearest sixteenth note.
///
/// Ties round up to the later step. The offset is the distance to that step
/// in thirty-second notes, so an onset a full 32nd early reads as -1. When
/// two notes land in one cell the louder wins, then the one closer to the
/// grid, then the earlier one.
pub fn quantize_notes(notes: &[DrumNote], ppq: u16, map: &DrumMap) -> Vec<GridOnset> {
    let ppq = u64::from(ppq.max(1));
    // (step, class) -> (onset, tick)
    let mut cells: BTreeMap<(usize, DrumClass), (GridOnset, u64)> = BTreeMap::new();
    for note in notes {
        let Some(class) = map_note_to_class(note.note_number, map) else {
            continue;
        };
        // step = floor(tick / (ppq/4) + 1/2), exact in integers
        let step = (8 * note.tick + ppq) / (2 * ppq);
        let numer = 8 * note.tick as i128 - 2 * (step as i128) * ppq as i128;
        let offset = (numer as f64 / ppq as f64).clamp(-1.0, OFFSET_MAX);
        let onset = GridOnset {
            class,
            step: step as usize,
            velocity: f64::from(note.velocity.clamp(1, 127)) / 127.0,
            offset,
        };
        cells
            .entry((onset.step, class))
            .and_modify(|(kept, kept_tick)| {
                let louder = onset.velocity > kept.velocity;
                let tighter = onset.velocity == kept.velocity && onset.offset.abs() < kept.offset.abs();
                let earlier = onset.velocity == kept.velocity
                    && onset.offset.abs() == kept.offset.abs()
                    && note.tick < *kept_tick;
                if louder || tighter || earlier {
                    *kept = onset;
                    *kept_tick = note.tick;
                }
            })
            .or_insert((onset, note.tick));
    }
    cells.into_values().map(|(o, _)| o).collect()
}

/// Cuts absolute-step onsets into consecutive non-overlapping 32-step
/// patterns. Empty windows are skipped.
pub fn window_patterns(onsets: &[GridOnset]) -> Vec<Pattern> {
    let mut windows: BTreeMap<usize, Vec<GridOnset>> = BTreeMap::new();
    for o in onsets {
        let mut rebased = *o;
        rebased.step = o.step % NUM_STEPS;
        windows.entry(o.step / NUM_STEPS).or_default().push(rebased);
    }
    windows
        .into_values()
        .filter_map(|mut onsets| {
            // keep the first onset per cell if the caller did not merge collisions
            onsets.sort_by_key(|o| (o.step, o.class));
            onsets.dedup_by_key(|o| (o.step, o.class));
            Pattern::new(onsets).ok()
        })
        .collect()
}

/// Parses a MIDI file and cuts its drum track into two-bar patterns.
/// A file without drum-channel notes yields no patterns.
pub fn patterns_from_midi(bytes: &[u8], map: &DrumMap) -> Result<Vec<Pattern>, MidiError> {
    let file = parse_smf(bytes)?;
    let notes = extract_drum_notes(&file);
    Ok(window_patterns(&quantize_notes(&notes, file.ppq, map)))
}

pub fn encode_pattern(p: &Pattern) -> Result<RhythmTensor, EncodingError> {
    p.validate()?;
    let mut t = RhythmTensor::default();
    for o in &p.onsets {
        let (i, s) = (o.class.index(), o.step);
        t.onsets[i][s] = 1.0;
        t.velocities[i][s] = o.velocity;
        t.offsets[i][s] = o.offset;
    }
    Ok(t)
}

/// Thresholds decoder output into a pattern.
///
/// A cell fires only if its probability is strictly above `threshold`.
pub fn decode_tensor(raw: &DecoderOutput, threshold: f64) -> Pattern {
    let mut onsets = Vec::new();
    for step in 0..NUM_STEPS {
        for class in DrumClass::ALL {
            let i = class.index();
            if raw.onset_probs[i][step] > threshold {
                // max/min rather than clamp so a NaN lands on the floor
                #[allow(clippy::manual_clamp)]
                let velocity = raw.velocities[i][step].max(MIN_VELOCITY).min(1.0);
                let offset = raw.offsets[i][step];
                let offset = if offset.is_finite() { offset.clamp(-1.0, OFFSET_MAX) } else { 0.0 };
                onsets.push(GridOnset { class, step, velocity, offset });
            }
        }
    }
    Pattern { onsets }
}
