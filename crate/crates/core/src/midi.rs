//! Standard MIDI File codec and General MIDI drum extraction.
//!
//! Reads formats 0 and 1 with PPQ division (running status honored), writes
//! format 0 without running status. Only note-ons on the GM percussion
//! channel (zero-based index 9) survive extraction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::Pattern;

/// Zero-based index of GM channel #10.
pub const DRUM_CHANNEL: u8 = 9;

/// Largest value a four-byte VLQ can carry.
pub const VLQ_MAX: u32 = (1 << 28) - 1;

pub const META_END_OF_TRACK: u8 = 0x2F;
pub const META_TEMPO: u8 = 0x51;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidiError {
    #[error("unexpected end of data at byte {0}")]
    Truncated(usize),
    #[error("variable-length quantity at byte {0} is longer than four bytes")]
    MalformedVlq(usize),
    #[error("value {0} does not fit in a variable-length quantity")]
    VlqOverflow(u32),
    #[error("bad magic: expected \"MThd\"")]
    BadMagic,
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error("ticks per quarter note must be positive")]
    ZeroPpq,
    #[error("track {0} has no End-of-Track event")]
    MissingEndOfTrack(usize),
    #[error("data byte without running status at byte {0}")]
    NoRunningStatus(usize),
    #[error("invalid status byte {status:#04x} at byte {pos}")]
    InvalidStatus { status: u8, pos: usize },
    #[error("ppq must be at least 96 for export, got {0}")]
    PpqTooSmall(u16),
    #[error("tempo must be a positive finite bpm that fits a tempo event, got {0}")]
    InvalidTempo(f64),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("drum map line {line}: {reason}")]
    DrumMapSyntax { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, MidiError>;

/// Decodes a variable-length quantity starting at `pos`.
///
/// Returns the value and the position just past its last byte.
pub fn read_vlq(bytes: &[u8], pos: usize) -> Result<(u32, usize)> {
    let mut value: u32 = 0;
    for i in 0..4 {
        let b = *bytes.get(pos + i).ok_or(MidiError::Truncated(pos + i))?;
        value = (value << 7) | u32::from(b & 0x7F);
        if b & 0x80 == 0 {
            return Ok((value, pos + i + 1));
        }
    }
    Err(MidiError::MalformedVlq(pos))
}

/// Appends `value` as a variable-length quantity.
pub fn write_vlq(value: u32, out: &mut Vec<u8>) -> Result<()> {
    if value > VLQ_MAX {
        return Err(MidiError::VlqOverflow(value));
    }
    let mut groups = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        groups[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let cont = if i > 0 { 0x80 } else { 0 };
        out.push(groups[i] | cont);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmfFormat {
    SingleTrack,
    MultiTrack,
}

impl SmfFormat {
    fn code(self) -> u16 {
        match self {
            SmfFormat::SingleTrack => 0,
            SmfFormat::MultiTrack => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMessage {
    NoteOff { note: u8, velocity: u8 },
    NoteOn { note: u8, velocity: u8 },
    PolyPressure { note: u8, pressure: u8 },
    ControlChange { controller: u8, value: u8 },
    ProgramChange { program: u8 },
    ChannelPressure { pressure: u8 },
    PitchBend { value: u16 },
}

impl ChannelMessage {
    fn status_nibble(&self) -> u8 {
        match self {
            ChannelMessage::NoteOff { .. } => 0x80,
            ChannelMessage::NoteOn { .. } => 0x90,
            ChannelMessage::PolyPressure { .. } => 0xA0,
            ChannelMessage::ControlChange { .. } => 0xB0,
            ChannelMessage::ProgramChange { .. } => 0xC0,
            ChannelMessage::ChannelPressure { .. } => 0xD0,
            ChannelMessage::PitchBend { .. } => 0xE0,
        }
    }

    fn data_len(status: u8) -> usize {
        match status & 0xF0 {
            0xC0 | 0xD0 => 1,
            _ => 2,
        }
    }

    fn from_parts(status: u8, d1: u8, d2: u8) -> Self {
        match status & 0xF0 {
            0x80 => ChannelMessage::NoteOff { note: d1, velocity: d2 },
            0x90 => ChannelMessage::NoteOn { note: d1, velocity: d2 },
            0xA0 => ChannelMessage::PolyPressure { note: d1, pressure: d2 },
            0xB0 => ChannelMessage::ControlChange { controller: d1, value: d2 },
            0xC0 => ChannelMessage::ProgramChange { program: d1 },
            0xD0 => ChannelMessage::ChannelPressure { pressure: d1 },
            _ => ChannelMessage::PitchBend {
                value: u16::from(d1) | (u16::from(d2) << 7),
            },
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match *self {
            ChannelMessage::NoteOff { note, velocity } | ChannelMessage::NoteOn { note, velocity } => {
                out.extend_from_slice(&[note & 0x7F, velocity & 0x7F])
            }
            ChannelMessage::PolyPressure { note, pressure } => {
                out.extend_from_slice(&[note & 0x7F, pressure & 0x7F])
            }
            ChannelMessage::ControlChange { controller, value } => {
                out.extend_from_slice(&[controller & 0x7F, value & 0x7F])
            }
            ChannelMessage::ProgramChange { program } => out.push(program & 0x7F),
            ChannelMessage::ChannelPressure { pressure } => out.push(pressure & 0x7F),
            ChannelMessage::PitchBend { value } => {
                out.extend_from_slice(&[(value & 0x7F) as u8, ((value >> 7) & 0x7F) as u8])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Channel { channel: u8, message: ChannelMessage },
    /// Meta event; unknown types are kept verbatim.
    Meta { kind: u8, data: Vec<u8> },
    /// System exclusive (`0xF0`) or escape (`0xF7`) event, kept verbatim.
    SysEx { status: u8, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackEvent {
    pub delta: u32,
    pub kind: EventKind,
}

impl TrackEvent {
    pub fn end_of_track(delta: u32) -> Self {
        TrackEvent {
            delta,
            kind: EventKind::Meta { kind: META_END_OF_TRACK, data: Vec::new() },
        }
    }

    pub fn is_end_of_track(&self) -> bool {
        matches!(&self.kind, EventKind::Meta { kind, .. } if *kind == META_END_OF_TRACK)
    }

    /// Microseconds per quarter note, if this is a tempo event.
    pub fn tempo(&self) -> Option<u32> {
        match &self.kind {
            EventKind::Meta { kind, data } if *kind == META_TEMPO && data.len() == 3 => {
                Some(u32::from(data[0]) << 16 | u32::from(data[1]) << 8 | u32::from(data[2]))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    pub format: SmfFormat,
    pub ppq: u16,
    pub tracks: Vec<Vec<TrackEvent>>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(MidiError::Truncated(self.pos))?;
        let slice = self.bytes.get(self.pos..end).ok_or(MidiError::Truncated(self.bytes.len()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let (v, next) = read_vlq(self.bytes, self.pos)?;
        self.pos = next;
        Ok(v)
    }
}

/// Parses a complete Standard MIDI File.
pub fn parse_smf(bytes: &[u8]) -> Result<MidiFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != b"MThd" {
        return Err(MidiError::BadMagic);
    }
    cur.pos = 4;
    let header_len = cur.u32()? as usize;
    let header = cur.take(header_len)?;
    if header.len() < 6 {
        return Err(MidiError::Truncated(cur.pos));
    }
    let format = match u16::from_be_bytes([header[0], header[1]]) {
        0 => SmfFormat::SingleTrack,
        1 => SmfFormat::MultiTrack,
        other => return Err(MidiError::UnsupportedFormat(other)),
    };
    let ntracks = u16::from_be_bytes([header[2], header[3]]) as usize;
    let division = u16::from_be_bytes([header[4], header[5]]);
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::ZeroPpq);
    }

    let mut tracks = Vec::with_capacity(ntracks);
    while tracks.len() < ntracks {
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        let start = cur.pos;
        let body = cur.take(len)?;
        if id == b"MTrk" {
            tracks.push(parse_track(body, start, tracks.len())?);
        }
    }
    Ok(MidiFile { format, ppq: division, tracks })
}

fn parse_track(body: &[u8], base: usize, index: usize) -> Result<Vec<TrackEvent>> {
    let mut cur = Cursor { bytes: body, pos: 0 };
    let mut events = Vec::new();
    let mut running: Option<u8> = None;
    let rebase = |e: MidiError| match e {
        MidiError::Truncated(p) => MidiError::Truncated(base + p),
        MidiError::MalformedVlq(p) => MidiError::MalformedVlq(base + p),
        other => other,
    };
    while cur.pos < body.len() {
        let delta = cur.vlq().map_err(rebase)?;
        let first = cur.u8().map_err(rebase)?;
        let kind = match first {
            0xFF => {
                running = None;
                let kind = cur.u8().map_err(rebase)?;
                let len = cur.vlq().map_err(rebase)? as usize;
                let data = cur.take(len).map_err(rebase)?.to_vec();
                EventKind::Meta { kind, data }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.vlq().map_err(rebase)? as usize;
                let data = cur.take(len).map_err(rebase)?.to_vec();
                EventKind::SysEx { status: first, data }
            }
            0x80..=0xEF => {
                running = Some(first);
                channel_event(&mut cur, first, None).map_err(rebase)?
            }
            0x00..=0x7F => {
                let status = running.ok_or(MidiError::NoRunningStatus(base + cur.pos - 1))?;
                channel_event(&mut cur, status, Some(first)).map_err(rebase)?
            }
            status => {
                return Err(MidiError::InvalidStatus { status, pos: base + cur.pos - 1 });
            }
        };
        let event = TrackEvent { delta, kind };
        let done = event.is_end_of_track();
        events.push(event);
        if done {
            return Ok(events);
        }
    }
    Err(MidiError::MissingEndOfTrack(index))
}

fn channel_event(cur: &mut Cursor<'_>, status: u8, first_data: Option<u8>) -> Result<EventKind> {
    let d1 = match first_data {
        Some(d) => d,
        None => cur.u8()?,
    };
    let d2 = if ChannelMessage::data_len(status) == 2 { cur.u8()? } else { 0 };
    Ok(EventKind::Channel {
        channel: status & 0x0F,
        message: ChannelMessage::from_parts(status, d1 & 0x7F, d2 & 0x7F),
    })
}

impl MidiFile {
    /// Serializes the file. Running status is never emitted.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&self.format.code().to_be_bytes());
        out.extend_from_slice(&(self.tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.ppq.to_be_bytes());
        for (i, track) in self.tracks.iter().enumerate() {
            if !track.last().is_some_and(TrackEvent::is_end_of_track) {
                return Err(MidiError::MissingEndOfTrack(i));
            }
            let mut body = Vec::new();
            for ev in track {
                write_vlq(ev.delta, &mut body)?;
                match &ev.kind {
                    EventKind::Channel { channel, message } => {
                        body.push(message.status_nibble() | (channel & 0x0F));
                        message.write_data(&mut body);
                    }
                    EventKind::Meta { kind, data } => {
                        body.push(0xFF);
                        body.push(*kind);
                        write_vlq(data.len() as u32, &mut body)?;
                        body.extend_from_slice(data);
                    }
                    EventKind::SysEx { status, data } => {
                        body.push(*status);
                        write_vlq(data.len() as u32, &mut body)?;
                        body.extend_from_slice(data);
                    }
                }
            }
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(body.len() as u32).to_be_bytes());
            out.extend_from_slice(&body);
        }
        Ok(out)
    }
}

/// A drum onset as found in a MIDI file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrumNote {
    pub tick: u64,
    pub note_number: u8,
    pub velocity: u8,
    pub channel: u8,
}

/// Collects note-ons on the GM drum channel from every track.
///
/// Output is sorted by tick, then note number. Note-on with velocity 0 is a
/// note-off and is skipped, as are all durations.
pub fn extract_drum_notes(file: &MidiFile) -> Vec<DrumNote> {
    let mut notes = Vec::new();
    for track in &file.tracks {
        let mut tick: u64 = 0;
        for ev in track {
            tick += u64::from(ev.delta);
            if let EventKind::Channel {
                channel: DRUM_CHANNEL,
                message: ChannelMessage::NoteOn { note, velocity },
            } = ev.kind
            {
                if velocity > 0 {
                    notes.push(DrumNote { tick, note_number: note, velocity, channel: DRUM_CHANNEL });
                }
            }
        }
    }
    notes.sort_by_key(|n| (n.tick, n.note_number));
    notes
}

/// The nine drum voices. The discriminant is the tensor row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrumClass {
    Kick = 0,
    Snare = 1,
    HihatClosed = 2,
    HihatOpen = 3,
    TomLow = 4,
    TomMid = 5,
    TomHigh = 6,
    Clap = 7,
    Rim = 8,
}

impl DrumClass {
    pub const COUNT: usize = 9;

    pub const ALL: [DrumClass; 9] = [
        DrumClass::Kick,
        DrumClass::Snare,
        DrumClass::HihatClosed,
        DrumClass::HihatOpen,
        DrumClass::TomLow,
        DrumClass::TomMid,
        DrumClass::TomHigh,
        DrumClass::Clap,
        DrumClass::Rim,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DrumClass::Kick => "kick",
            DrumClass::Snare => "snare",
            DrumClass::HihatClosed => "hihat_closed",
            DrumClass::HihatOpen => "hihat_open",
            DrumClass::TomLow => "tom_low",
            DrumClass::TomMid => "tom_mid",
            DrumClass::TomHigh => "tom_high",
            DrumClass::Clap => "clap",
            DrumClass::Rim => "rim",
        }
    }
}

impl fmt::Display for DrumClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DrumClass {
    type Err = String;

    /// Accepts `hihat_closed`, `HihatClosed`, `hihat-closed` and similar.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-' | ' '))
            .map(|c| c.to_ascii_lowercase())
            .collect();
        DrumClass::ALL
            .into_iter()
            .find(|c| c.name().replace('_', "") == key)
            .ok_or_else(|| format!("unknown drum class {s:?}"))
    }
}

/// Total map from MIDI note number to drum class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrumMap {
    table: [Option<DrumClass>; 128],
}

impl Default for DrumMap {
    /// General MIDI percussion names folded onto the nine classes.
    fn default() -> Self {
        use DrumClass::*;
        let mut map = DrumMap::empty();
        let rows: [(u8, DrumClass); 15] = [
            (35, Kick),
            (36, Kick),
            (38, Snare),
            (40, Snare),
            (42, HihatClosed),
            (44, HihatClosed),
            (46, HihatOpen),
            (41, TomLow),
            (43, TomLow),
            (45, TomLow),
            (47, TomMid),
            (48, TomMid),
            (50, TomHigh),
            (39, Clap),
            (37, Rim),
        ];
        for (note, class) in rows {
            map.set(note, Some(class));
        }
        map
    }
}

impl DrumMap {
    pub fn empty() -> Self {
        DrumMap { table: [None; 128] }
    }

    pub fn set(&mut self, note: u8, class: Option<DrumClass>) {
        if let Some(slot) = self.table.get_mut(usize::from(note)) {
            *slot = class;
        }
    }

    pub fn get(&self, note: u8) -> Option<DrumClass> {
        self.table.get(usize::from(note)).copied().flatten()
    }

    /// Parses the override format: one `<note> <class>` pair per line,
    /// separated by whitespace, `=` or `:`. `#` starts a comment. Notes not
    /// listed stay unmapped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = DrumMap::empty();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |reason: String| MidiError::DrumMapSyntax { line: i + 1, reason };
            let mut parts = line
                .split(|c: char| c.is_whitespace() || c == '=' || c == ':')
                .filter(|p| !p.is_empty());
            let (Some(note), Some(class), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(syntax("expected `<note> <class>`".into()));
            };
            let note: u8 = note
                .parse()
                .ok()
                .filter(|n| *n < 128)
                .ok_or_else(|| syntax(format!("note number {note:?} is not in 0-127")))?;
            let class = class.parse::<DrumClass>().map_err(syntax)?;
            map.set(note, Some(class));
        }
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (note, class) in self.table.iter().enumerate() {
            if let Some(class) = class {
                s.push_str(&format!("{note} = {class}\n"));
            }
        }
        s
    }
}

pub fn map_note_to_class(note_number: u8, map: &DrumMap) -> Option<DrumClass> {
    map.get(note_number)
}

/// Note number emitted for each class on export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputNotes(pub [u8; DrumClass::COUNT]);

impl Default for OutputNotes {
    fn default() -> Self {
        // kick, snare, hh closed, hh open, low tom, mid tom, high tom, clap, rim
        OutputNotes([36, 38, 42, 46, 45, 47, 50, 39, 37])
    }
}

impl OutputNotes {
    pub fn note(&self, class: DrumClass) -> u8 {
        self.0[class.index()]
    }
}

/// Note-on tick for an onset at `step` with microtiming `offset`.
///
/// Both terms round half away from zero. Ticks that would land before zero
/// are pinned to zero.
pub fn onset_tick(step: usize, offset: f64, ppq: u16) -> u64 {
    let sixteenth = f64::from(ppq) / 4.0;
    let thirty_second = f64::from(ppq) / 8.0;
    let tick = (step as f64 * sixteenth).round() + (offset * thirty_second).round();
    tick.max(0.0) as u64
}

/// MIDI velocity for a normalized velocity in (0, 1].
pub fn midi_velocity(velocity: f64) -> u8 {
    (velocity * 127.0).round().clamp(1.0, 127.0) as u8
}

/// Renders a pattern as a format-0 file on the drum channel.
///
/// The tempo event comes first, each onset is a note-on followed by a
/// note-off one sixteenth later.
pub fn write_smf(pattern: &Pattern, ppq: u16, tempo_bpm: f64, notes: &OutputNotes) -> Result<Vec<u8>> {
    if ppq < 96 {
        return Err(MidiError::PpqTooSmall(ppq));
    }
    let micros = 60_000_000.0 / tempo_bpm;
    if !tempo_bpm.is_finite() || tempo_bpm <= 0.0 || !(1.0..=16_777_215.0).contains(&micros.round()) {
        return Err(MidiError::InvalidTempo(tempo_bpm));
    }
    pattern.validate().map_err(|e| MidiError::InvalidPattern(e.to_string()))?;
    let micros = micros.round() as u32;

    let sixteenth = (f64::from(ppq) / 4.0).round() as u64;
    // (tick, is_note_on, note, velocity); note-offs sort ahead of note-ons
    let mut timeline: Vec<(u64, bool, u8, u8)> = Vec::with_capacity(pattern.onsets.len() * 2);
    for onset in &pattern.onsets {
        let tick = onset_tick(onset.step, onset.offset, ppq);
        let note = notes.note(onset.class);
        timeline.push((tick, true, note, midi_velocity(onset.velocity)));
        timeline.push((tick + sixteenth, false, note, 0));
    }
    timeline.sort();

    let mut track = vec![TrackEvent {
        delta: 0,
        kind: EventKind::Meta { kind: META_TEMPO, data: micros.to_be_bytes()[1..].to_vec() },
    }];
    let mut now = 0u64;
    for (tick, on, note, velocity) in timeline {
        let delta = u32::try_from(tick - now).map_err(|_| MidiError::VlqOverflow(u32::MAX))?;
        now = tick;
        let message = if on {
            ChannelMessage::NoteOn { note, velocity }
        } else {
            ChannelMessage::NoteOff { note, velocity: 0 }
        };
        track.push(TrackEvent { delta, kind: EventKind::Channel { channel: DRUM_CHANNEL, message } });
    }
    track.push(TrackEvent::end_of_track(0));
    MidiFile { format: SmfFormat::SingleTrack, ppq, tracks: vec![track] }.to_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{GridOnset, Pattern};

    // Hand-assembled: format 0, ppq 480, note-on 36/100 at 0, note-off at 120, EoT.
    fn minimal_file(running_status: bool) -> Vec<u8> {
        let mut track = vec![0x00, 0x99, 36, 100, 0x78];
        if running_status {
            // note-on velocity 0 under the running 0x99 status
            track.extend_from_slice(&[36, 0]);
        } else {
            track.extend_from_slice(&[0x99, 36, 0]);
        }
        track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        let mut bytes = b"MThd".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0]);
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);
        bytes
    }

    #[test]
    fn vlq_examples() {
        assert_eq!(read_vlq(&[0x00], 0).unwrap(), (0, 1));
        assert_eq!(read_vlq(&[0x81, 0x48], 0).unwrap(), ((1 << 7) + 0x48, 2));
        assert_eq!(read_vlq(&[0xFF, 0xFF, 0xFF, 0x7F], 0).unwrap(), (268_435_455, 4));
        assert_eq!(read_vlq(&[0x55, 0x81, 0x48], 1).unwrap(), (200, 3));
    }

    #[test]
    fn vlq_errors() {
        assert_eq!(read_vlq(&[0x81], 0), Err(MidiError::Truncated(1)));
        assert_eq!(read_vlq(&[], 0), Err(MidiError::Truncated(0)));
        assert_eq!(read_vlq(&[0x80, 0x80, 0x80, 0x80, 0x00], 0), Err(MidiError::MalformedVlq(0)));
        assert_eq!(write_vlq(1 << 28, &mut Vec::new()), Err(MidiError::VlqOverflow(1 << 28)));
    }

    #[test]
    fn write_vlq_boundaries() {
        for (v, bytes) in [
            (0u32, vec![0x00]),
            (127, vec![0x7F]),
            (128, vec![0x81, 0x00]),
            (16_383, vec![0xFF, 0x7F]),
            (16_384, vec![0x81, 0x80, 0x00]),
            (VLQ_MAX, vec![0xFF, 0xFF, 0xFF, 0x7F]),
        ] {
            let mut out = Vec::new();
            write_vlq(v, &mut out).unwrap();
            assert_eq!(out, bytes, "value {v}");
        }
    }

    #[test]
    fn parses_minimal_file() {
        let file = parse_smf(&minimal_file(false)).unwrap();
        assert_eq!(file.format, SmfFormat::SingleTrack);
        assert_eq!(file.ppq, 480);
        assert_eq!(file.tracks.len(), 1);
        let track = &file.tracks[0];
        assert_eq!(track.len(), 3);
        assert_eq!(
            track[0],
            TrackEvent {
                delta: 0,
                kind: EventKind::Channel {
                    channel: 9,
                    message: ChannelMessage::NoteOn { note: 36, velocity: 100 }
                }
            }
        );
        assert_eq!(track[1].delta, 120);
        assert!(track[2].is_end_of_track());
    }

    #[test]
    fn running_status_gives_identical_events() {
        assert_eq!(parse_smf(&minimal_file(true)).unwrap(), parse_smf(&minimal_file(false)).unwrap());
    }

    #[test]
    fn rejects_bad_headers() {
        assert_eq!(parse_smf(b"RIFF\0\0\0\0WAVE"), Err(MidiError::BadMagic));

        let mut f2 = minimal_file(false);
        f2[9] = 2;
        assert_eq!(parse_smf(&f2), Err(MidiError::UnsupportedFormat(2)));

        let mut smpte = minimal_file(false);
        smpte[12] = 0xE7;
        smpte[13] = 0x28;
        assert_eq!(parse_smf(&smpte), Err(MidiError::SmpteDivision));

        let mut zero = minimal_file(false);
        zero[12] = 0;
        zero[13] = 0;
        assert_eq!(parse_smf(&zero), Err(MidiError::ZeroPpq));
    }

    #[test]
    fn rejects_truncated_and_unterminated_tracks() {
        let full = minimal_file(false);
        assert!(matches!(parse_smf(&full[..full.len() - 2]), Err(MidiError::Truncated(_))));

        // declared track body without End-of-Track
        let mut bytes = full[..14].to_vec();
        let track = [0x00, 0x99, 36, 100];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);
        assert_eq!(parse_smf(&bytes), Err(MidiError::MissingEndOfTrack(0)));
    }

    #[test]
    fn data_byte_without_status_is_an_error() {
        let mut bytes = minimal_file(false);
        bytes[23] = 0x24; // replace the first status byte with a data byte
        assert!(matches!(parse_smf(&bytes), Err(MidiError::NoRunningStatus(_))));
    }

    #[test]
    fn unknown_chunks_and_meta_are_preserved_or_skipped() {
        let mut bytes = minimal_file(false);
        // alien chunk between header and track
        let mut alien = b"XFIH".to_vec();
        alien.extend_from_slice(&[0, 0, 0, 2, 0xAB, 0xCD]);
        bytes.splice(14..14, alien);
        let file = parse_smf(&bytes).unwrap();
        assert_eq!(file.tracks[0].len(), 3);

        let track = vec![
            TrackEvent { delta: 0, kind: EventKind::Meta { kind: 0x7F, data: vec![1, 2, 3] } },
            TrackEvent { delta: 5, kind: EventKind::SysEx { status: 0xF0, data: vec![0x7E, 0xF7] } },
            TrackEvent::end_of_track(0),
        ];
        let file = MidiFile { format: SmfFormat::SingleTrack, ppq: 96, tracks: vec![track] };
        assert_eq!(parse_smf(&file.to_bytes().unwrap()).unwrap(), file);
    }

    #[test]
    fn tempo_events_are_retained() {
        let bytes = write_smf(&Pattern::default(), 480, 120.0, &OutputNotes::default()).unwrap();
        let file = parse_smf(&bytes).unwrap();
        assert_eq!(file.tracks[0][0].tempo(), Some(500_000));
    }

    fn file_with(events: Vec<(u32, u8, ChannelMessage)>) -> MidiFile {
        let mut track: Vec<TrackEvent> = events
            .into_iter()
            .map(|(delta, channel, message)| TrackEvent { delta, kind: EventKind::Channel { channel, message } })
            .collect();
        track.push(TrackEvent::end_of_track(0));
        MidiFile { format: SmfFormat::SingleTrack, ppq: 480, tracks: vec![track] }
    }

    #[test]
    fn extraction_keeps_only_drum_channel() {
        let on = |note, velocity| ChannelMessage::NoteOn { note, velocity };
        let file = file_with(vec![(0, 0, on(60, 80)), (0, 9, on(36, 100)), (10, 0, on(62, 80)), (10, 9, on(38, 90))]);
        let notes = extract_drum_notes(&file);
        assert_eq!(
            notes,
            vec![
                DrumNote { tick: 0, note_number: 36, velocity: 100, channel: 9 },
                DrumNote { tick: 20, note_number: 38, velocity: 90, channel: 9 },
            ]
        );
        let melodic = file_with(vec![(0, 0, on(60, 80)), (0, 3, on(36, 90))]);
        assert!(extract_drum_notes(&melodic).is_empty());
    }

    #[test]
    fn zero_velocity_note_on_is_a_note_off() {
        let on = |note, velocity| ChannelMessage::NoteOn { note, velocity };
        let file = file_with(vec![(0, 9, on(36, 90)), (120, 9, on(36, 0))]);
        assert_eq!(
            extract_drum_notes(&file),
            vec![DrumNote { tick: 0, note_number: 36, velocity: 90, channel: 9 }]
        );
    }

    #[test]
    fn extraction_merges_tracks_in_tick_then_note_order() {
        let on = |note| ChannelMessage::NoteOn { note, velocity: 64 };
        let a = file_with(vec![(10, 9, on(42)), (0, 9, on(36))]).tracks.remove(0);
        let b = file_with(vec![(5, 9, on(38)), (5, 9, on(35))]).tracks.remove(0);
        let file = MidiFile { format: SmfFormat::MultiTrack, ppq: 480, tracks: vec![a, b] };
        let order: Vec<(u64, u8)> = extract_drum_notes(&file).iter().map(|n| (n.tick, n.note_number)).collect();
        assert_eq!(order, vec![(5, 38), (10, 35), (10, 36), (10, 42)]);
    }

    #[test]
    fn default_map_lookups() {
        let map = DrumMap::default();
        assert_eq!(map_note_to_class(36, &map), Some(DrumClass::Kick));
        assert_eq!(map_note_to_class(40, &map), Some(DrumClass::Snare));
        assert_eq!(map_note_to_class(81, &map), None);
        assert_eq!(map_note_to_class(127, &map), None);
        assert_eq!((0..128u8).filter(|n| map.get(*n).is_some()).count(), 15);
    }

    #[test]
    fn drum_map_text_format() {
        let map = DrumMap::parse("# custom kit\n36 = kick\n60: HihatClosed\n61 tom-high   # bongo\n\n").unwrap();
        assert_eq!(map.get(36), Some(DrumClass::Kick));
        assert_eq!(map.get(60), Some(DrumClass::HihatClosed));
        assert_eq!(map.get(61), Some(DrumClass::TomHigh));
        assert_eq!(map.get(38), None);
        assert_eq!(DrumMap::parse(&map.to_text()).unwrap(), map);
        assert_eq!(DrumMap::parse(&DrumMap::default().to_text()).unwrap(), DrumMap::default());

        assert!(matches!(DrumMap::parse("200 kick"), Err(MidiError::DrumMapSyntax { line: 1, .. })));
        assert!(matches!(DrumMap::parse("36 kick\n37 cowbell"), Err(MidiError::DrumMapSyntax { line: 2, .. })));
        assert!(matches!(DrumMap::parse("36"), Err(MidiError::DrumMapSyntax { .. })));
    }

    fn single(class: DrumClass, step: usize, velocity: f64, offset: f64) -> Pattern {
        Pattern::new(vec![GridOnset { class, step, velocity, offset }]).unwrap()
    }

    fn note_ons(bytes: &[u8]) -> Vec<(u64, u8, u8)> {
        extract_drum_notes(&parse_smf(bytes).unwrap())
            .into_iter()
            .map(|n| (n.tick, n.note_number, n.velocity))
            .collect()
    }

    #[test]
    fn export_examples() {
        let notes = OutputNotes::default();
        let bytes = write_smf(&single(DrumClass::Kick, 0, 1.0, 0.0), 480, 120.0, &notes).unwrap();
        assert_eq!(note_ons(&bytes), vec![(0, 36, 127)]);

        let bytes = write_smf(&single(DrumClass::Kick, 1, 1.0, -1.0), 480, 120.0, &notes).unwrap();
        assert_eq!(note_ons(&bytes), vec![(60, 36, 127)]);

        let bytes = write_smf(&Pattern::default(), 480, 120.0, &notes).unwrap();
        let file = parse_smf(&bytes).unwrap();
        assert_eq!(file.tracks[0].len(), 2);
        assert!(extract_drum_notes(&file).is_empty());
    }

    #[test]
    fn export_emits_note_offs_without_running_status() {
        let bytes = write_smf(&single(DrumClass::Snare, 2, 0.5, 0.0), 480, 100.0, &OutputNotes::default()).unwrap();
        let file = parse_smf(&bytes).unwrap();
        let kinds: Vec<&EventKind> = file.tracks[0].iter().map(|e| &e.kind).collect();
        assert!(matches!(kinds[1], EventKind::Channel { channel: 9, message: ChannelMessage::NoteOn { note: 38, velocity: 64 } }));
        assert!(matches!(kinds[2], EventKind::Channel { channel: 9, message: ChannelMessage::NoteOff { note: 38, .. } }));
        assert_eq!(file.tracks[0][2].delta, 120);
        // every channel event carries its own status byte
        assert_eq!(bytes.iter().filter(|b| **b == 0x99).count(), 1);
        assert_eq!(bytes.iter().filter(|b| **b == 0x89).count(), 1);
    }

    #[test]
    fn export_rounding_and_errors() {
        // ppq 100: 32nd = 12.5 ticks, -0.5 * 12.5 = -6.25 -> -6; step 3 -> 75
        assert_eq!(onset_tick(3, -0.5, 100), 69);
        // +0.2 * 12.5 = 2.5 rounds away from zero to 3
        assert_eq!(onset_tick(3, 0.2, 100), 78);
        assert_eq!(onset_tick(0, -1.0, 480), 0);

        let p = single(DrumClass::Kick, 0, 1.0, 0.0);
        assert_eq!(write_smf(&p, 48, 120.0, &OutputNotes::default()), Err(MidiError::PpqTooSmall(48)));
        assert!(matches!(write_smf(&p, 480, 0.0, &OutputNotes::default()), Err(MidiError::InvalidTempo(_))));
        assert!(matches!(write_smf(&p, 480, f64::NAN, &OutputNotes::default()), Err(MidiError::InvalidTempo(_))));
    }

    #[test]
    fn velocity_conversion() {
        assert_eq!(midi_velocity(1.0), 127);
        assert_eq!(midi_velocity(0.5), 64);
        assert_eq!(midi_velocity(1e-6), 1);
    }
}
