use proptest::prelude::*;
use rhythmvae::encoding::{quantize_notes, window_patterns, GridOnset, Pattern};
use rhythmvae::midi::*;

fn channel_message() -> impl Strategy<Value = ChannelMessage> {
    prop_oneof![
        (0u8..128, 0u8..128).prop_map(|(note, velocity)| ChannelMessage::NoteOff { note, velocity }),
        (0u8..128, 0u8..128).prop_map(|(note, velocity)| ChannelMessage::NoteOn { note, velocity }),
        (0u8..128, 0u8..128).prop_map(|(note, pressure)| ChannelMessage::PolyPressure { note, pressure }),
        (0u8..128, 0u8..128).prop_map(|(controller, value)| ChannelMessage::ControlChange { controller, value }),
        (0u8..128).prop_map(|program| ChannelMessage::ProgramChange { program }),
        (0u8..128).prop_map(|pressure| ChannelMessage::ChannelPressure { pressure }),
        (0u16..16384).prop_map(|value| ChannelMessage::PitchBend { value }),
    ]
}

fn event_kind() -> impl Strategy<Value = EventKind> {
    prop_oneof![
        6 => (0u8..16, channel_message()).prop_map(|(channel, message)| EventKind::Channel { channel, message }),
        1 => (0u8..0x2F, proptest::collection::vec(any::<u8>(), 0..20))
            .prop_map(|(kind, data)| EventKind::Meta { kind, data }),
        1 => (prop_oneof![Just(0xF0u8), Just(0xF7u8)], proptest::collection::vec(any::<u8>(), 0..200))
            .prop_map(|(status, data)| EventKind::SysEx { status, data }),
    ]
}

fn track() -> impl Strategy<Value = Vec<TrackEvent>> {
    (proptest::collection::vec((0u32..=VLQ_MAX, event_kind()), 0..40), 0u32..1000).prop_map(|(events, tail)| {
        let mut t: Vec<TrackEvent> = events.into_iter().map(|(delta, kind)| TrackEvent { delta, kind }).collect();
        t.push(TrackEvent::end_of_track(tail));
        t
    })
}

fn midi_file() -> impl Strategy<Value = MidiFile> {
    (any::<bool>(), 1u16..0x8000, proptest::collection::vec(track(), 1..4)).prop_map(|(multi, ppq, mut tracks)| {
        if !multi {
            tracks.truncate(1);
        }
        MidiFile { format: if multi { SmfFormat::MultiTrack } else { SmfFormat::SingleTrack }, ppq, tracks }
    })
}

/// Serializes with running status wherever consecutive channel events share
/// a status byte.
fn to_bytes_running_status(file: &MidiFile) -> Vec<u8> {
    let plain = file.to_bytes().unwrap();
    let mut out = plain[..14].to_vec();
    for track in &file.tracks {
        let mut body = Vec::new();
        let mut running: Option<u8> = None;
        for ev in track {
            write_vlq(ev.delta, &mut body).unwrap();
            let single = MidiFile {
                format: SmfFormat::SingleTrack,
                ppq: 96,
                tracks: vec![vec![TrackEvent { delta: 0, kind: ev.kind.clone() }, TrackEvent::end_of_track(0)]],
            }
            .to_bytes()
            .unwrap();
            // header 14 + "MTrk" 4 + len 4 + delta byte 1, then the event, then 4 bytes of end-of-track
            let encoded = &single[23..single.len() - 4];
            match &ev.kind {
                EventKind::Channel { .. } => {
                    if running == Some(encoded[0]) {
                        body.extend_from_slice(&encoded[1..]);
                    } else {
                        body.extend_from_slice(encoded);
                    }
                    running = Some(encoded[0]);
                }
                _ => {
                    body.extend_from_slice(encoded);
                    running = None;
                }
            }
        }
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    out
}

/// Patterns whose offsets lie on the 480-ppq tick grid and whose velocities
/// are exact MIDI values, so a trip through a file is lossless.
fn grid_pattern() -> impl Strategy<Value = Pattern> {
    proptest::collection::btree_map((0usize..9, 0usize..32), (1u8..=127, -60i32..60), 0..60).prop_map(|cells| {
        let onsets = cells
            .into_iter()
            .map(|((class, step), (vel, ticks))| {
                // step 0 cannot move earlier than the file start
                let ticks = if step == 0 { ticks.abs().min(59) } else { ticks };
                GridOnset {
                    class: DrumClass::from_index(class).unwrap(),
                    step,
                    velocity: f64::from(vel) / 127.0,
                    offset: f64::from(ticks) / 60.0,
                }
            })
            .collect();
        Pattern::new(onsets).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn vlq_roundtrip(v in 0u32..=VLQ_MAX) {
        let mut buf = Vec::new();
        write_vlq(v, &mut buf).unwrap();
        prop_assert!((1..=4).contains(&buf.len()));
        prop_assert_eq!(read_vlq(&buf, 0).unwrap(), (v, buf.len()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn smf_structure_roundtrip(file in midi_file()) {
        let bytes = file.to_bytes().unwrap();
        let parsed = parse_smf(&bytes).unwrap();
        prop_assert_eq!(&parsed, &file);
        prop_assert_eq!(parsed.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn running_status_parses_identically(file in midi_file()) {
        prop_assert_eq!(parse_smf(&to_bytes_running_status(&file)).unwrap(), file);
    }

    #[test]
    fn pattern_file_roundtrip(p in grid_pattern()) {
        let bytes = write_smf(&p, 480, 120.0, &OutputNotes::default()).unwrap();
        let file = parse_smf(&bytes).unwrap();
        prop_assert_eq!(file.to_bytes().unwrap(), bytes);
        let notes = extract_drum_notes(&file);
        prop_assert_eq!(notes.len(), p.len());
        let onsets = quantize_notes(&notes, file.ppq, &DrumMap::default());
        let windows = window_patterns(&onsets);
        if p.is_empty() {
            prop_assert!(windows.is_empty());
        } else {
            prop_assert_eq!(windows, vec![p]);
        }
    }
}

#[test]
fn vlq_boundaries() {
    for (v, len) in [(0, 1), (0x7F, 1), (0x80, 2), (0x3FFF, 2), (0x4000, 3), (0x1F_FFFF, 3), (0x20_0000, 4), (VLQ_MAX, 4)] {
        let mut buf = Vec::new();
        write_vlq(v, &mut buf).unwrap();
        assert_eq!(buf.len(), len, "{v:#x}");
    }
    assert!(write_vlq(VLQ_MAX + 1, &mut Vec::new()).is_err());
    assert!(read_vlq(&[0xFF, 0xFF, 0xFF, 0xFF, 0x7F], 0).is_err());
}
