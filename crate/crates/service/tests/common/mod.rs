#![allow(dead_code)]

use std::net::SocketAddr;

use rhythmvae::encoding::Pattern;
use rhythmvae::midi::{write_smf, ChannelMessage, EventKind, MidiFile, OutputNotes, SmfFormat, TrackEvent};
use rhythmvae::synth::template_corpus;
use rhythmvae_service::api::router;
use rhythmvae_service::session::Session;

/// Serves `session` on an ephemeral local port.
pub async fn spawn_server(session: Session) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(session)).await.unwrap();
    });
    addr
}

pub fn pattern_file(p: &Pattern) -> Vec<u8> {
    write_smf(p, 480, 120.0, &OutputNotes::default()).unwrap()
}

pub fn synthetic_files(count: usize, seed: u64) -> Vec<(String, Vec<u8>)> {
    template_corpus(count, seed).iter().enumerate().map(|(i, p)| (format!("synth_{i:02}.mid"), pattern_file(p))).collect()
}

/// Kick on every beat for four bars on the drum channel.
pub fn four_bar_file() -> Vec<u8> {
    let mut track = Vec::new();
    for b in 0..16u32 {
        track.push(TrackEvent {
            delta: if b == 0 { 0 } else { 480 },
            kind: EventKind::Channel { channel: 9, message: ChannelMessage::NoteOn { note: 36, velocity: 100 } },
        });
    }
    track.push(TrackEvent::end_of_track(0));
    MidiFile { format: SmfFormat::SingleTrack, ppq: 480, tracks: vec![track] }.to_bytes().unwrap()
}
