mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};

use instret::rng::rng_for;
use instret::synth::{general_midi_family, parse_midi, write_midi, MidiError, NoteEvent, TrackScore};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

const TPQ: u16 = 480;
const TEMPO_US: u32 = 500_000;
const SECONDS_PER_TICK: f64 = TEMPO_US as f64 * 1e-6 / TPQ as f64;

fn track() -> impl Strategy<Value = TrackScore> {
    (
        0u8..128,
        Just((0u8..128).collect::<Vec<_>>()).prop_shuffle(),
        prop::collection::vec((1u8..128, 0.0f64..20.0, 0.01f64..3.0), 1..24),
    )
        .prop_map(|(program, pitches, notes)| {
            let mut t = TrackScore {
                family: general_midi_family(program).unwrap(),
                source_program: program,
                // Distinct pitches keep note-on/off pairing unambiguous.
                events: notes
                    .into_iter()
                    .zip(pitches)
                    .map(|((velocity, onset_s, duration_s), pitch)| NoteEvent {
                        pitch,
                        velocity,
                        onset_s,
                        duration_s,
                    })
                    .collect(),
            };
            t.sort_events();
            t
        })
}

proptest! {
    #![proptest_config(common::proptest_config(200))]

    #[test]
    fn round_trip_within_one_tick(tracks in prop::collection::vec(track(), 1..6)) {
        let bytes = write_midi(&tracks, TPQ, TEMPO_US);
        let back = parse_midi(&bytes).unwrap();
        prop_assert_eq!(back.len(), tracks.len());
        for (a, b) in tracks.iter().zip(&back) {
            prop_assert_eq!(a.source_program, b.source_program);
            prop_assert_eq!(a.family, b.family);
            prop_assert_eq!(a.events.len(), b.events.len());
            let mut want = a.events.clone();
            let mut got = b.events.clone();
            want.sort_by_key(|e| e.pitch);
            got.sort_by_key(|e| e.pitch);
            for (w, g) in want.iter().zip(&got) {
                prop_assert_eq!(w.pitch, g.pitch);
                prop_assert_eq!(w.velocity, g.velocity);
                prop_assert!((w.onset_s - g.onset_s).abs() < SECONDS_PER_TICK);
                prop_assert!((w.end_s() - g.end_s()).abs() < SECONDS_PER_TICK);
            }
        }
    }
}

/// Random bytes, random bytes behind a valid magic, and mutated valid files.
fn fuzz_case(i: u64) -> Vec<u8> {
    let mut g = rng_for(99, "midi-fuzz", i);
    match i % 3 {
        0 => (0..g.gen_range(0..64)).map(|_| g.gen()).collect(),
        1 => {
            let mut b = b"MThd\0\0\0\x06".to_vec();
            b.extend((0..g.gen_range(0..128)).map(|_| g.gen::<u8>()));
            if g.gen_bool(0.5) && b.len() > 22 {
                b[14..18].copy_from_slice(b"MTrk");
            }
            b
        }
        _ => {
            let score = TrackScore {
                family: general_midi_family(0).unwrap(),
                source_program: 0,
                events: (0..g.gen_range(1..8))
                    .map(|k| NoteEvent {
                        pitch: g.gen_range(0..128),
                        velocity: g.gen_range(1..128),
                        onset_s: k as f64 * 0.25,
                        duration_s: 0.2,
                    })
                    .collect(),
            };
            let mut b = write_midi(&[score], TPQ, TEMPO_US);
            for _ in 0..g.gen_range(1..6) {
                let len = b.len();
                match g.gen_range(0..3) {
                    0 => b[g.gen_range(0..len)] = g.gen(),
                    1 => b.truncate(g.gen_range(0..len)),
                    _ => {
                        let at = g.gen_range(0..=len);
                        b.insert(at, *[0xFF, 0x80, 0x7F, 0x00].choose(&mut g).unwrap());
                    }
                }
                if b.is_empty() {
                    break;
                }
            }
            b
        }
    }
}

#[test]
fn fuzzed_bytes_never_panic() {
    let mut errors = 0;
    for i in 0..10_000 {
        let bytes = fuzz_case(i);
        let outcome = catch_unwind(AssertUnwindSafe(|| parse_midi(&bytes)));
        match outcome {
            Ok(Ok(_)) => {}
            Ok(Err(
                MidiError::MalformedHeader(_)
                | MidiError::TruncatedChunk { .. }
                | MidiError::UnsupportedFormat(_)
                | MidiError::MalformedEvent { .. },
            )) => errors += 1,
            Err(_) => panic!("parser panicked on case {i}: {bytes:02x?}"),
        }
    }
    assert!(errors > 0);
}

#[test]
fn format_two_rejected() {
    let bytes = b"MThd\0\0\0\x06\0\x02\0\x01\x01\xe0".to_vec();
    assert_eq!(parse_midi(&bytes), Err(MidiError::UnsupportedFormat(2)));
}
