//! Procedural multi-track songs, standing in for a corpus of MIDI files.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{general_midi_table, Family, NoteEvent, TrackScore};
use crate::rng::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongConfig {
    pub families: Vec<Family>,
    pub min_tracks: usize,
    pub max_tracks: usize,
    pub seconds: f64,
}

impl Default for SongConfig {
    fn default() -> Self {
        SongConfig {
            families: Family::ALL.to_vec(),
            min_tracks: 2,
            max_tracks: 9,
            seconds: 30.0,
        }
    }
}

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

/// A composed song: its tracks and the tempo they were written at.
pub struct Song {
    pub tempo_us: u32,
    pub tracks: Vec<TrackScore>,
}

fn scale_pitches(root: u8, minor: bool, lo: u8, hi: u8) -> Vec<u8> {
    let steps = if minor { MINOR } else { MAJOR };
    (lo..=hi)
        .filter(|p| steps.contains(&((p + 12 - root % 12) % 12)))
        .collect()
}

fn compose_part(family: Family, program: u8, beat: f64, seconds: f64, scale: &[u8], rng: &mut Rng) -> TrackScore {
    let (lo, hi) = family.register();
    let pitches: Vec<u8> = scale.iter().copied().filter(|p| (lo..=hi).contains(p)).collect();
    let chordal = matches!(family, Family::Keyboard | Family::Guitar | Family::Organ | Family::String);
    let durations = match family {
        Family::Bass => [1.0, 1.0, 2.0, 0.5],
        Family::Mallet | Family::Guitar => [0.5, 0.5, 1.0, 0.25],
        Family::Organ | Family::String | Family::Vocal => [1.0, 2.0, 2.0, 4.0],
        _ => [0.5, 1.0, 1.0, 2.0],
    };

    // Active between two random points so some parts rest for long stretches.
    let a: f64 = rng.gen_range(0.0..seconds * 0.5);
    let b: f64 = rng.gen_range(seconds * 0.5..=seconds);
    let (start, stop) = if rng.gen_bool(0.6) { (0.0, seconds) } else { (a, b) };

    let mut events = Vec::new();
    let mut idx = rng.gen_range(0..pitches.len());
    let mut t = (start / beat).ceil() * beat;
    let mut velocity: f64 = rng.gen_range(60.0..110.0);
    while t < stop {
        let len = durations[rng.gen_range(0..durations.len())] * beat;
        if rng.gen_bool(0.15) {
            t += len;
            continue;
        }
        let step: i32 = rng.gen_range(-2..=2);
        idx = (idx as i32 + step).clamp(0, pitches.len() as i32 - 1) as usize;
        velocity = (velocity + rng.gen_range(-8.0..8.0)).clamp(40.0, 127.0);
        let legato = rng.gen_range(0.6..1.0);
        let mut push = |pitch: u8| {
            events.push(NoteEvent {
                pitch,
                velocity: velocity.round() as u8,
                onset_s: t,
                duration_s: (len * legato).min(seconds - t),
            })
        };
        push(pitches[idx]);
        if chordal && rng.gen_bool(0.25) && idx + 2 < pitches.len() {
            push(pitches[idx + 2]);
        }
        t += len;
    }
    let mut track = TrackScore {
        family,
        source_program: program,
        events,
    };
    track.sort_events();
    track
}

/// Compose a song of `min_tracks..=max_tracks` parts drawn from `config.families`.
pub fn compose_song(config: &SongConfig, seed: u64) -> Song {
    let mut rng = rng_for(seed, "song", 0);
    let bpm: f64 = rng.gen_range(80.0..150.0);
    let beat = 60.0 / bpm;
    let root = rng.gen_range(0..12u8);
    let scale = scale_pitches(root, rng.gen_bool(0.4), 0, 127);
    let table = general_midi_table();

    let count = rng.gen_range(config.min_tracks..=config.max_tracks.max(config.min_tracks));
    let tracks = (0..count)
        .map(|_| {
            let family = *config.families.choose(&mut rng).expect("at least one family");
            let programs: Vec<u8> = table.iter().filter(|(_, f)| *f == family).map(|(p, _)| *p).collect();
            let program = *programs.choose(&mut rng).expect("every family has a program");
            compose_part(family, program, beat, config.seconds, &scale, &mut rng)
        })
        .collect();
    Song {
        tempo_us: (beat * 1e6).round() as u32,
        tracks,
    }
}
