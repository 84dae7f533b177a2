//! Nlakh-style dataset synthesis: MIDI parsing, parametric instruments,
//! rendering of single-instrument clips and multi-instrument mixtures.

mod corpus;
mod dataset;
mod family;
mod instrument;
pub mod midi;
mod mix;
mod render;
mod score;
pub mod wav;

use thiserror::Error;

pub use corpus::{compose_song, SongConfig};
pub use dataset::{
    generate_dataset, load_manifest, make_instruments, synthesize, DatasetConfig, DatasetManifest,
    EntryKind, InstrumentSplit, InstrumentsFile, ManifestEntry, MultiSample, SingleSample, Split,
    SynthesizedDataset, VelocityMode, INSTRUMENTS_FILE, MANIFEST_FILE,
};
pub use family::{general_midi_family, general_midi_table, Family};
pub use instrument::{Envelope, InstrumentSpec, MAX_HARMONICS};
pub use midi::{parse_midi, write_midi, MidiError};
pub use mix::{random_mix, sample_mix_plan, ClipPool, MixConfig, MixPlan, PoolClip, RandomMix};
pub use render::{render_multi, render_single, AudioClip, CLIP_SAMPLES, PEAK_LEVEL, SAMPLE_RATE};
pub use score::{excerpt, excerpt_window, NoteEvent, TrackScore, CLIP_SECONDS, MIN_ONSETS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("MIDI program {0} outside 0..=127")]
    InvalidProgram(u8),
    #[error("unknown instrument family `{0}`")]
    UnknownFamily(String),
    #[error("invalid instrument `{id}`: {reason}")]
    InvalidInstrument { id: String, reason: String },
    #[error("track is empty")]
    EmptyTrack,
    #[error("no {seconds} s window contains {min_onsets} note onsets")]
    NoValidWindow { seconds: f64, min_onsets: usize },
    #[error("instrument `{id}` is {instrument} but its track is {track}")]
    FamilyMismatch {
        id: String,
        instrument: Family,
        track: Family,
    },
    #[error("a mixture needs at least 2 tracks, got {0}")]
    TooFewTracks(usize),
    #[error("a mixture holds at most 9 tracks, got {0}")]
    TooManyTracks(usize),
    #[error("{specs} instruments given for {tracks} tracks")]
    CountMismatch { specs: usize, tracks: usize },
    #[error("pool holds {available} instruments, mixes need up to {required}")]
    PoolTooSmall { available: usize, required: usize },
    #[error("invalid mix configuration: {0}")]
    InvalidMixConfig(String),
    #[error("train and valid instrument sets share `{0}`")]
    OverlappingSplit(String),
    #[error("invalid dataset configuration: {0}")]
    InvalidConfig(String),
    #[error("no MIDI tracks available for family {0}")]
    NoTracksForFamily(Family),
    #[error("no song offers a window with two valid tracks")]
    NoMultiWindow,
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
