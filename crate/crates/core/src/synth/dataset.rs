//! Nlakh-style dataset generation.
//!
//! Songs are composed procedurally, written to Standard MIDI Files and
//! parsed back; parsed tracks are grouped by family. Every instrument gets
//! `per_instrument` single clips cut from tracks of its own family, and
//! multi entries render a window of one song in which at least two tracks
//! each start three notes, with an instrument of the matching family per
//! track.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::score::StartSet;
use super::wav::write_wav;
use super::{
    compose_song, excerpt, general_midi_table, parse_midi, render_multi, render_single, write_midi,
    AudioClip, Family, InstrumentSpec, SongConfig, SynthError, TrackScore, MIN_ONSETS,
};
use crate::rng::{derive_seed, rng_for};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INSTRUMENTS_FILE: &str = "instruments.json";
const TICKS_PER_QUARTER: u16 = 480;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }
}

/// How note velocities reach the renderer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    /// Use the velocities written in the MIDI tracks.
    Midi,
    /// Replace every velocity by a constant.
    Fixed(u8),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub instruments: usize,
    pub families: Vec<Family>,
    /// Instruments held out for validation when no explicit split is given.
    pub valid_instruments: usize,
    pub per_instrument: usize,
    pub multi_train: usize,
    pub multi_valid: usize,
    pub max_tracks: usize,
    pub songs: usize,
    pub song_seconds: f64,
    pub velocity: VelocityMode,
    pub seed: u64,
    pub split: Option<InstrumentSplit>,
}

impl DatasetConfig {
    /// Checks counts and ranges without rendering anything.
    pub fn validate(&self) -> Result<(), SynthError> {
        validate(self)?;
        resolve_split(self, &make_instruments(self)).map(|_| ())
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            instruments: 32,
            families: Family::ALL.to_vec(),
            valid_instruments: 0,
            per_instrument: 10,
            multi_train: 0,
            multi_valid: 0,
            max_tracks: 9,
            songs: 48,
            song_seconds: 30.0,
            velocity: VelocityMode::Midi,
            seed: 0,
            split: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Single,
    Multi,
}

/// One line of `manifest.jsonl`. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: EntryKind,
    pub split: Split,
    pub clip: String,
    pub instruments: Vec<String>,
    pub families: Vec<Family>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stems: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn singles(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Single)
    }

    pub fn multis(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Multi)
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Paths referenced by entries that are missing on disk.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::once(&e.clip).chain(&e.stems))
            .map(|p| self.root.join(p))
            .filter(|p| !p.is_file())
            .collect()
    }
}

/// Contents of `instruments.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentsFile {
    pub instruments: Vec<InstrumentSpec>,
    pub split: InstrumentSplit,
    pub gm_families: Vec<(u8, Family)>,
    pub config: DatasetConfig,
}

impl InstrumentsFile {
    pub fn family_of(&self) -> BTreeMap<String, Family> {
        self.instruments
            .iter()
            .map(|s| (s.id.clone(), s.family))
            .collect()
    }
}

pub struct SingleSample {
    pub instrument: usize,
    pub split: Split,
    pub seed: u64,
    pub track: TrackScore,
    pub clip: AudioClip,
}

pub struct MultiSample {
    pub instruments: Vec<usize>,
    pub split: Split,
    pub seed: u64,
    pub tracks: Vec<TrackScore>,
    pub mixture: AudioClip,
    pub stems: Vec<AudioClip>,
}

/// A fully rendered dataset held in memory.
pub struct SynthesizedDataset {
    pub instruments: Vec<InstrumentSpec>,
    pub split: InstrumentSplit,
    pub singles: Vec<SingleSample>,
    pub multis: Vec<MultiSample>,
}

/// Instruments assigned to families round-robin, ids `<family>_<index>`.
pub fn make_instruments(config: &DatasetConfig) -> Vec<InstrumentSpec> {
    (0..config.instruments)
        .map(|i| {
            let family = config.families[i % config.families.len()];
            let mut rng = rng_for(config.seed, "instrument", i as u64);
            InstrumentSpec::random(format!("{family}_{i:03}"), family, &mut rng)
        })
        .collect()
}

fn resolve_split(config: &DatasetConfig, instruments: &[InstrumentSpec]) -> Result<InstrumentSplit, SynthError> {
    let ids: Vec<String> = instruments.iter().map(|s| s.id.clone()).collect();
    let Some(split) = &config.split else {
        let cut = ids.len() - config.valid_instruments;
        return Ok(InstrumentSplit {
            train: ids[..cut].to_vec(),
            valid: ids[cut..].to_vec(),
        });
    };
    let train: BTreeSet<&String> = split.train.iter().collect();
    if let Some(dup) = split.valid.iter().find(|id| train.contains(id)) {
        return Err(SynthError::OverlappingSplit(dup.clone()));
    }
    let known: BTreeSet<&String> = ids.iter().collect();
    let listed: BTreeSet<&String> = split.train.iter().chain(&split.valid).collect();
    if let Some(unknown) = listed.iter().find(|id| !known.contains(*id)) {
        return Err(SynthError::InvalidConfig(format!("split names unknown instrument `{unknown}`")));
    }
    if listed.len() != known.len() {
        return Err(SynthError::InvalidConfig(
            "split must assign every instrument to train or valid".into(),
        ));
    }
    Ok(split.clone())
}

fn validate(config: &DatasetConfig) -> Result<(), SynthError> {
    let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
    if config.instruments == 0 {
        return bad("instruments must be positive");
    }
    if config.families.is_empty() {
        return bad("families must not be empty");
    }
    if config.per_instrument == 0 {
        return bad("per_instrument must be positive");
    }
    if config.valid_instruments >= config.instruments && config.split.is_none() {
        return bad("valid_instruments must leave at least one training instrument");
    }
    if !(2..=9).contains(&config.max_tracks) {
        return bad("max_tracks must lie in 2..=9");
    }
    if config.songs == 0 || config.song_seconds < super::CLIP_SECONDS {
        return bad("need at least one song of at least 5 s");
    }
    if let VelocityMode::Fixed(v) = config.velocity {
        if !(1..=127).contains(&v) {
            return bad("fixed velocity must lie in 1..=127");
        }
    }
    Ok(())
}

/// Shared state for rendering entries independently of each other.
struct Synthesizer {
    config: DatasetConfig,
    instruments: Vec<InstrumentSpec>,
    split: InstrumentSplit,
    split_of: Vec<Split>,
    songs: Vec<Vec<TrackScore>>,
    midi: Vec<Vec<u8>>,
    /// Tracks (song, track) per family that hold a valid window.
    usable: BTreeMap<Family, Vec<(usize, usize)>>,
}

impl Synthesizer {
    fn new(config: &DatasetConfig) -> Result<Self, SynthError> {
        validate(config)?;
        let instruments = make_instruments(config);
        let split = resolve_split(config, &instruments)?;
        let valid: BTreeSet<&String> = split.valid.iter().collect();
        let split_of = instruments
            .iter()
            .map(|s| if valid.contains(&s.id) { Split::Valid } else { Split::Train })
            .collect();

        let song_config = SongConfig {
            families: config.families.clone(),
            min_tracks: 2,
            max_tracks: config.max_tracks,
            seconds: config.song_seconds,
        };
        let mut midi = Vec::with_capacity(config.songs);
        let mut songs = Vec::with_capacity(config.songs);
        for i in 0..config.songs {
            let song = compose_song(&song_config, derive_seed(config.seed, "song", i as u64));
            let bytes = write_midi(&song.tracks, TICKS_PER_QUARTER, song.tempo_us);
            songs.push(parse_midi(&bytes)?);
            midi.push(bytes);
        }
        let mut usable: BTreeMap<Family, Vec<(usize, usize)>> = BTreeMap::new();
        for (s, tracks) in songs.iter().enumerate() {
            for (t, track) in tracks.iter().enumerate() {
                if !StartSet::for_onsets(&track.onsets()).is_empty() {
                    usable.entry(track.family).or_default().push((s, t));
                }
            }
        }
        Ok(Synthesizer {
            config: config.clone(),
            instruments,
            split,
            split_of,
            songs,
            midi,
            usable,
        })
    }

    fn apply_velocity(&self, track: &mut TrackScore) {
        if let VelocityMode::Fixed(v) = self.config.velocity {
            track.events.iter_mut().for_each(|e| e.velocity = v);
        }
    }

    fn single(&self, instrument: usize, index: usize) -> Result<SingleSample, SynthError> {
        let spec = &self.instruments[instrument];
        let seed = derive_seed(
            self.config.seed,
            "single",
            (instrument * self.config.per_instrument + index) as u64,
        );
        let candidates = self
            .usable
            .get(&spec.family)
            .ok_or(SynthError::NoTracksForFamily(spec.family))?;
        let mut rng = rng_for(seed, "pick", 0);
        let &(s, t) = candidates.choose(&mut rng).expect("non-empty family list");
        let mut track = excerpt(&self.songs[s][t], seed)?;
        self.apply_velocity(&mut track);
        let clip = render_single(spec, &track.events);
        Ok(SingleSample {
            instrument,
            split: self.split_of[instrument],
            seed,
            track,
            clip,
        })
    }

    fn multi(&self, split: Split, index: usize) -> Result<MultiSample, SynthError> {
        let seed = derive_seed(self.config.seed, &format!("multi_{}", split.name()), index as u64);
        let mut rng = rng_for(seed, "pick", 0);
        let mut pools: BTreeMap<Family, Vec<usize>> = BTreeMap::new();
        for (i, spec) in self.instruments.iter().enumerate() {
            if self.split_of[i] == split {
                pools.entry(spec.family).or_default().push(i);
            }
        }
        let offset = rng.gen_range(0..self.songs.len());
        for attempt in 0..self.songs.len() {
            let song = &self.songs[(offset + attempt) % self.songs.len()];
            let eligible: Vec<&TrackScore> = song.iter().filter(|t| pools.contains_key(&t.family)).collect();
            let sets: Vec<StartSet> = eligible.iter().map(|t| StartSet::for_onsets(&t.onsets())).collect();
            let Some(start) = StartSet::covered_by_at_least(&sets, 2).sample(&mut rng) else {
                continue;
            };
            let mut windows: Vec<TrackScore> = eligible
                .iter()
                .map(|t| t.window(start))
                .filter(|w| w.events.len() >= MIN_ONSETS)
                .collect();
            windows.shuffle(&mut rng);
            let mut remaining = pools.clone();
            let mut chosen = Vec::new();
            let mut tracks = Vec::new();
            for mut w in windows.into_iter() {
                if tracks.len() == self.config.max_tracks {
                    break;
                }
                let pool = remaining.get_mut(&w.family).expect("eligible family");
                if pool.is_empty() {
                    continue;
                }
                let inst = pool.swap_remove(rng.gen_range(0..pool.len()));
                self.apply_velocity(&mut w);
                chosen.push(inst);
                tracks.push(w);
            }
            if tracks.len() < 2 {
                continue;
            }
            let specs: Vec<InstrumentSpec> = chosen.iter().map(|&i| self.instruments[i].clone()).collect();
            let (mixture, stems) = render_multi(&specs, &tracks)?;
            return Ok(MultiSample {
                instruments: chosen,
                split,
                seed,
                tracks,
                mixture,
                stems,
            });
        }
        Err(SynthError::NoMultiWindow)
    }

    fn single_jobs(&self) -> Vec<(usize, usize)> {
        (0..self.instruments.len())
            .flat_map(|i| (0..self.config.per_instrument).map(move |c| (i, c)))
            .collect()
    }

    fn multi_jobs(&self) -> Vec<(Split, usize)> {
        (0..self.config.multi_train)
            .map(|n| (Split::Train, n))
            .chain((0..self.config.multi_valid).map(|n| (Split::Valid, n)))
            .collect()
    }
}

/// Render a whole dataset in memory.
pub fn synthesize(config: &DatasetConfig) -> Result<SynthesizedDataset, SynthError> {
    let synth = Synthesizer::new(config)?;
    let singles = synth
        .single_jobs()
        .into_par_iter()
        .map(|(i, c)| synth.single(i, c))
        .collect::<Result<Vec<_>, _>>()?;
    let multis = synth
        .multi_jobs()
        .into_par_iter()
        .map(|(s, n)| synth.multi(s, n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SynthesizedDataset {
        instruments: synth.instruments,
        split: synth.split,
        singles,
        multis,
    })
}

/// Render a dataset to `out_dir`: WAV clips, the MIDI corpus,
/// `instruments.json` and `manifest.jsonl`.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    let synth = Synthesizer::new(config)?;
    for split in [Split::Train, Split::Valid] {
        fs::create_dir_all(out_dir.join("single").join(split.name()))?;
        fs::create_dir_all(out_dir.join("multi").join(split.name()))?;
    }
    fs::create_dir_all(out_dir.join("midi"))?;
    for (i, bytes) in synth.midi.iter().enumerate() {
        fs::write(out_dir.join("midi").join(format!("song_{i:04}.mid")), bytes)?;
    }

    let mut entries = synth
        .single_jobs()
        .into_par_iter()
        .map(|(i, c)| {
            let sample = synth.single(i, c)?;
            let spec = &synth.instruments[i];
            let clip = format!("single/{}/{}_{c:04}.wav", sample.split.name(), spec.id);
            write_wav(out_dir.join(&clip), &sample.clip)?;
            Ok(ManifestEntry {
                kind: EntryKind::Single,
                split: sample.split,
                clip,
                instruments: vec![spec.id.clone()],
                families: vec![spec.family],
                stems: Vec::new(),
                seed: sample.seed,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;

    let multis = synth
        .multi_jobs()
        .into_par_iter()
        .map(|(split, n)| {
            let sample = synth.multi(split, n)?;
            let dir = format!("multi/{}/{n:05}", split.name());
            fs::create_dir_all(out_dir.join(&dir))?;
            let clip = format!("{dir}/mix.wav");
            write_wav(out_dir.join(&clip), &sample.mixture)?;
            let mut stems = Vec::with_capacity(sample.stems.len());
            for (k, stem) in sample.stems.iter().enumerate() {
                let path = format!("{dir}/stem_{k}.wav");
                write_wav(out_dir.join(&path), stem)?;
                stems.push(path);
            }
            Ok(ManifestEntry {
                kind: EntryKind::Multi,
                split,
                clip,
                instruments: sample.instruments.iter().map(|&i| synth.instruments[i].id.clone()).collect(),
                families: sample.instruments.iter().map(|&i| synth.instruments[i].family).collect(),
                stems,
                seed: sample.seed,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    entries.extend(multis);

    let info = InstrumentsFile {
        instruments: synth.instruments.clone(),
        split: synth.split.clone(),
        gm_families: general_midi_table(),
        config: config.clone(),
    };
    fs::write(out_dir.join(INSTRUMENTS_FILE), serde_json::to_vec_pretty(&info)?)?;
    let mut manifest = fs::File::create(out_dir.join(MANIFEST_FILE))?;
    for e in &entries {
        serde_json::to_writer(&mut manifest, e)?;
        manifest.write_all(b"\n")?;
    }
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    })
}

/// Read `manifest.jsonl` and `instruments.json` from a dataset directory.
pub fn load_manifest(root: &Path) -> Result<(DatasetManifest, InstrumentsFile), SynthError> {
    let info: InstrumentsFile = serde_json::from_slice(&fs::read(root.join(INSTRUMENTS_FILE))?)?;
    let reader = BufReader::new(fs::File::open(root.join(MANIFEST_FILE))?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            entries.push(serde_json::from_str(&line)?);
        }
    }
    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            entries,
        },
        info,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            instruments: 8,
            families: vec![Family::Bass, Family::Guitar, Family::Organ, Family::Flute],
            valid_instruments: 4,
            per_instrument: 2,
            multi_train: 3,
            multi_valid: 2,
            songs: 6,
            seed: 17,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn families_match_and_splits_are_disjoint() {
        let ds = synthesize(&small()).unwrap();
        assert_eq!(ds.singles.len(), 16);
        for s in &ds.singles {
            assert_eq!(ds.instruments[s.instrument].family, s.track.family);
            assert!(s.track.events.len() >= MIN_ONSETS);
        }
        let valid: BTreeSet<_> = ds.split.valid.iter().collect();
        assert!(ds.split.train.iter().all(|id| !valid.contains(id)));
        for m in &ds.multis {
            assert!((2..=9).contains(&m.instruments.len()));
            assert_eq!(m.stems.len(), m.instruments.len());
            for (&i, t) in m.instruments.iter().zip(&m.tracks) {
                assert_eq!(ds.instruments[i].family, t.family);
                let id = &ds.instruments[i].id;
                assert_eq!(valid.contains(id), m.split == Split::Valid);
            }
            let distinct: BTreeSet<_> = m.instruments.iter().collect();
            assert_eq!(distinct.len(), m.instruments.len());
        }
    }

    #[test]
    fn overlapping_split_rejected() {
        let mut config = small();
        let ids: Vec<String> = make_instruments(&config).into_iter().map(|s| s.id).collect();
        config.split = Some(InstrumentSplit {
            train: ids[..5].to_vec(),
            valid: ids[4..].to_vec(),
        });
        assert!(matches!(synthesize(&config), Err(SynthError::OverlappingSplit(_))));
    }

    #[test]
    fn writes_manifest_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let config = small();
        let manifest = generate_dataset(&config, dir.path()).unwrap();
        assert_eq!(manifest.singles().count(), 16);
        assert_eq!(manifest.multis().count(), 5);
        assert!(manifest.missing_files().is_empty());
        let (loaded, info) = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.entries, manifest.entries);
        assert_eq!(info.instruments.len(), 8);
        assert_eq!(info.gm_families.len(), 128);
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let again = tempfile::tempdir().unwrap();
        generate_dataset(&config, again.path()).unwrap();
        assert_eq!(first, fs::read(again.path().join(MANIFEST_FILE)).unwrap());
    }
}
