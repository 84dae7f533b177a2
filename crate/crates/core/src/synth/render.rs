use std::f64::consts::TAU;

use rand::Rng as _;

use super::{InstrumentSpec, NoteEvent, SynthError, TrackScore};
use crate::rng::{fnv1a, rng_for};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SAMPLES: usize = 80_000;
/// Peak magnitude of every normalized clip.
pub const PEAK_LEVEL: f32 = 0.9;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn silence(len: usize) -> Self {
        AudioClip {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Scale so that the largest magnitude equals [`PEAK_LEVEL`]; silence is left as is.
    pub fn normalize(&mut self) {
        normalize_f64_into(&self.samples.iter().map(|&s| f64::from(s)).collect::<Vec<_>>(), &mut self.samples);
    }
}

/// Peak-normalize `buf` (computed in 64-bit) into 32-bit `out`.
pub(crate) fn normalize_f64_into(buf: &[f64], out: &mut [f32]) {
    let peak = buf.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak == 0.0 {
        out.iter_mut().for_each(|s| *s = 0.0);
        return;
    }
    let gain = f64::from(PEAK_LEVEL) / peak;
    for (o, &s) in out.iter_mut().zip(buf) {
        *o = (s * gain) as f32;
    }
}

fn midi_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

fn render_seed(spec: &InstrumentSpec, events: &[NoteEvent]) -> u64 {
    let mut bytes = spec.id.as_bytes().to_vec();
    for e in events {
        bytes.push(e.pitch);
        bytes.push(e.velocity);
        bytes.extend_from_slice(&e.onset_s.to_le_bytes());
        bytes.extend_from_slice(&e.duration_s.to_le_bytes());
    }
    fnv1a(&bytes)
}

fn add_note(spec: &InstrumentSpec, note: &NoteEvent, buf: &mut [f64], noise: &mut impl FnMut() -> f64) {
    let sr = f64::from(SAMPLE_RATE);
    let nyquist = sr / 2.0;
    let env = &spec.envelope;
    let start = (note.onset_s * sr).round() as usize;
    if start >= buf.len() {
        return;
    }
    let sounding = note.duration_s + env.release;
    let stop = ((note.onset_s + sounding) * sr).ceil() as usize;
    let stop = stop.min(buf.len());
    let gain = f64::from(note.velocity) / 127.0;

    let base = midi_hz(f64::from(note.pitch));
    let spread = 2f64.powf(spec.detune_cents / 2400.0);
    let voices = [base * spread, base / spread];
    let partials: Vec<(f64, f64)> = spec
        .harmonic_amplitudes
        .iter()
        .enumerate()
        .filter(|(_, a)| **a > 0.0)
        .flat_map(|(k, &a)| {
            let h = (k + 1) as f64;
            voices.iter().map(move |&f| (f * h, 0.5 * a))
        })
        .filter(|(f, _)| *f < nyquist)
        .collect();

    for (i, out) in buf[start..stop].iter_mut().enumerate() {
        let t = i as f64 / sr;
        let e = env.gain(t, note.duration_s);
        if e == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for &(f, a) in &partials {
            s += a * (TAU * f * t).sin();
        }
        s += spec.noise_level * noise();
        *out += gain * e * s;
    }
}

/// Additive rendering of a note list into a peak-normalized 5 s clip.
///
/// Each note is the sum of the instrument's partials, voiced by two
/// oscillators detuned by `detune_cents`, shaped by the ADSR envelope, plus
/// white noise at `noise_level`; velocity scales amplitude linearly. Noise is
/// seeded from the instrument id and the notes, so rendering is a pure
/// function of its inputs.
pub fn render_single(spec: &InstrumentSpec, events: &[NoteEvent]) -> AudioClip {
    let mut buf = vec![0.0f64; CLIP_SAMPLES];
    let mut rng = rng_for(render_seed(spec, events), "noise", 0);
    let mut noise = move || rng.gen_range(-1.0..1.0);
    for note in events {
        add_note(spec, note, &mut buf, &mut noise);
    }
    let mut clip = AudioClip::silence(CLIP_SAMPLES);
    normalize_f64_into(&buf, &mut clip.samples);
    clip
}

/// Sum of stems, peak-normalized.
pub(crate) fn mix_stems<'a>(stems: impl IntoIterator<Item = &'a AudioClip>, len: usize) -> AudioClip {
    let mut buf = vec![0.0f64; len];
    for stem in stems {
        for (b, &s) in buf.iter_mut().zip(&stem.samples) {
            *b += f64::from(s);
        }
    }
    let mut clip = AudioClip::silence(len);
    normalize_f64_into(&buf, &mut clip.samples);
    clip
}

/// Render each track with its instrument and mix the stems.
pub fn render_multi(
    specs: &[InstrumentSpec],
    tracks: &[TrackScore],
) -> Result<(AudioClip, Vec<AudioClip>), SynthError> {
    if specs.len() != tracks.len() {
        return Err(SynthError::CountMismatch {
            specs: specs.len(),
            tracks: tracks.len(),
        });
    }
    if specs.len() < 2 {
        return Err(SynthError::TooFewTracks(specs.len()));
    }
    if specs.len() > 9 {
        return Err(SynthError::TooManyTracks(specs.len()));
    }
    for (spec, track) in specs.iter().zip(tracks) {
        if spec.family != track.family {
            return Err(SynthError::FamilyMismatch {
                id: spec.id.clone(),
                instrument: spec.family,
                track: track.family,
            });
        }
    }
    let stems: Vec<AudioClip> = specs
        .iter()
        .zip(tracks)
        .map(|(spec, track)| render_single(spec, &track.events))
        .collect();
    let mixture = mix_stems(&stems, CLIP_SAMPLES);
    Ok((mixture, stems))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Envelope, Family};
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine_spec(id: &str, family: Family) -> InstrumentSpec {
        InstrumentSpec {
            id: id.into(),
            family,
            harmonic_amplitudes: vec![1.0],
            envelope: Envelope {
                attack: 0.01,
                decay: 0.0,
                sustain: 1.0,
                release: 0.05,
            },
            detune_cents: 0.0,
            noise_level: 0.0,
        }
    }

    fn note(pitch: u8, onset_s: f64, duration_s: f64) -> NoteEvent {
        NoteEvent {
            pitch,
            velocity: 100,
            onset_s,
            duration_s,
        }
    }

    fn magnitude_spectrum(clip: &AudioClip) -> Vec<f64> {
        let mut data: Vec<Complex<f64>> = clip
            .samples
            .iter()
            .map(|&s| Complex::new(f64::from(s), 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(data.len()).process(&mut data);
        data[..data.len() / 2].iter().map(|c| c.norm()).collect()
    }

    fn peak_hz(spectrum: &[f64]) -> f64 {
        let (bin, _) = spectrum
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        bin as f64 * f64::from(SAMPLE_RATE) / CLIP_SAMPLES as f64
    }

    #[test]
    fn empty_events_render_silence() {
        let clip = render_single(&sine_spec("a", Family::Flute), &[]);
        assert_eq!(clip.len(), CLIP_SAMPLES);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn a440_peaks_at_440_hz() {
        let clip = render_single(&sine_spec("a", Family::Flute), &[note(69, 0.5, 3.0)]);
        let hz = peak_hz(&magnitude_spectrum(&clip));
        // bins are 0.2 Hz apart over the full clip
        assert!((hz - 440.0).abs() <= 0.2, "peak at {hz}");
        assert!((clip.peak() - PEAK_LEVEL).abs() < 1e-6);
    }

    #[test]
    fn nonzero_renders_are_peak_normalized() {
        let mut rng = crate::rng::rng_for(5, "t", 0);
        for family in [Family::Bass, Family::Mallet, Family::Vocal] {
            let spec = InstrumentSpec::random("x", family, &mut rng);
            let clip = render_single(&spec, &[note(50, 0.0, 0.3), note(57, 1.0, 2.0)]);
            assert!((clip.peak() - PEAK_LEVEL).abs() < 1e-6);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = crate::rng::rng_for(6, "t", 0);
        let spec = InstrumentSpec::random("noisy", Family::Flute, &mut rng);
        let events = [note(72, 0.2, 1.0), note(74, 1.5, 1.0)];
        assert_eq!(render_single(&spec, &events), render_single(&spec, &events));
    }

    fn track(family: Family, events: Vec<NoteEvent>) -> TrackScore {
        TrackScore {
            family,
            source_program: family.default_program(),
            events,
        }
    }

    #[test]
    fn identical_stems_mix_to_the_stem() {
        let s = sine_spec("a", Family::Organ);
        let t = track(Family::Organ, vec![note(60, 0.0, 2.0)]);
        let (mix, stems) = render_multi(&[s.clone(), s], &[t.clone(), t]).unwrap();
        for (m, x) in mix.samples.iter().zip(&stems[0].samples) {
            assert!((m - x).abs() < 1e-6);
        }
    }

    #[test]
    fn silent_stem_is_additive_identity() {
        let s = sine_spec("a", Family::Organ);
        let (mix, stems) = render_multi(
            &[s.clone(), s],
            &[
                track(Family::Organ, vec![]),
                track(Family::Organ, vec![note(62, 0.3, 2.0)]),
            ],
        )
        .unwrap();
        assert_eq!(mix, stems[1]);
    }

    #[test]
    fn disjoint_band_mixture_keeps_all_peaks() {
        let specs = [
            sine_spec("a", Family::Bass),
            sine_spec("b", Family::Organ),
            sine_spec("c", Family::Flute),
        ];
        let tracks = [
            track(Family::Bass, vec![note(45, 0.0, 4.5)]),
            track(Family::Organ, vec![note(69, 0.0, 4.5)]),
            track(Family::Flute, vec![note(93, 0.0, 4.5)]),
        ];
        let (mix, _) = render_multi(&specs, &tracks).unwrap();
        let spec = magnitude_spectrum(&mix);
        let hz_per_bin = f64::from(SAMPLE_RATE) / CLIP_SAMPLES as f64;
        let band_peak = |lo: f64, hi: f64| {
            let (a, b) = ((lo / hz_per_bin) as usize, (hi / hz_per_bin) as usize);
            let (i, _) = spec[a..b]
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .unwrap();
            (a + i) as f64 * hz_per_bin
        };
        assert!((band_peak(50.0, 200.0) - 110.0).abs() <= 0.2);
        assert!((band_peak(300.0, 800.0) - 440.0).abs() <= 0.2);
        assert!((band_peak(1000.0, 3000.0) - 1760.0).abs() <= 0.2);
    }

    #[test]
    fn multi_errors() {
        let s = sine_spec("a", Family::Organ);
        let t = track(Family::Organ, vec![]);
        assert!(matches!(
            render_multi(&[s.clone()], &[t.clone()]),
            Err(SynthError::TooFewTracks(1))
        ));
        assert!(matches!(
            render_multi(&[s.clone(), s.clone()], &[t.clone(), track(Family::Bass, vec![])]),
            Err(SynthError::FamilyMismatch { .. })
        ));
        assert!(matches!(
            render_multi(&[s.clone(), s.clone()], &[t]),
            Err(SynthError::CountMismatch { .. })
        ));
    }
}
