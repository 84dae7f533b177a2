//! Log-mel spectrogram front end.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{AudioClip, SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("clip has {len} samples, fewer than the FFT size {fft_size}")]
    ClipTooShort { len: usize, fft_size: usize },
    #[error("clip sample rate {got} Hz differs from the configured {want} Hz")]
    SampleRate { got: u32, want: u32 },
    #[error("invalid mel configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: SAMPLE_RATE,
            fft_size: 1024,
            hop: 512,
            mel_bins: 64,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: &str| Err(DspError::InvalidConfig(m.to_string()));
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return bad("fft_size must be a power of two");
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return bad("hop must lie in 1..=fft_size");
        }
        if self.mel_bins < 2 {
            return bad("mel_bins must be at least 2");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= f64::from(self.sample_rate) / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn frequency_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a clip of `len` samples (`len >= fft_size`).
    pub fn frames(&self, len: usize) -> usize {
        1 + (len - self.fft_size) / self.hop
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn check_clip(clip: &AudioClip, config: &MelConfig) -> Result<(), DspError> {
    config.validate()?;
    if clip.sample_rate != config.sample_rate {
        return Err(DspError::SampleRate {
            got: clip.sample_rate,
            want: config.sample_rate,
        });
    }
    if clip.len() < config.fft_size {
        return Err(DspError::ClipTooShort {
            len: clip.len(),
            fft_size: config.fft_size,
        });
    }
    Ok(())
}

/// Magnitude STFT, frames × (fft_size / 2 + 1).
pub fn stft(clip: &AudioClip, config: &MelConfig) -> Result<Array2<f64>, DspError> {
    check_clip(clip, config)?;
    let n = config.fft_size;
    let frames = config.frames(clip.len());
    let window = hann(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = Array2::zeros((frames, config.frequency_bins()));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for (f, mut row) in out.outer_iter_mut().enumerate() {
        let start = f * config.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(f64::from(clip.samples[start + i]) * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, c) in row.iter_mut().zip(&buf) {
            *o = c.norm();
        }
    }
    Ok(out)
}

/// Triangular filters, mel_bins × (fft_size / 2 + 1), each peaking at 1
/// on its center frequency.
pub fn mel_filterbank(config: &MelConfig) -> Array2<f64> {
    let edges = filter_edges_hz(config);
    let bin_hz = f64::from(config.sample_rate) / config.fft_size as f64;
    let mut fb = Array2::zeros((config.mel_bins, config.frequency_bins()));
    for m in 0..config.mel_bins {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..config.frequency_bins() {
            let f = k as f64 * bin_hz;
            let w = if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[[m, k]] = w.max(0.0);
        }
    }
    fb
}

/// `mel_bins + 2` edge frequencies equally spaced on the mel scale; filter
/// `m` spans edges `m..=m + 2` and peaks at edge `m + 1`.
pub fn filter_edges_hz(config: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
    let steps = (config.mel_bins + 1) as f64;
    (0..config.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / steps))
        .collect()
}

pub fn filter_centers_hz(config: &MelConfig) -> Vec<f64> {
    let edges = filter_edges_hz(config);
    edges[1..=config.mel_bins].to_vec()
}

/// Natural-log mel magnitudes, frames × mel_bins.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    /// Write `path` (row-major little-endian f32) and `path.json` (shape + config).
    pub fn write_dump(&self, path: &Path) -> Result<(), DspError> {
        #[derive(Serialize)]
        struct Header<'a> {
            shape: [usize; 2],
            dtype: &'static str,
            config: &'a MelConfig,
        }
        let header = Header {
            shape: [self.frames(), self.bins()],
            dtype: "float32_le",
            config: &self.config,
        };
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in self.values.iter() {
            bytes.write_all(&(*v as f32).to_le_bytes())?;
        }
        fs::write(path, bytes)?;
        fs::write(json_sidecar(path), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }

    pub fn read_dump(path: &Path) -> Result<MelSpectrogram, DspError> {
        #[derive(Deserialize)]
        struct Header {
            shape: [usize; 2],
            config: MelConfig,
        }
        let header: Header = serde_json::from_slice(&fs::read(json_sidecar(path))?)?;
        let bytes = fs::read(path)?;
        let [rows, cols] = header.shape;
        if bytes.len() != rows * cols * 4 {
            return Err(DspError::InvalidConfig(format!(
                "dump holds {} bytes, header declares {rows}x{cols} floats",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let values = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| DspError::InvalidConfig(e.to_string()))?;
        Ok(MelSpectrogram {
            values,
            config: header.config,
        })
    }
}

fn json_sidecar(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    name.into()
}

/// Reusable front end: the filterbank is built once.
#[derive(Clone, Debug)]
pub struct MelFrontEnd {
    config: MelConfig,
    filterbank: Array2<f64>,
}

impl MelFrontEnd {
    pub fn new(config: MelConfig) -> Result<Self, DspError> {
        config.validate()?;
        let filterbank = mel_filterbank(&config);
        Ok(MelFrontEnd { config, filterbank })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<MelSpectrogram, DspError> {
        let mag = stft(clip, &self.config)?;
        let floor = self.config.log_floor;
        let values = mag
            .dot(&self.filterbank.t())
            .mapv(|v| v.max(floor).ln());
        Ok(MelSpectrogram {
            values,
            config: self.config.clone(),
        })
    }
}

/// `ln(max(filterbank · |STFT|, log_floor))` per frame.
pub fn log_mel(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram, DspError> {
    MelFrontEnd::new(config.clone())?.log_mel(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    fn tone(hz: f64, len: usize, amp: f64) -> AudioClip {
        clip((0..len)
            .map(|i| (amp * (2.0 * PI * hz * i as f64 / f64::from(SAMPLE_RATE)).sin()) as f32)
            .collect())
    }

    #[test]
    fn silence_gives_zero_magnitudes_and_floor() {
        let config = MelConfig::default();
        let silent = clip(vec![0.0; 4096]);
        let mag = stft(&silent, &config).unwrap();
        assert_eq!(mag.dim(), (config.frames(4096), 513));
        assert!(mag.iter().all(|&v| v == 0.0));
        let mel = log_mel(&silent, &config).unwrap();
        assert!(mel.values.iter().all(|&v| v == (1e-5f64).ln()));
    }

    #[test]
    fn impulse_spectrum_is_flat_at_window_value() {
        let config = MelConfig::default();
        let window = hann(config.fft_size);
        for pos in [0usize, 100, 256, 700] {
            let mut s = vec![0.0f32; config.fft_size];
            s[pos] = 1.0;
            let mag = stft(&clip(s), &config).unwrap();
            for &m in mag.row(0) {
                assert!((m - window[pos]).abs() < 1e-12, "pos {pos}: {m} vs {}", window[pos]);
            }
        }
    }

    #[test]
    fn too_short_clip() {
        assert!(matches!(
            stft(&clip(vec![0.0; 100]), &MelConfig::default()),
            Err(DspError::ClipTooShort { len: 100, .. })
        ));
    }

    #[test]
    fn mel_scale_values() {
        assert!((hz_to_mel(1000.0) - 999.985_537_139_624_4).abs() < 1e-9);
        assert!((mel_to_hz(hz_to_mel(440.0)) - 440.0).abs() < 1e-9);
    }

    #[test]
    fn filters_are_unimodal_with_increasing_centers() {
        let config = MelConfig::default();
        let fb = mel_filterbank(&config);
        assert_eq!(fb.dim(), (64, 513));
        for row in fb.outer_iter() {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            assert!(max > 0.0);
            assert_eq!(row.iter().filter(|&&v| v == max).count(), 1);
            let peak = row.iter().position(|&v| v == max).unwrap();
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.as_slice().unwrap()[..=peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row.as_slice().unwrap()[peak..].windows(2).all(|w| w[0] >= w[1]));
        }
        let centers = filter_centers_hz(&config);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        // adjacent filters overlap
        for m in 0..63 {
            assert!(fb.row(m).iter().zip(fb.row(m + 1)).any(|(a, b)| *a > 0.0 && *b > 0.0));
        }
    }

    #[test]
    fn scaling_adds_ln2() {
        let config = MelConfig::default();
        let a = log_mel(&tone(523.0, 8192, 0.3), &config).unwrap();
        let b = log_mel(&tone(523.0, 8192, 0.6), &config).unwrap();
        let floor = config.log_floor.ln();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > floor + 1.0 {
                assert!((y - x - 2f64.ln()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.bin");
        let mel = log_mel(&tone(300.0, 4096, 0.5), &MelConfig::default()).unwrap();
        mel.write_dump(&path).unwrap();
        let back = MelSpectrogram::read_dump(&path).unwrap();
        assert_eq!(back.config, mel.config);
        for (a, b) in mel.values.iter().zip(&back.values) {
            assert_eq!(*b, f64::from(*a as f32));
        }
    }
}
