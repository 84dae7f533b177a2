mod common;

use std::f64::consts::PI;

use instret::dsp::{filter_centers_hz, hann, log_mel, mel_filterbank, stft, MelConfig};
use instret::synth::{AudioClip, SAMPLE_RATE};
use proptest::prelude::*;

fn clip(samples: Vec<f32>) -> AudioClip {
    AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

fn tone(hz: f64, len: usize) -> AudioClip {
    clip((0..len)
        .map(|i| (0.5 * (2.0 * PI * hz * i as f64 / f64::from(SAMPLE_RATE)).sin()) as f32)
        .collect())
}

/// `Σ_k |X_k|²` over the full spectrum, from the one-sided magnitudes.
fn full_spectrum_energy(row: ndarray::ArrayView1<'_, f64>, n: usize) -> f64 {
    row.iter()
        .enumerate()
        .map(|(k, m)| if k == 0 || k == n / 2 { m * m } else { 2.0 * m * m })
        .sum()
}

#[test]
fn parseval_on_noise() {
    let config = MelConfig::default();
    let n = config.fft_size;
    let window = hann(n);
    let samples: Vec<f32> = (0..8000u32)
        .map(|i| ((i.wrapping_mul(2654435761) >> 8) as f32 / (1u32 << 24) as f32) * 2.0 - 1.0)
        .collect();
    let c = clip(samples);
    let mag = stft(&c, &config).unwrap();
    for (f, row) in mag.outer_iter().enumerate() {
        let start = f * config.hop;
        let time: f64 = (0..n).map(|i| (f64::from(c.samples[start + i]) * window[i]).powi(2)).sum();
        let freq = full_spectrum_energy(row, n);
        assert!((freq - n as f64 * time).abs() <= 1e-6 * n as f64 * time, "frame {f}");
    }
}

#[test]
fn tone_at_filter_center_is_argmax() {
    let config = MelConfig::default();
    let centers = filter_centers_hz(&config);
    for (m, &hz) in centers.iter().enumerate() {
        let mel = log_mel(&tone(hz, 8192), &config).unwrap();
        for (f, row) in mel.values.outer_iter().enumerate() {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            assert_eq!(arg, m, "filter {m} at {hz:.1} Hz, frame {f}");
        }
    }
}

#[test]
fn filterbank_is_non_negative_and_overlapping() {
    let config = MelConfig::default();
    let fb = mel_filterbank(&config);
    assert!(fb.iter().all(|&v| v >= 0.0));
    for m in 0..config.mel_bins - 1 {
        let overlap = fb.row(m).iter().zip(fb.row(m + 1).iter()).any(|(a, b)| *a > 0.0 && *b > 0.0);
        assert!(overlap, "filters {m} and {}", m + 1);
    }
}

proptest! {
    #![proptest_config(common::proptest_config(64))]

    #[test]
    fn shape_finite_and_floored(len in 1024usize..6000, seed in any::<u32>()) {
        let config = MelConfig::default();
        let samples: Vec<f32> = (0..len as u32)
            .map(|i| ((i ^ seed).wrapping_mul(2246822519) >> 9) as f32 / (1u32 << 23) as f32 - 1.0)
            .collect();
        let mel = log_mel(&clip(samples), &config).unwrap();
        prop_assert_eq!(mel.values.dim(), (1 + (len - config.fft_size) / config.hop, config.mel_bins));
        let floor = config.log_floor.ln();
        prop_assert!(mel.values.iter().all(|v| v.is_finite() && *v >= floor));
    }

    #[test]
    fn bit_identical_reruns(seed in any::<u32>()) {
        let config = MelConfig::default();
        let samples: Vec<f32> = (0..3000u32).map(|i| ((i.wrapping_add(seed) % 97) as f32 / 97.0) - 0.5).collect();
        let a = log_mel(&clip(samples.clone()), &config).unwrap();
        let b = log_mel(&clip(samples), &config).unwrap();
        prop_assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
