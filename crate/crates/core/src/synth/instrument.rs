use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Family, SynthError};
use crate::rng::Rng;

pub const MAX_HARMONICS: usize = 16;

/// ADSR envelope. Times in seconds, `sustain` is a level in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub attack: f64,
    pub decay: f64,
    pub sustain: f64,
    pub release: f64,
}

impl Envelope {
    /// Gain at `t` seconds after note-on for a note released at `held`.
    pub fn gain(&self, t: f64, held: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        if t < held {
            return self.held_gain(t);
        }
        let from = self.held_gain(held);
        if self.release <= 0.0 {
            return 0.0;
        }
        let r = (t - held) / self.release;
        if r >= 1.0 {
            0.0
        } else {
            from * (1.0 - r)
        }
    }

    fn held_gain(&self, t: f64) -> f64 {
        if t < self.attack {
            return t / self.attack;
        }
        let t = t - self.attack;
        if t < self.decay {
            1.0 - (1.0 - self.sustain) * (t / self.decay)
        } else {
            self.sustain
        }
    }
}

/// A parametric additive-synthesis instrument.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    pub id: String,
    pub family: Family,
    /// Relative amplitude of partial `k + 1`.
    pub harmonic_amplitudes: Vec<f64>,
    pub envelope: Envelope,
    /// Spread between the two oscillators voicing each note.
    pub detune_cents: f64,
    pub noise_level: f64,
}

struct Template {
    harmonics: [f64; 8],
    rolloff: f64,
    envelope: [f64; 4],
    noise: f64,
}

fn template(family: Family) -> Template {
    let t = |harmonics, rolloff, envelope, noise| Template {
        harmonics,
        rolloff,
        envelope,
        noise,
    };
    match family {
        Family::Bass => t([1.0, 0.5, 0.25, 0.12, 0.06, 0.03, 0.0, 0.0], 2.0, [0.005, 0.35, 0.35, 0.08], 0.01),
        Family::Brass => t([0.6, 0.9, 1.0, 0.8, 0.6, 0.45, 0.3, 0.2], 0.6, [0.06, 0.15, 0.8, 0.12], 0.02),
        Family::Flute => t([1.0, 0.25, 0.1, 0.04, 0.0, 0.0, 0.0, 0.0], 3.0, [0.08, 0.1, 0.85, 0.1], 0.08),
        Family::Guitar => t([1.0, 0.7, 0.5, 0.35, 0.25, 0.18, 0.12, 0.08], 1.0, [0.002, 0.6, 0.15, 0.2], 0.02),
        Family::Keyboard => t([1.0, 0.45, 0.3, 0.15, 0.1, 0.05, 0.03, 0.02], 1.6, [0.002, 0.9, 0.25, 0.3], 0.01),
        Family::Mallet => t([1.0, 0.0, 0.0, 0.45, 0.0, 0.0, 0.0, 0.2], 1.5, [0.001, 0.25, 0.0, 0.15], 0.03),
        Family::Organ => t([1.0, 0.8, 0.0, 0.6, 0.0, 0.4, 0.0, 0.3], 0.8, [0.01, 0.05, 1.0, 0.04], 0.0),
        Family::Reed => t([1.0, 0.05, 0.7, 0.05, 0.5, 0.05, 0.35, 0.05], 0.9, [0.03, 0.1, 0.85, 0.08], 0.04),
        Family::String => t([1.0, 0.5, 0.33, 0.25, 0.2, 0.17, 0.14, 0.12], 0.7, [0.12, 0.2, 0.9, 0.25], 0.03),
        Family::SynthLead => t([1.0, 0.5, 0.33, 0.25, 0.2, 0.17, 0.14, 0.12], 0.3, [0.01, 0.1, 0.9, 0.06], 0.0),
        Family::Vocal => t([0.7, 1.0, 0.9, 0.3, 0.15, 0.4, 0.35, 0.1], 1.4, [0.07, 0.1, 0.9, 0.12], 0.05),
    }
}

impl InstrumentSpec {
    /// Draw a new instrument of `family`: the family template with
    /// per-instrument perturbations of every partial, the envelope, noise
    /// and detune.
    pub fn random(id: impl Into<String>, family: Family, rng: &mut Rng) -> Self {
        let tpl = template(family);
        let jitter = Normal::<f64>::new(0.0, 0.7).expect("valid normal");
        let tilt: f64 = rng.gen_range(-0.6..0.6);
        let count = rng.gen_range(8..=MAX_HARMONICS);
        let mut harmonic_amplitudes = Vec::with_capacity(count);
        for k in 0..count {
            let h = (k + 1) as f64;
            let base = if k < tpl.harmonics.len() {
                tpl.harmonics[k]
            } else {
                tpl.harmonics[7].max(0.05) * (8.0 / h).powf(tpl.rolloff)
            };
            // Occasionally revive a silent template partial so timbres differ.
            let base = if base == 0.0 && rng.gen_bool(0.25) { 0.1 } else { base };
            let amp = base * h.powf(-tilt) * jitter.sample(rng).exp();
            harmonic_amplitudes.push(amp);
        }
        let peak = harmonic_amplitudes.iter().cloned().fold(0.0, f64::max);
        for a in &mut harmonic_amplitudes {
            *a /= peak;
        }

        let scale = |rng: &mut Rng, v: f64| v * rng.gen_range(-0.9f64..0.9).exp();
        let [attack, decay, sustain, release] = tpl.envelope;
        let envelope = Envelope {
            attack: scale(rng, attack),
            decay: scale(rng, decay),
            sustain: (sustain + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0),
            release: scale(rng, release),
        };
        let noise_level = (tpl.noise * rng.gen_range(0.3..2.0) + rng.gen_range(0.0..0.02)).min(0.2);
        let detune_cents = rng.gen_range(-25.0..25.0);

        InstrumentSpec {
            id: id.into(),
            family,
            harmonic_amplitudes,
            envelope,
            detune_cents,
            noise_level,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: &str| SynthError::InvalidInstrument {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.harmonic_amplitudes.is_empty() || self.harmonic_amplitudes.len() > MAX_HARMONICS {
            return Err(bad("needs 1 to 16 harmonic amplitudes"));
        }
        if self
            .harmonic_amplitudes
            .iter()
            .any(|a| !a.is_finite() || *a < 0.0)
        {
            return Err(bad("harmonic amplitudes must be finite and non-negative"));
        }
        if !self.harmonic_amplitudes.iter().any(|a| *a > 0.0) {
            return Err(bad("at least one harmonic amplitude must be positive"));
        }
        let e = &self.envelope;
        if [e.attack, e.decay, e.release]
            .iter()
            .any(|t| !t.is_finite() || *t < 0.0)
        {
            return Err(bad("envelope times must be non-negative"));
        }
        if !(0.0..=1.0).contains(&e.sustain) {
            return Err(bad("sustain level must lie in [0, 1]"));
        }
        if !(-50.0..=50.0).contains(&self.detune_cents) {
            return Err(bad("detune must lie in [-50, 50] cents"));
        }
        if !(0.0..=0.2).contains(&self.noise_level) {
            return Err(bad("noise level must lie in [0, 0.2]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn random_instruments_are_valid_and_seeded() {
        for (i, family) in Family::ALL.iter().enumerate() {
            let mut rng = Rng::seed_from_u64(i as u64);
            let spec = InstrumentSpec::random(format!("{family}_{i}"), *family, &mut rng);
            spec.validate().unwrap();
            let mut rng = Rng::seed_from_u64(i as u64);
            assert_eq!(spec, InstrumentSpec::random(spec.id.clone(), *family, &mut rng));
        }
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut rng = Rng::seed_from_u64(1);
        let good = InstrumentSpec::random("x", Family::Organ, &mut rng);
        let mut s = good.clone();
        s.harmonic_amplitudes = vec![0.0; 4];
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.envelope.sustain = 1.5;
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.envelope.attack = -0.1;
        assert!(s.validate().is_err());
        let mut s = good;
        s.noise_level = 0.3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn envelope_shape() {
        let e = Envelope {
            attack: 0.1,
            decay: 0.1,
            sustain: 0.5,
            release: 0.2,
        };
        assert_eq!(e.gain(0.0, 1.0), 0.0);
        assert!((e.gain(0.05, 1.0) - 0.5).abs() < 1e-12);
        assert!((e.gain(0.1, 1.0) - 1.0).abs() < 1e-12);
        assert!((e.gain(0.5, 1.0) - 0.5).abs() < 1e-12);
        assert!((e.gain(1.1, 1.0) - 0.25).abs() < 1e-12);
        assert_eq!(e.gain(1.3, 1.0), 0.0);
    }
}
