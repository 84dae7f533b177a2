use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SynthError;

/// Coarse instrument taxonomy shared by instruments and MIDI tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Bass,
    Brass,
    Flute,
    Guitar,
    Keyboard,
    Mallet,
    Organ,
    Reed,
    String,
    SynthLead,
    Vocal,
}

impl Family {
    pub const ALL: [Family; 11] = [
        Family::Bass,
        Family::Brass,
        Family::Flute,
        Family::Guitar,
        Family::Keyboard,
        Family::Mallet,
        Family::Organ,
        Family::Reed,
        Family::String,
        Family::SynthLead,
        Family::Vocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Bass => "bass",
            Family::Brass => "brass",
            Family::Flute => "flute",
            Family::Guitar => "guitar",
            Family::Keyboard => "keyboard",
            Family::Mallet => "mallet",
            Family::Organ => "organ",
            Family::Reed => "reed",
            Family::String => "string",
            Family::SynthLead => "synth_lead",
            Family::Vocal => "vocal",
        }
    }

    /// Playable pitch range (inclusive MIDI note numbers) used when composing parts.
    pub fn register(self) -> (u8, u8) {
        match self {
            Family::Bass => (28, 52),
            Family::Brass => (48, 74),
            Family::Flute => (62, 93),
            Family::Guitar => (40, 76),
            Family::Keyboard => (36, 84),
            Family::Mallet => (53, 89),
            Family::Organ => (36, 79),
            Family::Reed => (50, 81),
            Family::String => (43, 88),
            Family::SynthLead => (48, 84),
            Family::Vocal => (48, 76),
        }
    }

    /// A representative General MIDI program for this family.
    pub fn default_program(self) -> u8 {
        match self {
            Family::Keyboard => 0,
            Family::Mallet => 11,
            Family::Organ => 16,
            Family::Guitar => 24,
            Family::Bass => 32,
            Family::String => 40,
            Family::Vocal => 52,
            Family::Brass => 56,
            Family::Reed => 64,
            Family::Flute => 73,
            Family::SynthLead => 80,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| SynthError::UnknownFamily(s.to_string()))
    }
}

/// Map a 0-based General MIDI program number onto the family taxonomy.
///
/// | programs | GM bank              | family     |
/// |----------|----------------------|------------|
/// | 0–7      | piano                | keyboard   |
/// | 8–15     | chromatic percussion | mallet     |
/// | 16–23    | organ                | organ      |
/// | 24–31    | guitar               | guitar     |
/// | 32–39    | bass                 | bass       |
/// | 40–51    | strings, ensembles   | string     |
/// | 52–54    | choir, voice         | vocal      |
/// | 55       | orchestra hit        | string     |
/// | 56–63    | brass                | brass      |
/// | 64–71    | reed                 | reed       |
/// | 72–79    | pipe                 | flute      |
/// | 80–103   | synth lead/pad/fx    | synth_lead |
/// | 104–108  | ethnic plucked       | guitar     |
/// | 109, 111 | bagpipe, shanai      | reed       |
/// | 110      | fiddle               | string     |
/// | 112–119  | percussive           | mallet     |
/// | 120–127  | sound effects        | synth_lead |
pub fn general_midi_family(program: u8) -> Result<Family, SynthError> {
    let family = match program {
        0..=7 => Family::Keyboard,
        8..=15 => Family::Mallet,
        16..=23 => Family::Organ,
        24..=31 => Family::Guitar,
        32..=39 => Family::Bass,
        40..=51 | 55 => Family::String,
        52..=54 => Family::Vocal,
        56..=63 => Family::Brass,
        64..=71 => Family::Reed,
        72..=79 => Family::Flute,
        80..=103 => Family::SynthLead,
        104..=108 => Family::Guitar,
        109 | 111 => Family::Reed,
        110 => Family::String,
        112..=119 => Family::Mallet,
        120..=127 => Family::SynthLead,
        _ => return Err(SynthError::InvalidProgram(program)),
    };
    Ok(family)
}

/// The full program table, as written next to generated datasets.
pub fn general_midi_table() -> Vec<(u8, Family)> {
    (0..=127u8)
        .map(|p| (p, general_midi_family(p).expect("0..=127 is in range")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gm_lookups() {
        assert_eq!(general_midi_family(32).unwrap(), Family::Bass);
        assert_eq!(general_midi_family(25).unwrap(), Family::Guitar);
        assert_eq!(general_midi_family(19).unwrap(), Family::Organ);
        assert_eq!(general_midi_family(115).unwrap(), Family::Mallet);
        assert_eq!(general_midi_family(125).unwrap(), Family::SynthLead);
    }

    #[test]
    fn out_of_range_program() {
        assert!(matches!(
            general_midi_family(128),
            Err(SynthError::InvalidProgram(128))
        ));
    }

    #[test]
    fn table_is_total_and_default_programs_round_trip() {
        assert_eq!(general_midi_table().len(), 128);
        for f in Family::ALL {
            assert_eq!(general_midi_family(f.default_program()).unwrap(), f);
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("banjo".parse::<Family>().is_err());
    }
}
