use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::render::mix_stems;
use super::{AudioClip, Family, SynthError};
use crate::rng::rng_for;

/// Single-instrument clips available for on-the-fly mixing.
#[derive(Clone, Debug, Default)]
pub struct ClipPool {
    pub clips: Vec<PoolClip>,
}

#[derive(Clone, Debug)]
pub struct PoolClip {
    pub instrument_id: String,
    pub family: Family,
    pub clip: AudioClip,
}

impl ClipPool {
    pub fn push(&mut self, instrument_id: impl Into<String>, family: Family, clip: AudioClip) {
        self.clips.push(PoolClip {
            instrument_id: instrument_id.into(),
            family,
            clip,
        });
    }

    /// Clip indices grouped by instrument id (ids in sorted order).
    pub fn by_instrument(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in self.clips.iter().enumerate() {
            map.entry(c.instrument_id.as_str()).or_default().push(i);
        }
        map
    }
}

/// Range of instrument counts per random mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub min_instruments: usize,
    pub max_instruments: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            min_instruments: 2,
            max_instruments: 9,
        }
    }
}

/// Which pool clips a random mixture combines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixPlan {
    /// Distinct instrument ids, in draw order.
    pub instrument_ids: Vec<String>,
    /// Pool index of the clip used for each instrument.
    pub clip_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RandomMix {
    pub mixture: AudioClip,
    pub plan: MixPlan,
}

/// Draw a count uniformly in the configured range, that many distinct
/// instruments, and one clip per instrument.
pub fn sample_mix_plan(pool: &ClipPool, config: MixConfig, seed: u64) -> Result<MixPlan, SynthError> {
    if config.min_instruments < 1 || config.min_instruments > config.max_instruments {
        return Err(SynthError::InvalidMixConfig(format!(
            "instrument range {}..={} is empty",
            config.min_instruments, config.max_instruments
        )));
    }
    let groups: Vec<(&str, Vec<usize>)> = pool.by_instrument().into_iter().collect();
    if groups.len() < config.max_instruments {
        return Err(SynthError::PoolTooSmall {
            available: groups.len(),
            required: config.max_instruments,
        });
    }
    let mut rng = rng_for(seed, "random_mix", 0);
    let count = rng.gen_range(config.min_instruments..=config.max_instruments);
    let picked = sample_indices(&mut rng, groups.len(), count);
    let mut instrument_ids = Vec::with_capacity(count);
    let mut clip_indices = Vec::with_capacity(count);
    for g in picked.iter() {
        let (id, clips) = &groups[g];
        instrument_ids.push((*id).to_string());
        clip_indices.push(clips[rng.gen_range(0..clips.len())]);
    }
    Ok(MixPlan {
        instrument_ids,
        clip_indices,
    })
}

/// Random mixture drawn from a pool of single-instrument clips.
pub fn random_mix(pool: &ClipPool, config: MixConfig, seed: u64) -> Result<RandomMix, SynthError> {
    let plan = sample_mix_plan(pool, config, seed)?;
    let len = plan
        .clip_indices
        .iter()
        .map(|&i| pool.clips[i].clip.len())
        .max()
        .unwrap_or(0);
    let mixture = mix_stems(plan.clip_indices.iter().map(|&i| &pool.clips[i].clip), len);
    Ok(RandomMix { mixture, plan })
}
