use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Family, SynthError};
use crate::rng::{rng_for, Rng};

/// Length of every dataset clip.
pub const CLIP_SECONDS: f64 = 5.0;
/// A window is usable when at least this many notes start inside it.
pub const MIN_ONSETS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_s: f64,
    pub duration_s: f64,
}

impl NoteEvent {
    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }
}

/// Notes of one instrument part, sorted by onset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackScore {
    pub family: Family,
    pub source_program: u8,
    pub events: Vec<NoteEvent>,
}

impl TrackScore {
    pub fn sort_events(&mut self) {
        self.events.sort_by(|a, b| {
            a.onset_s
                .total_cmp(&b.onset_s)
                .then(a.pitch.cmp(&b.pitch))
        });
    }

    pub fn onsets(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.onset_s).collect()
    }

    /// Notes starting in `[start, start + CLIP_SECONDS)`, re-based to 0 and cut at the window end.
    pub fn window(&self, start: f64) -> TrackScore {
        let end = start + CLIP_SECONDS;
        let events = self
            .events
            .iter()
            .filter(|e| e.onset_s >= start && e.onset_s < end)
            .map(|e| {
                let onset_s = e.onset_s - start;
                NoteEvent {
                    onset_s,
                    duration_s: e.duration_s.min(CLIP_SECONDS - onset_s),
                    ..e.clone()
                }
            })
            .filter(|e| e.duration_s > 0.0)
            .collect();
        TrackScore {
            family: self.family,
            source_program: self.source_program,
            events,
        }
    }
}

/// Disjoint, sorted closed intervals of admissible window starts.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct StartSet {
    intervals: Vec<(f64, f64)>,
}

impl StartSet {
    /// Starts whose window holds at least [`MIN_ONSETS`] onsets.
    pub(crate) fn for_onsets(onsets: &[f64]) -> StartSet {
        let mut sorted = onsets.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut raw = Vec::new();
        for w in sorted.windows(MIN_ONSETS) {
            let (first, last) = (w[0], w[MIN_ONSETS - 1]);
            // the last onset must satisfy last < start + CLIP_SECONDS
            let open_lo = last - CLIP_SECONDS;
            let lo = open_lo.max(0.0);
            if first > lo || (first == lo && open_lo < lo) {
                raw.push((lo, first));
            }
        }
        StartSet::merged(raw)
    }

    fn merged(mut raw: Vec<(f64, f64)>) -> StartSet {
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut intervals: Vec<(f64, f64)> = Vec::new();
        for (lo, hi) in raw {
            match intervals.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => intervals.push((lo, hi)),
            }
        }
        StartSet { intervals }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Starts covered by at least `k` of `sets`, keeping only positive-length pieces.
    pub(crate) fn covered_by_at_least(sets: &[StartSet], k: usize) -> StartSet {
        let mut edges: Vec<(f64, i32)> = Vec::new();
        for set in sets {
            for &(lo, hi) in &set.intervals {
                edges.push((lo, 1));
                edges.push((hi, -1));
            }
        }
        // opening edges before closing ones at equal positions
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut depth = 0i32;
        let mut raw = Vec::new();
        let mut open_at = None;
        for (x, d) in edges {
            depth += d;
            if depth >= k as i32 && open_at.is_none() {
                open_at = Some(x);
            } else if depth < k as i32 {
                if let Some(lo) = open_at.take() {
                    if x > lo {
                        raw.push((lo, x));
                    }
                }
            }
        }
        StartSet::merged(raw)
    }

    /// Uniform draw over the set; falls back to a uniform pick among
    /// degenerate single-point intervals when the set has zero measure.
    pub(crate) fn sample(&self, rng: &mut Rng) -> Option<f64> {
        if self.intervals.is_empty() {
            return None;
        }
        let total: f64 = self.intervals.iter().map(|(lo, hi)| hi - lo).sum();
        if total <= 0.0 {
            let i = rng.gen_range(0..self.intervals.len());
            return Some(self.intervals[i].0);
        }
        let mut u = rng.gen_range(0.0..total);
        for &(lo, hi) in &self.intervals {
            let len = hi - lo;
            if u < len {
                return Some(lo + u);
            }
            u -= len;
        }
        self.intervals.last().map(|iv| iv.1)
    }
}

/// Pick a window start uniformly among those holding at least three onsets.
pub fn excerpt_window(track: &TrackScore, seed: u64) -> Result<f64, SynthError> {
    if track.events.is_empty() {
        return Err(SynthError::EmptyTrack);
    }
    let starts = StartSet::for_onsets(&track.onsets());
    let mut rng = rng_for(seed, "excerpt", 0);
    starts.sample(&mut rng).ok_or(SynthError::NoValidWindow {
        seconds: CLIP_SECONDS,
        min_onsets: MIN_ONSETS,
    })
}

/// Cut a random five-second excerpt with at least three note onsets.
pub fn excerpt(track: &TrackScore, seed: u64) -> Result<TrackScore, SynthError> {
    let start = excerpt_window(track, seed)?;
    Ok(track.window(start))
}
