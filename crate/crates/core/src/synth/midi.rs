//! Standard MIDI File reader and writer for the subset the pipeline needs:
//! formats 0 and 1, running status, tempo meta events, program changes and
//! note on/off pairing. Channel 10 (percussion) is skipped.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use super::{general_midi_family, NoteEvent, TrackScore};

const PERCUSSION_CHANNEL: u8 = 9;
const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("chunk at byte {offset} is truncated")]
    TruncatedChunk { offset: usize },
    #[error("SMF format {0} is not supported")]
    UnsupportedFormat(u16),
    #[error("malformed event at byte {offset}: {reason}")]
    MalformedEvent { offset: usize, reason: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Division {
    TicksPerQuarter(u16),
    /// Absolute timing: ticks per second.
    Smpte(f64),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` in the whole file, for error reporting.
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: &'static str) -> MidiError {
        MidiError::MalformedEvent {
            offset: self.base + self.pos,
            reason,
        }
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of track"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("data runs past end of track"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(self.err("variable-length quantity longer than 4 bytes"))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

#[derive(Debug)]
enum RawEvent {
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
    NoteOff { channel: u8, pitch: u8 },
    Program { channel: u8, program: u8 },
    Tempo(u32),
    EndOfTrack,
}

struct RawTrack {
    events: Vec<(u64, RawEvent)>,
    end_tick: u64,
}

fn read_track(cur: &mut Cursor<'_>) -> Result<RawTrack, MidiError> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut events = Vec::new();
    while !cur.at_end() {
        tick += u64::from(cur.vlq()?);
        let first = cur.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            cur.pos -= 1;
            running.ok_or_else(|| cur.err("running status without a prior status byte"))?
        };
        match status {
            0x80..=0xEF => {
                running = Some(status);
                let channel = status & 0x0f;
                let kind = status & 0xf0;
                let d1 = cur.u8()?;
                if d1 & 0x80 != 0 {
                    return Err(cur.err("data byte has the high bit set"));
                }
                let d2 = if matches!(kind, 0xC0 | 0xD0) {
                    0
                } else {
                    let d2 = cur.u8()?;
                    if d2 & 0x80 != 0 {
                        return Err(cur.err("data byte has the high bit set"));
                    }
                    d2
                };
                match kind {
                    0x90 if d2 > 0 => events.push((
                        tick,
                        RawEvent::NoteOn {
                            channel,
                            pitch: d1,
                            velocity: d2,
                        },
                    )),
                    0x80 | 0x90 => events.push((tick, RawEvent::NoteOff { channel, pitch: d1 })),
                    0xC0 => events.push((tick, RawEvent::Program { channel, program: d1 })),
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
            }
            0xFF => {
                running = None;
                let kind = cur.u8()?;
                let len = cur.vlq()? as usize;
                let data = cur.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from(data[0]) << 16 | u32::from(data[1]) << 8 | u32::from(data[2]);
                        if us == 0 {
                            return Err(cur.err("zero tempo"));
                        }
                        events.push((tick, RawEvent::Tempo(us)));
                    }
                    0x51 => return Err(cur.err("tempo event must carry 3 bytes")),
                    0x2F => {
                        events.push((tick, RawEvent::EndOfTrack));
                        break;
                    }
                    _ => {}
                }
            }
            _ => return Err(cur.err("undefined status byte")),
        }
    }
    Ok(RawTrack {
        events,
        end_tick: tick,
    })
}

/// Piecewise-linear tick → seconds conversion.
struct TempoMap {
    division: Division,
    /// (tick, seconds at tick, seconds per tick from here on)
    segments: Vec<(u64, f64, f64)>,
}

impl TempoMap {
    fn new(division: Division, changes: &BTreeMap<u64, u32>) -> TempoMap {
        let spt = |us: u32| match division {
            Division::TicksPerQuarter(tpq) => f64::from(us) * 1e-6 / f64::from(tpq),
            Division::Smpte(tps) => 1.0 / tps,
        };
        let mut segments = vec![(0u64, 0.0, spt(DEFAULT_TEMPO_US))];
        for (&tick, &us) in changes {
            let &(t0, s0, r0) = segments.last().expect("non-empty");
            let seconds = s0 + (tick - t0) as f64 * r0;
            if tick == t0 {
                segments.pop();
            }
            segments.push((tick, seconds, spt(us)));
        }
        TempoMap { division, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick);
        let (t0, s0, r0) = self.segments[idx.saturating_sub(1)];
        s0 + (tick - t0) as f64 * r0
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

/// Parse a Standard MIDI File into one [`TrackScore`] per (track, channel)
/// that plays at least one note.
pub fn parse_midi(bytes: &[u8]) -> Result<Vec<TrackScore>, MidiError> {
    if bytes.len() < 8 || &bytes[0..4] != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd magic"));
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader("header length below 6"));
    }
    if bytes.len() - 8 < header_len {
        return Err(MidiError::TruncatedChunk { offset: 0 });
    }
    let format = be_u16(&bytes[8..10]);
    let declared_tracks = be_u16(&bytes[10..12]);
    let raw_division = be_u16(&bytes[12..14]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat(2)),
        _ => return Err(MidiError::MalformedHeader("unknown format")),
    }
    let division = if raw_division & 0x8000 != 0 {
        let fps = -i32::from(((raw_division >> 8) as u8) as i8);
        let tpf = i32::from(raw_division & 0xff);
        if fps <= 0 || tpf == 0 {
            return Err(MidiError::MalformedHeader("invalid SMPTE division"));
        }
        // 29 denotes 29.97 drop-frame
        let fps = if fps == 29 { 29.97 } else { f64::from(fps) };
        Division::Smpte(fps * f64::from(tpf))
    } else if raw_division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per quarter note"));
    } else {
        Division::TicksPerQuarter(raw_division)
    };

    let mut pos = 8 + header_len;
    let mut raw_tracks = Vec::new();
    while pos < bytes.len() && raw_tracks.len() < usize::from(declared_tracks) {
        if bytes.len() - pos < 8 {
            return Err(MidiError::TruncatedChunk { offset: pos });
        }
        let kind = &bytes[pos..pos + 4];
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        if bytes.len() - body < len {
            return Err(MidiError::TruncatedChunk { offset: pos });
        }
        if kind == b"MTrk" {
            let mut cur = Cursor {
                bytes: &bytes[body..body + len],
                pos: 0,
                base: body,
            };
            raw_tracks.push(read_track(&mut cur)?);
        }
        pos = body + len;
    }

    let mut tempo_changes = BTreeMap::new();
    for track in &raw_tracks {
        for (tick, ev) in &track.events {
            if let RawEvent::Tempo(us) = ev {
                tempo_changes.insert(*tick, *us);
            }
        }
    }
    let tempo = TempoMap::new(division, &tempo_changes);
    debug_assert!(matches!(
        tempo.division,
        Division::TicksPerQuarter(_) | Division::Smpte(_)
    ));

    let mut out = Vec::new();
    for track in &raw_tracks {
        out.extend(notes_by_channel(track, &tempo));
    }
    Ok(out)
}

fn notes_by_channel(track: &RawTrack, tempo: &TempoMap) -> Vec<TrackScore> {
    let mut program = [0u8; 16];
    let mut open: BTreeMap<(u8, u8), VecDeque<(u64, u8)>> = BTreeMap::new();
    let mut notes: BTreeMap<u8, Vec<(u64, u64, u8, u8)>> = BTreeMap::new();
    let mut end_tick = track.end_tick;
    for (tick, ev) in &track.events {
        match *ev {
            RawEvent::NoteOn {
                channel,
                pitch,
                velocity,
            } if channel != PERCUSSION_CHANNEL => {
                open.entry((channel, pitch))
                    .or_default()
                    .push_back((*tick, velocity));
            }
            RawEvent::NoteOff { channel, pitch } => {
                if let Some((start, velocity)) =
                    open.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front)
                {
                    notes
                        .entry(channel)
                        .or_default()
                        .push((start, *tick, pitch, velocity));
                }
            }
            RawEvent::Program { channel, program: p } => program[usize::from(channel)] = p,
            RawEvent::EndOfTrack => end_tick = *tick,
            _ => {}
        }
    }
    for ((channel, pitch), pending) in open {
        for (start, velocity) in pending {
            notes
                .entry(channel)
                .or_default()
                .push((start, end_tick, pitch, velocity));
        }
    }

    notes
        .into_iter()
        .filter_map(|(channel, list)| {
            let source_program = program[usize::from(channel)];
            let family = general_midi_family(source_program).ok()?;
            let mut score = TrackScore {
                family,
                source_program,
                events: list
                    .into_iter()
                    .filter_map(|(on, off, pitch, velocity)| {
                        let onset_s = tempo.seconds(on);
                        let duration_s = tempo.seconds(off) - onset_s;
                        (duration_s > 0.0).then_some(NoteEvent {
                            pitch,
                            velocity,
                            onset_s,
                            duration_s,
                        })
                    })
                    .collect(),
            };
            score.sort_events();
            (!score.events.is_empty()).then_some(score)
        })
        .collect()
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 5];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { stack[i] | 0x80 } else { stack[i] });
    }
}

fn push_chunk(out: &mut Vec<u8>, kind: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(kind);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

/// Serialize tracks as a format-1 file at a constant tempo: a conductor
/// track followed by one track per score, each on its own channel
/// (skipping the percussion channel) with a leading program change.
pub fn write_midi(tracks: &[TrackScore], ticks_per_quarter: u16, tempo_us: u32) -> Vec<u8> {
    let seconds_per_tick = f64::from(tempo_us) * 1e-6 / f64::from(ticks_per_quarter);
    let to_tick = |s: f64| (s / seconds_per_tick).round() as u64;

    let mut out = Vec::new();
    let mut header = Vec::new();
    header.extend_from_slice(&1u16.to_be_bytes());
    header.extend_from_slice(&((tracks.len() + 1) as u16).to_be_bytes());
    header.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    push_chunk(&mut out, b"MThd", &header);

    let mut conductor = vec![0x00, 0xFF, 0x51, 0x03];
    conductor.extend_from_slice(&tempo_us.to_be_bytes()[1..]);
    conductor.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
    push_chunk(&mut out, b"MTrk", &conductor);

    let channels: Vec<u8> = (0u8..16).filter(|&c| c != PERCUSSION_CHANNEL).collect();
    for (i, track) in tracks.iter().enumerate() {
        let channel = channels[i % channels.len()];
        // (tick, order, bytes): note-offs sort before note-ons at equal ticks
        let mut events: Vec<(u64, u8, [u8; 3])> = Vec::new();
        for e in &track.events {
            let on = to_tick(e.onset_s);
            let off = to_tick(e.end_s()).max(on + 1);
            events.push((on, 1, [0x90 | channel, e.pitch, e.velocity.max(1)]));
            events.push((off, 0, [0x80 | channel, e.pitch, 0]));
        }
        events.sort_by_key(|&(tick, order, _)| (tick, order));

        let mut body = vec![0x00, 0xC0 | channel, track.source_program & 0x7f];
        let mut last = 0u64;
        for (tick, _, msg) in events {
            push_vlq(&mut body, (tick - last) as u32);
            body.extend_from_slice(&msg);
            last = tick;
        }
        body.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        push_chunk(&mut out, b"MTrk", &body);
    }
    out
}
