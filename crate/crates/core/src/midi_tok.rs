//! Note-event representation and the four-token-type MIDI vocabulary.
//!
//! Every note becomes exactly four tokens: absolute onset, absolute offset
//! (both on a 10 ms grid over a 5 s clip), pitch, and a 4-value velocity
//! bucket. Tokenization is bidirectional and lossless at the grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Duration of one quantization tick in seconds.
pub const TICK_SECONDS: f64 = 0.010;
/// Ticks in a full clip (500 ticks = 5 s).
pub const CLIP_TICKS: u16 = 500;
/// Number of MIDI pitches.
pub const PITCH_VALUES: u16 = 128;
/// Number of velocity buckets.
pub const VELOCITY_VALUES: u16 = 4;

#[derive(Debug, Error)]
pub enum MidiTokError {
    #[error("pitch {0} out of range 0..=127")]
    PitchOutOfRange(u8),
    #[error("non-positive duration: onset {onset_s}s >= offset {offset_s}s")]
    NonPositiveDuration { onset_s: f64, offset_s: f64 },
    #[error("onset {0}s outside the 5 s clip")]
    OnsetOutOfClip(f64),
    #[error("note quantizes to zero length at the clip boundary (tick {0})")]
    ZeroLengthAtBoundary(u16),
    #[error("tick {0} out of range 0..{CLIP_TICKS}")]
    TickOutOfRange(u16),
    #[error("onset tick {onset} >= offset tick {offset}")]
    OnsetNotBeforeOffset { onset: u16, offset: u16 },
    #[error("velocity bucket {0} out of range 0..{VELOCITY_VALUES}")]
    VelocityBucketOutOfRange(u8),
    #[error("duplicate note (onset {onset}, offset {offset}, pitch {pitch})")]
    DuplicateNote { onset: u16, offset: u16, pitch: u8 },
    #[error("token count {0} not divisible by 4 after stripping specials")]
    BadGroupCount(usize),
    #[error("token {id} at index {index}: expected {expected} token")]
    SpanOrder { index: usize, id: u32, expected: &'static str },
    #[error("token id {0} not in vocabulary of size {1}")]
    UnknownToken(u32, u32),
    #[error("unsupported SMF feature: {0}")]
    UnsupportedSmf(String),
    #[error("malformed MIDI file: {0}")]
    MalformedSmf(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A quantized note: onset/offset in 10 ms ticks, MIDI pitch, velocity bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_ticks: u16,
    pub offset_ticks: u16,
    pub pitch: u8,
    pub velocity_bucket: u8,
}

impl NoteEvent {
    pub fn new(
        onset_ticks: u16,
        offset_ticks: u16,
        pitch: u8,
        velocity_bucket: u8,
    ) -> Result<Self, MidiTokError> {
        if onset_ticks >= CLIP_TICKS {
            return Err(MidiTokError::TickOutOfRange(onset_ticks));
        }
        if offset_ticks >= CLIP_TICKS {
            return Err(MidiTokError::TickOutOfRange(offset_ticks));
        }
        if onset_ticks >= offset_ticks {
            return Err(MidiTokError::OnsetNotBeforeOffset {
                onset: onset_ticks,
                offset: offset_ticks,
            });
        }
        if pitch > 127 {
            return Err(MidiTokError::PitchOutOfRange(pitch));
        }
        if velocity_bucket >= VELOCITY_VALUES as u8 {
            return Err(MidiTokError::VelocityBucketOutOfRange(velocity_bucket));
        }
        Ok(Self { onset_ticks, offset_ticks, pitch, velocity_bucket })
    }

    /// Onset in seconds on the quantization grid.
    pub fn onset_seconds(&self) -> f64 {
        self.onset_ticks as f64 * TICK_SECONDS
    }

    pub fn offset_seconds(&self) -> f64 {
        self.offset_ticks as f64 * TICK_SECONDS
    }

    fn sort_key(&self) -> (u16, u8, u16, u8) {
        (self.onset_ticks, self.pitch, self.offset_ticks, self.velocity_bucket)
    }
}

/// Map a MIDI velocity (1..=127) to one of 4 uniform buckets.
///
/// 1-32 -> 0, 33-64 -> 1, 65-96 -> 2, 97-127 -> 3. Velocity 0 belongs to
/// note-off handling and maps to bucket 0 if it ever reaches here.
pub fn velocity_bucket(velocity_midi: u8) -> u8 {
    (velocity_midi.clamp(1, 127) - 1) / 32
}

/// Playback gain for each velocity bucket.
pub fn velocity_gain(bucket: u8) -> f32 {
    match bucket {
        0 => 0.25,
        1 => 0.5,
        2 => 0.75,
        _ => 1.0,
    }
}

/// An ordered, duplicate-free set of quantized notes over one clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteSequence {
    notes: Vec<NoteEvent>,
    pub clip_ticks: u16,
}

impl NoteSequence {
    /// Canonicalize: sort by (onset, pitch, offset) and reject exact
    /// (onset, offset, pitch) duplicates.
    pub fn new(mut notes: Vec<NoteEvent>) -> Result<Self, MidiTokError> {
        notes.sort_by_key(NoteEvent::sort_key);
        for pair in notes.windows(2) {
            if (pair[0].onset_ticks, pair[0].offset_ticks, pair[0].pitch)
                == (pair[1].onset_ticks, pair[1].offset_ticks, pair[1].pitch)
            {
                return Err(MidiTokError::DuplicateNote {
                    onset: pair[0].onset_ticks,
                    offset: pair[0].offset_ticks,
                    pitch: pair[0].pitch,
                });
            }
        }
        Ok(Self { notes, clip_ticks: CLIP_TICKS })
    }

    /// Like [`NoteSequence::new`] but drops exact duplicates, keeping the
    /// loudest. Used when ingesting external MIDI.
    pub fn new_dedup(mut notes: Vec<NoteEvent>) -> Self {
        notes.sort_by_key(NoteEvent::sort_key);
        // keep the last (loudest) of each duplicate run
        let mut out: Vec<NoteEvent> = Vec::with_capacity(notes.len());
        for n in notes {
            if let Some(last) = out.last_mut() {
                if (last.onset_ticks, last.offset_ticks, last.pitch)
                    == (n.onset_ticks, n.offset_ticks, n.pitch)
                {
                    *last = n;
                    continue;
                }
            }
            out.push(n);
        }
        Self { notes: out, clip_ticks: CLIP_TICKS }
    }

    pub fn empty() -> Self {
        Self { notes: Vec::new(), clip_ticks: CLIP_TICKS }
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Earliest onset tick, if any note exists.
    pub fn first_onset_ticks(&self) -> Option<u16> {
        self.notes.iter().map(|n| n.onset_ticks).min()
    }
}

/// Quantize a note given in seconds onto the 10 ms grid.
///
/// Ticks are `round(seconds / 0.010)` clamped to the clip; the offset is then
/// forced to at least one tick after the onset. A note that cannot fit a
/// single tick before the clip boundary is rejected.
pub fn quantize_note(
    onset_s: f64,
    offset_s: f64,
    pitch: u8,
    velocity_midi: u8,
) -> Result<NoteEvent, MidiTokError> {
    if pitch > 127 {
        return Err(MidiTokError::PitchOutOfRange(pitch));
    }
    if !(offset_s > onset_s) {
        return Err(MidiTokError::NonPositiveDuration { onset_s, offset_s });
    }
    if onset_s < 0.0 {
        return Err(MidiTokError::OnsetOutOfClip(onset_s));
    }
    let max_tick = CLIP_TICKS - 1;
    let to_tick = |s: f64| -> u16 { ((s / TICK_SECONDS).round() as i64).clamp(0, max_tick as i64) as u16 };
    let onset = to_tick(onset_s);
    let mut offset = to_tick(offset_s);
    if offset <= onset {
        // rounding collision: force the minimum 1-tick duration
        if onset >= max_tick {
            return Err(MidiTokError::ZeroLengthAtBoundary(onset));
        }
        offset = onset + 1;
    }
    NoteEvent::new(onset, offset, pitch, velocity_bucket(velocity_midi))
}

/// Id layout of the MIDI vocabulary: PAD at 0, then the four contiguous
/// spans (onset, offset, pitch, velocity), then BOS/EOS markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MidiVocab {
    pub onset_base: u32,
    pub onset_len: u32,
    pub offset_base: u32,
    pub offset_len: u32,
    pub pitch_base: u32,
    pub pitch_len: u32,
    pub velocity_base: u32,
    pub velocity_len: u32,
    pub pad: u32,
    pub bos_midi: u32,
    pub eos_midi: u32,
    pub bos_audio: u32,
    pub k_m: u32,
}

/// Which span a token id belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Onset(u16),
    Offset(u16),
    Pitch(u8),
    Velocity(u8),
    Pad,
    BosMidi,
    EosMidi,
    BosAudio,
}

impl MidiVocab {
    /// The standard layout: 500 onsets, 500 offsets, 128 pitches,
    /// 4 velocities, 4 specials; K_m = 1136.
    pub fn standard() -> Self {
        let onset_base = 1;
        let onset_len = CLIP_TICKS as u32;
        let offset_base = onset_base + onset_len;
        let offset_len = CLIP_TICKS as u32;
        let pitch_base = offset_base + offset_len;
        let pitch_len = PITCH_VALUES as u32;
        let velocity_base = pitch_base + pitch_len;
        let velocity_len = VELOCITY_VALUES as u32;
        let bos_midi = velocity_base + velocity_len;
        let eos_midi = bos_midi + 1;
        let bos_audio = eos_midi + 1;
        Self {
            onset_base,
            onset_len,
            offset_base,
            offset_len,
            pitch_base,
            pitch_len,
            velocity_base,
            velocity_len,
            pad: 0,
            bos_midi,
            eos_midi,
            bos_audio,
            k_m: bos_audio + 1,
        }
    }

    pub fn onset_id(&self, tick: u16) -> u32 {
        debug_assert!((tick as u32) < self.onset_len);
        self.onset_base + tick as u32
    }

    pub fn offset_id(&self, tick: u16) -> u32 {
        debug_assert!((tick as u32) < self.offset_len);
        self.offset_base + tick as u32
    }

    pub fn pitch_id(&self, pitch: u8) -> u32 {
        debug_assert!((pitch as u32) < self.pitch_len);
        self.pitch_base + pitch as u32
    }

    pub fn velocity_id(&self, bucket: u8) -> u32 {
        debug_assert!((bucket as u32) < self.velocity_len);
        self.velocity_base + bucket as u32
    }

    pub fn kind(&self, id: u32) -> Result<TokenKind, MidiTokError> {
        if id == self.pad {
            Ok(TokenKind::Pad)
        } else if id >= self.onset_base && id < self.onset_base + self.onset_len {
            Ok(TokenKind::Onset((id - self.onset_base) as u16))
        } else if id >= self.offset_base && id < self.offset_base + self.offset_len {
            Ok(TokenKind::Offset((id - self.offset_base) as u16))
        } else if id >= self.pitch_base && id < self.pitch_base + self.pitch_len {
            Ok(TokenKind::Pitch((id - self.pitch_base) as u8))
        } else if id >= self.velocity_base && id < self.velocity_base + self.velocity_len {
            Ok(TokenKind::Velocity((id - self.velocity_base) as u8))
        } else if id == self.bos_midi {
            Ok(TokenKind::BosMidi)
        } else if id == self.eos_midi {
            Ok(TokenKind::EosMidi)
        } else if id == self.bos_audio {
            Ok(TokenKind::BosAudio)
        } else {
            Err(MidiTokError::UnknownToken(id, self.k_m))
        }
    }

    fn is_special(&self, id: u32) -> bool {
        id == self.pad || id == self.bos_midi || id == self.eos_midi || id == self.bos_audio
    }
}

impl Default for MidiVocab {
    fn default() -> Self {
        Self::standard()
    }
}

/// A flat token sequence over a [`MidiVocab`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MidiTokenSeq {
    pub tokens: Vec<u32>,
}

impl MidiTokenSeq {
    pub fn new(tokens: Vec<u32>, vocab: &MidiVocab) -> Result<Self, MidiTokError> {
        for &t in &tokens {
            vocab.kind(t)?;
        }
        Ok(Self { tokens })
    }

    /// Sequence length M.
    pub fn m(&self) -> usize {
        self.tokens.len()
    }
}

/// Emit `[onset, offset, pitch, velocity]` ids per note, in canonical note
/// order. No BOS/EOS markers are inserted here.
pub fn tokenize(seq: &NoteSequence, vocab: &MidiVocab) -> MidiTokenSeq {
    let mut tokens = Vec::with_capacity(seq.len() * 4);
    for n in seq.notes() {
        tokens.push(vocab.onset_id(n.onset_ticks));
        tokens.push(vocab.offset_id(n.offset_ticks));
        tokens.push(vocab.pitch_id(n.pitch));
        tokens.push(vocab.velocity_id(n.velocity_bucket));
    }
    MidiTokenSeq { tokens }
}

/// Inverse of [`tokenize`]. Specials are stripped first; the remaining ids
/// must form `[onset, offset, pitch, velocity]` groups.
pub fn detokenize(tokens: &MidiTokenSeq, vocab: &MidiVocab) -> Result<NoteSequence, MidiTokError> {
    let body: Vec<(usize, u32)> = tokens
        .tokens
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, id)| !vocab.is_special(*id))
        .collect();
    if body.len() % 4 != 0 {
        return Err(MidiTokError::BadGroupCount(body.len()));
    }
    let mut notes = Vec::with_capacity(body.len() / 4);
    for group in body.chunks_exact(4) {
        let onset = match vocab.kind(group[0].1)? {
            TokenKind::Onset(t) => t,
            _ => {
                return Err(MidiTokError::SpanOrder {
                    index: group[0].0,
                    id: group[0].1,
                    expected: "onset",
                })
            }
        };
        let offset = match vocab.kind(group[1].1)? {
            TokenKind::Offset(t) => t,
            _ => {
                return Err(MidiTokError::SpanOrder {
                    index: group[1].0,
                    id: group[1].1,
                    expected: "offset",
                })
            }
        };
        let pitch = match vocab.kind(group[2].1)? {
            TokenKind::Pitch(p) => p,
            _ => {
                return Err(MidiTokError::SpanOrder {
                    index: group[2].0,
                    id: group[2].1,
                    expected: "pitch",
                })
            }
        };
        let velocity = match vocab.kind(group[3].1)? {
            TokenKind::Velocity(v) => v,
            _ => {
                return Err(MidiTokError::SpanOrder {
                    index: group[3].0,
                    id: group[3].1,
                    expected: "velocity",
                })
            }
        };
        notes.push(NoteEvent::new(onset, offset, pitch, velocity)?);
    }
    NoteSequence::new(notes)
}

/// Lenient variant for model output: malformed or invalid 4-token groups are
/// dropped instead of failing. Returns the sequence plus the dropped count.
pub fn detokenize_lossy(tokens: &[u32], vocab: &MidiVocab) -> (NoteSequence, usize) {
    let body: Vec<u32> = tokens
        .iter()
        .copied()
        .filter(|id| !vocab.is_special(*id))
        .collect();
    let mut notes = Vec::new();
    let mut dropped = 0;
    for group in body.chunks(4) {
        if group.len() < 4 {
            dropped += 1;
            continue;
        }
        let parsed = (
            vocab.kind(group[0]),
            vocab.kind(group[1]),
            vocab.kind(group[2]),
            vocab.kind(group[3]),
        );
        match parsed {
            (
                Ok(TokenKind::Onset(on)),
                Ok(TokenKind::Offset(off)),
                Ok(TokenKind::Pitch(p)),
                Ok(TokenKind::Velocity(v)),
            ) => match NoteEvent::new(on, off, p, v) {
                Ok(n) => notes.push(n),
                Err(_) => dropped += 1,
            },
            _ => dropped += 1,
        }
    }
    (NoteSequence::new_dedup(notes), dropped)
}

// --- Standard MIDI File I/O ------------------------------------------------

/// Read an SMF type-0/1 file into a quantized [`NoteSequence`].
///
/// The tempo map is honored when converting ticks to seconds; a note-on with
/// velocity 0 is a note-off. Notes that cannot be represented on the 5 s grid
/// are reported as errors rather than silently dropped.
pub fn read_midi_file(path: &std::path::Path) -> Result<NoteSequence, MidiTokError> {
    let bytes = std::fs::read(path).map_err(|source| MidiTokError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_midi_bytes(&bytes)
}

pub fn read_midi_bytes(bytes: &[u8]) -> Result<NoteSequence, MidiTokError> {
    let smf = midly::Smf::parse(bytes).map_err(|e| MidiTokError::MalformedSmf(e.to_string()))?;
    let ppq = match smf.header.timing {
        midly::Timing::Metrical(t) => t.as_int() as f64,
        midly::Timing::Timecode(..) => {
            return Err(MidiTokError::UnsupportedSmf("SMPTE timecode timing".into()))
        }
    };

    // merge all tracks into one absolute-tick event list
    #[derive(Clone, Copy)]
    enum Ev {
        Tempo(u32),
        On { pitch: u8, vel: u8 },
        Off { pitch: u8 },
    }
    let mut events: Vec<(u64, usize, Ev)> = Vec::new();
    for track in &smf.tracks {
        let mut tick = 0u64;
        for ev in track {
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                midly::TrackEventKind::Meta(midly::MetaMessage::Tempo(us)) => {
                    events.push((tick, events.len(), Ev::Tempo(us.as_int())));
                }
                midly::TrackEventKind::Midi { message, .. } => match message {
                    midly::MidiMessage::NoteOn { key, vel } => {
                        if vel.as_int() == 0 {
                            events.push((tick, events.len(), Ev::Off { pitch: key.as_int() }));
                        } else {
                            events.push((
                                tick,
                                events.len(),
                                Ev::On { pitch: key.as_int(), vel: vel.as_int() },
                            ));
                        }
                    }
                    midly::MidiMessage::NoteOff { key, .. } => {
                        events.push((tick, events.len(), Ev::Off { pitch: key.as_int() }));
                    }
                    _ => {}
                },
                _ => {}
            }
        }
    }
    events.sort_by_key(|(tick, ord, _)| (*tick, *ord));

    // integrate the tempo map (default 120 BPM) to get seconds per event
    let mut tempo_us_per_qn = 500_000f64;
    let mut last_tick = 0u64;
    let mut now_s = 0.0f64;
    let mut open: std::collections::HashMap<u8, Vec<(f64, u8)>> = std::collections::HashMap::new();
    let mut raw_notes: Vec<(f64, f64, u8, u8)> = Vec::new();
    for (tick, _, ev) in events {
        now_s += (tick - last_tick) as f64 * tempo_us_per_qn / (ppq * 1_000_000.0);
        last_tick = tick;
        match ev {
            Ev::Tempo(us) => tempo_us_per_qn = us as f64,
            Ev::On { pitch, vel } => open.entry(pitch).or_default().push((now_s, vel)),
            Ev::Off { pitch } => {
                if let Some(stack) = open.get_mut(&pitch) {
                    if let Some((onset_s, vel)) = stack.pop() {
                        raw_notes.push((onset_s, now_s, pitch, vel));
                    }
                }
            }
        }
    }
    // dangling note-ons are closed at the clip boundary
    for (pitch, stack) in open {
        for (onset_s, vel) in stack {
            raw_notes.push((onset_s, CLIP_TICKS as f64 * TICK_SECONDS, pitch, vel));
        }
    }

    let mut notes = Vec::with_capacity(raw_notes.len());
    for (onset_s, offset_s, pitch, vel) in raw_notes {
        notes.push(quantize_note(onset_s, offset_s, pitch, vel)?);
    }
    Ok(NoteSequence::new_dedup(notes))
}

/// Write a quantized [`NoteSequence`] as a type-0 SMF at 120 BPM with
/// 1 ms SMF ticks, so the 10 ms grid is exactly representable.
pub fn write_midi_file(seq: &NoteSequence, path: &std::path::Path) -> Result<(), MidiTokError> {
    let bytes = write_midi_bytes(seq);
    std::fs::write(path, bytes).map_err(|source| MidiTokError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_midi_bytes(seq: &NoteSequence) -> Vec<u8> {
    use midly::{
        num::{u15, u24, u28, u4, u7},
        Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind,
    };
    // PPQ 500 at 500000 us/qn -> 1 SMF tick = 1 ms
    let header = Header::new(Format::SingleTrack, Timing::Metrical(u15::new(500)));
    let mut smf = Smf::new(header);

    // (tick_ms, order, kind) with note-offs before note-ons at equal times
    let mut evs: Vec<(u32, u8, MidiMessage)> = Vec::new();
    for n in seq.notes() {
        let vel = match n.velocity_bucket {
            0 => 16,
            1 => 48,
            2 => 80,
            _ => 112,
        };
        evs.push((
            n.onset_ticks as u32 * 10,
            1,
            MidiMessage::NoteOn { key: u7::new(n.pitch), vel: u7::new(vel) },
        ));
        evs.push((
            n.offset_ticks as u32 * 10,
            0,
            MidiMessage::NoteOff { key: u7::new(n.pitch), vel: u7::new(0) },
        ));
    }
    evs.sort_by_key(|(t, ord, m)| {
        let key = match m {
            MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => key.as_int(),
            _ => 0,
        };
        (*t, *ord, key)
    });

    let mut track = Vec::new();
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(500_000))),
    });
    let mut last = 0u32;
    for (t, _, message) in evs {
        track.push(TrackEvent {
            delta: u28::new(t - last),
            kind: TrackEventKind::Midi { channel: u4::new(0), message },
        });
        last = t;
    }
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });
    smf.tracks.push(track);

    let mut out = Vec::new();
    smf.write(&mut out).expect("in-memory SMF write cannot fail");
    out
}
