//! Perception-message framing, phase stamps and the broadcast relay.
//!
//! Frame layout, all little-endian:
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 4    | magic `CMM1`                            |
//! | 4      | 4    | `u32` payload length (bytes after this) |
//! | 8      | 8    | `f64` frame time                        |
//! | 16     | 32   | 4 × `f64` phase stamps (NaN = unset)    |
//! | 48     | 4    | `u32` record count                      |
//! | 52     | 52·n | records                                 |
//!
//! Each record is `f64 t, i32 id, f64 lat, f64 lon, f64 alt, f32 w, f32 l,
//! f32 h, f32 theta`.

pub mod relay;

use std::io::{self, Read};

use serde::{Deserialize, Serialize};

pub const FRAME_MAGIC: &[u8; 4] = b"CMM1";
pub const HEADER_LEN: usize = 52;
pub const RECORD_LEN: usize = 52;
/// Frames larger than this are rejected by stream readers.
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("message {index} violates an invariant: {reason}")]
    InvalidMessage { index: usize, reason: String },
    #[error("format error at byte {offset} ({field}): {message}")]
    Format {
        offset: usize,
        field: &'static str,
        message: String,
    },
    #[error("phase {0:?} already stamped")]
    DoubleStamp(Phase),
    #[error("invalid stamp for {phase:?}: {value}")]
    InvalidStamp { phase: Phase, value: f64 },
    #[error("relay: {0}")]
    Relay(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One object as transmitted to vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionMessage {
    pub t: f64,
    /// Track id, `-1` when unassigned.
    pub id: i32,
    pub lat: f64,
    pub lon: f64,
    /// Height above the ellipsoid, meters.
    pub alt: f64,
    pub w: f32,
    pub l: f32,
    pub h: f32,
    /// Compass heading, degrees clockwise from north.
    pub theta: f32,
}

impl PerceptionMessage {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t.is_finite() && self.alt.is_finite()) {
            return Err("non-finite t or alt".into());
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(format!("lat {} outside [-90, 90]", self.lat));
        }
        if !(self.lon > -180.0 && self.lon <= 180.0) {
            return Err(format!("lon {} outside (-180, 180]", self.lon));
        }
        if !(self.theta >= 0.0 && self.theta < 360.0) {
            return Err(format!("theta {} outside [0, 360)", self.theta));
        }
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(format!(
                "dims must be positive: {} {} {}",
                self.w, self.l, self.h
            ));
        }
        if !(self.w.is_finite() && self.l.is_finite() && self.h.is_finite()) {
            return Err("non-finite dims".into());
        }
        Ok(())
    }

    /// One JSON object, as written by the debug tap.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric struct serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sensor,
    EdgeIn,
    EdgeOut,
    Onboard,
}

/// Pipeline timestamps in seconds; `None` until stamped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseStamps {
    pub t_sensor: Option<f64>,
    pub t_edge_in: Option<f64>,
    pub t_edge_out: Option<f64>,
    pub t_onboard: Option<f64>,
}

impl PhaseStamps {
    pub fn get(&self, phase: Phase) -> Option<f64> {
        match phase {
            Phase::Sensor => self.t_sensor,
            Phase::EdgeIn => self.t_edge_in,
            Phase::EdgeOut => self.t_edge_out,
            Phase::Onboard => self.t_onboard,
        }
    }

    fn slot(&mut self, phase: Phase) -> &mut Option<f64> {
        match phase {
            Phase::Sensor => &mut self.t_sensor,
            Phase::EdgeIn => &mut self.t_edge_in,
            Phase::EdgeOut => &mut self.t_edge_out,
            Phase::Onboard => &mut self.t_onboard,
        }
    }

    fn to_array(self) -> [f64; 4] {
        [
            self.t_sensor,
            self.t_edge_in,
            self.t_edge_out,
            self.t_onboard,
        ]
        .map(|s| s.unwrap_or(f64::NAN))
    }

    fn from_array(a: [f64; 4]) -> Self {
        let f = |v: f64| if v.is_nan() { None } else { Some(v) };
        Self {
            t_sensor: f(a[0]),
            t_edge_in: f(a[1]),
            t_edge_out: f(a[2]),
            t_onboard: f(a[3]),
        }
    }
}

/// Sets one phase stamp; each phase may be stamped once.
pub fn stamp_phase(stamps: PhaseStamps, phase: Phase, now: f64) -> Result<PhaseStamps, WireError> {
    if !now.is_finite() {
        return Err(WireError::InvalidStamp { phase, value: now });
    }
    let mut out = stamps;
    let slot = out.slot(phase);
    if slot.is_some() {
        return Err(WireError::DoubleStamp(phase));
    }
    *slot = Some(now);
    Ok(out)
}

/// A decoded frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WireFrame {
    pub t_frame: f64,
    pub stamps: PhaseStamps,
    pub messages: Vec<PerceptionMessage>,
}

pub fn encoded_len(count: usize) -> usize {
    HEADER_LEN + RECORD_LEN * count
}

/// Serializes one frame. Refuses messages that break their invariants.
pub fn encode_frame(
    t_frame: f64,
    msgs: &[PerceptionMessage],
    stamps: &PhaseStamps,
) -> Result<Vec<u8>, WireError> {
    for (index, m) in msgs.iter().enumerate() {
        m.validate()
            .map_err(|reason| WireError::InvalidMessage { index, reason })?;
    }
    let len = encoded_len(msgs.len());
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&((len - 8) as u32).to_le_bytes());
    out.extend_from_slice(&t_frame.to_le_bytes());
    for s in stamps.to_array() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(msgs.len() as u32).to_le_bytes());
    for m in msgs {
        out.extend_from_slice(&m.t.to_le_bytes());
        out.extend_from_slice(&m.id.to_le_bytes());
        out.extend_from_slice(&m.lat.to_le_bytes());
        out.extend_from_slice(&m.lon.to_le_bytes());
        out.extend_from_slice(&m.alt.to_le_bytes());
        out.extend_from_slice(&m.w.to_le_bytes());
        out.extend_from_slice(&m.l.to_le_bytes());
        out.extend_from_slice(&m.h.to_le_bytes());
        out.extend_from_slice(&m.theta.to_le_bytes());
    }
    debug_assert_eq!(out.len(), len);
    Ok(out)
}

fn fmt_err(offset: usize, field: &'static str, message: impl Into<String>) -> WireError {
    WireError::Format {
        offset,
        field,
        message: message.into(),
    }
}

fn f64_at(b: &[u8], o: usize) -> f64 {
    f64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

/// Parses exactly one frame; the buffer must contain nothing else.
pub fn decode_frame(buf: &[u8]) -> Result<WireFrame, WireError> {
    if buf.len() < 4 || &buf[..4] != FRAME_MAGIC {
        return Err(fmt_err(0, "magic", "expected \"CMM1\""));
    }
    if buf.len() < 8 {
        return Err(fmt_err(4, "payload length", "truncated header"));
    }
    let payload = u32_at(buf, 4) as usize;
    if buf.len() - 8 < payload {
        return Err(fmt_err(
            buf.len(),
            "payload",
            format!(
                "truncated: length field says {payload} bytes, {} present",
                buf.len() - 8
            ),
        ));
    }
    if buf.len() - 8 > payload {
        return Err(fmt_err(
            8 + payload,
            "trailing",
            format!("{} bytes after the frame", buf.len() - 8 - payload),
        ));
    }
    if buf.len() < HEADER_LEN {
        return Err(fmt_err(
            4,
            "payload length",
            format!("{payload} is shorter than the header"),
        ));
    }
    let t_frame = f64_at(buf, 8);
    let stamps = PhaseStamps::from_array([
        f64_at(buf, 16),
        f64_at(buf, 24),
        f64_at(buf, 32),
        f64_at(buf, 40),
    ]);
    let count = u32_at(buf, 48) as usize;
    let expected = count
        .checked_mul(RECORD_LEN)
        .and_then(|r| r.checked_add(HEADER_LEN))
        .ok_or_else(|| fmt_err(48, "record count", "overflow"))?;
    if expected != buf.len() {
        return Err(fmt_err(
            48,
            "record count",
            format!(
                "{count} records need {expected} bytes, frame has {}",
                buf.len()
            ),
        ));
    }
    let messages = (0..count)
        .map(|k| {
            let o = HEADER_LEN + k * RECORD_LEN;
            PerceptionMessage {
                t: f64_at(buf, o),
                id: i32::from_le_bytes(buf[o + 8..o + 12].try_into().unwrap()),
                lat: f64_at(buf, o + 12),
                lon: f64_at(buf, o + 20),
                alt: f64_at(buf, o + 28),
                w: f32_at(buf, o + 36),
                l: f32_at(buf, o + 40),
                h: f32_at(buf, o + 44),
                theta: f32_at(buf, o + 48),
            }
        })
        .collect();
    Ok(WireFrame {
        t_frame,
        stamps,
        messages,
    })
}

/// Reads one whole frame from a byte stream. `Ok(None)` on a clean end of
/// stream at a frame boundary.
pub fn read_frame_bytes<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut head = [0u8; 8];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(fmt_err(got, "header", "stream ended inside a frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if &head[..4] != FRAME_MAGIC {
        return Err(fmt_err(0, "magic", "expected \"CMM1\""));
    }
    let payload = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    if payload + 8 > MAX_FRAME_LEN || payload + 8 < HEADER_LEN {
        return Err(fmt_err(
            4,
            "payload length",
            format!("implausible length {payload}"),
        ));
    }
    let mut frame = vec![0u8; 8 + payload];
    frame[..8].copy_from_slice(&head);
    r.read_exact(&mut frame[8..]).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            fmt_err(8, "payload", "stream ended inside a frame")
        } else {
            e.into()
        }
    })?;
    Ok(Some(frame))
}

/// Splits a buffer of back-to-back frames into per-frame slices.
pub fn split_frames(buf: &[u8]) -> Result<Vec<&[u8]>, WireError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        let rest = &buf[pos..];
        if rest.len() < 8 || &rest[..4] != FRAME_MAGIC {
            return Err(fmt_err(pos, "magic", "expected \"CMM1\""));
        }
        let len = 8 + u32_at(rest, 4) as usize;
        if rest.len() < len {
            return Err(fmt_err(pos, "payload", "truncated frame"));
        }
        out.push(&rest[..len]);
        pos += len;
    }
    Ok(out)
}
