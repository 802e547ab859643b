//! Thin-client messages carried in `DPRT` frames.
//!
//! A camera update is a UTF-8 JSON object, a frame is a 17-byte little-endian header
//! followed by raw RGB8 rows, and control messages are small JSON objects tagged by
//! `"type"`. Every decode error names the absolute byte offset where decoding failed.

use dprt_core::geom::{CameraSpec, Vec3};
use dprt_core::transport::wire::{self, FrameError, HEADER_LEN};
use dprt_core::transport::MsgKind;
use serde_json::{json, Map, Value};
use thiserror::Error;

pub const MIN_DIM: u32 = 16;
pub const MAX_DIM: u32 = 8192;
pub const FRAME_HEADER_LEN: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraUpdate {
    pub position: Vec3,
    pub view_dir: Vec3,
    pub up: Vec3,
    /// Degrees.
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraUpdate {
    pub fn camera(&self) -> CameraSpec {
        CameraSpec {
            position: self.position,
            view_dir: self.view_dir,
            up: self.up,
            fov_y: self.fov_y,
            aspect: self.width as f64 / self.height as f64,
        }
    }

    pub fn from_camera(cam: &CameraSpec, width: u32, height: u32) -> CameraUpdate {
        CameraUpdate {
            position: cam.position,
            view_dir: cam.view_dir,
            up: cam.up,
            fov_y: cam.fov_y,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, d) in [("w", self.width), ("h", self.height)] {
            if !(MIN_DIM..=MAX_DIM).contains(&d) {
                return Err(format!("{name}={d} outside [{MIN_DIM}, {MAX_DIM}]"));
            }
        }
        self.camera().validate().map_err(|e| e.to_string())
    }

    fn to_json(&self) -> Value {
        json!({
            "pos": self.position.to_array(),
            "dir": self.view_dir.to_array(),
            "up": self.up.to_array(),
            "fovy": self.fov_y,
            "w": self.width,
            "h": self.height,
        })
    }

    fn from_json(v: &Value) -> Result<CameraUpdate, String> {
        let obj = v.as_object().ok_or("camera update must be a JSON object")?;
        let vec3 = |key: &str| -> Result<Vec3, String> {
            let arr = field(obj, key)?
                .as_array()
                .filter(|a| a.len() == 3)
                .ok_or_else(|| format!("\"{key}\" must be an array of 3 numbers"))?;
            let mut out = [0.0; 3];
            for (o, x) in out.iter_mut().zip(arr) {
                *o = x
                    .as_f64()
                    .ok_or_else(|| format!("\"{key}\" must be an array of 3 numbers"))?;
            }
            Ok(Vec3::from_array(out))
        };
        let dim = |key: &str| -> Result<u32, String> {
            field(obj, key)?
                .as_u64()
                .and_then(|d| u32::try_from(d).ok())
                .ok_or_else(|| format!("\"{key}\" must be a non-negative integer"))
        };
        let update = CameraUpdate {
            position: vec3("pos")?,
            view_dir: vec3("dir")?,
            up: vec3("up")?,
            fov_y: field(obj, "fovy")?
                .as_f64()
                .ok_or("\"fovy\" must be a number")?,
            width: dim("w")?,
            height: dim("h")?,
        };
        update.validate()?;
        Ok(update)
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, String> {
    obj.get(key).ok_or_else(|| format!("missing \"{key}\""))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PixelFormat {
    Rgb8 = 0,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMessage {
    pub width: u32,
    pub height: u32,
    pub format: PixelFormat,
    pub sequence: u32,
    pub render_millis: u32,
    /// `width * height * 3` bytes, row-major, top row first.
    pub pixels: Vec<u8>,
}

impl FrameMessage {
    fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.pixels.len());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.format as u8);
        out.extend_from_slice(&self.sequence.to_le_bytes());
        out.extend_from_slice(&self.render_millis.to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    fn decode_payload(p: &[u8], base: usize) -> Result<FrameMessage, ProtocolError> {
        if p.len() < FRAME_HEADER_LEN {
            return Err(ProtocolError::Payload {
                offset: base + p.len(),
                reason: format!(
                    "frame header needs {FRAME_HEADER_LEN} bytes, payload has {}",
                    p.len()
                ),
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().expect("4 bytes"));
        let (width, height) = (u32_at(0), u32_at(4));
        if p[8] != PixelFormat::Rgb8 as u8 {
            return Err(ProtocolError::Payload {
                offset: base + 8,
                reason: format!("unknown pixel format {}", p[8]),
            });
        }
        let want = width as u64 * height as u64 * 3;
        let got = (p.len() - FRAME_HEADER_LEN) as u64;
        if got != want {
            return Err(ProtocolError::Payload {
                offset: base + FRAME_HEADER_LEN,
                reason: format!("{width}x{height} RGB8 needs {want} pixel bytes, found {got}"),
            });
        }
        Ok(FrameMessage {
            width,
            height,
            format: PixelFormat::Rgb8,
            sequence: u32_at(9),
            render_millis: u32_at(13),
            pixels: p[FRAME_HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlMessage {
    /// Sent by the server when a session starts.
    Hello {
        ranks: u32,
        diagonal: f64,
        center: Vec3,
    },
    /// Another session is active; the connection will be closed.
    Busy,
    Error {
        message: String,
    },
    Bye,
}

impl ControlMessage {
    fn to_json(&self) -> Value {
        match self {
            ControlMessage::Hello {
                ranks,
                diagonal,
                center,
            } => json!({
                "type": "hello",
                "ranks": ranks,
                "diagonal": diagonal,
                "center": center.to_array(),
            }),
            ControlMessage::Busy => json!({ "type": "busy" }),
            ControlMessage::Error { message } => json!({ "type": "error", "message": message }),
            ControlMessage::Bye => json!({ "type": "bye" }),
        }
    }

    fn from_json(v: &Value) -> Result<ControlMessage, String> {
        let obj = v
            .as_object()
            .ok_or("control message must be a JSON object")?;
        let ty = field(obj, "type")?
            .as_str()
            .ok_or("\"type\" must be a string")?;
        Ok(match ty {
            "hello" => {
                let c = field(obj, "center")?
                    .as_array()
                    .filter(|a| a.len() == 3 && a.iter().all(Value::is_number))
                    .ok_or("\"center\" must be an array of 3 numbers")?;
                ControlMessage::Hello {
                    ranks: field(obj, "ranks")?
                        .as_u64()
                        .and_then(|r| u32::try_from(r).ok())
                        .ok_or("\"ranks\" must be a non-negative integer")?,
                    diagonal: field(obj, "diagonal")?
                        .as_f64()
                        .ok_or("\"diagonal\" must be a number")?,
                    center: Vec3::new(
                        c[0].as_f64().unwrap_or_default(),
                        c[1].as_f64().unwrap_or_default(),
                        c[2].as_f64().unwrap_or_default(),
                    ),
                }
            }
            "busy" => ControlMessage::Busy,
            "error" => ControlMessage::Error {
                message: field(obj, "message")?
                    .as_str()
                    .ok_or("\"message\" must be a string")?
                    .to_owned(),
            },
            "bye" => ControlMessage::Bye,
            other => return Err(format!("unknown control type \"{other}\"")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Camera(CameraUpdate),
    Frame(FrameMessage),
    Control(ControlMessage),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("{kind:?} frame is not a client message (offset {offset})")]
    UnexpectedKind { kind: MsgKind, offset: usize },
    #[error("bad payload at offset {offset}: {reason}")]
    Payload { offset: usize, reason: String },
}

impl ProtocolError {
    pub fn offset(&self) -> usize {
        match self {
            ProtocolError::Frame(f) => f.offset(),
            ProtocolError::UnexpectedKind { offset, .. }
            | ProtocolError::Payload { offset, .. } => *offset,
        }
    }

    /// True when more bytes could complete the frame.
    pub fn is_incomplete(&self) -> bool {
        matches!(self, ProtocolError::Frame(FrameError::Truncated { .. }))
    }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    match msg {
        Message::Camera(c) => {
            wire::encode_frame(MsgKind::Camera, c.to_json().to_string().as_bytes())
        }
        Message::Frame(f) => wire::encode_frame(MsgKind::Frame, &f.encode_payload()),
        Message::Control(c) => {
            wire::encode_frame(MsgKind::Control, c.to_json().to_string().as_bytes())
        }
    }
}

/// Decodes the message at the front of `bytes`, returning it with the number of bytes used.
pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize), ProtocolError> {
    decode_message_at(bytes, 0)
}

/// As [`decode_message`], with `base` added to every reported offset.
pub fn decode_message_at(bytes: &[u8], base: usize) -> Result<(Message, usize), ProtocolError> {
    let (kind, payload, used) = wire::decode_frame(bytes, base)?;
    let pbase = base + HEADER_LEN;
    let json = |p: &[u8]| -> Result<Value, ProtocolError> {
        serde_json::from_slice(p).map_err(|e| ProtocolError::Payload {
            offset: pbase,
            reason: format!("invalid JSON: {e}"),
        })
    };
    let located = |reason: String| ProtocolError::Payload {
        offset: pbase,
        reason,
    };
    let msg = match kind {
        MsgKind::Camera => {
            Message::Camera(CameraUpdate::from_json(&json(payload)?).map_err(located)?)
        }
        MsgKind::Frame => Message::Frame(FrameMessage::decode_payload(payload, pbase)?),
        MsgKind::Control => {
            Message::Control(ControlMessage::from_json(&json(payload)?).map_err(located)?)
        }
        other => {
            return Err(ProtocolError::UnexpectedKind {
                kind: other,
                offset: base + 4,
            })
        }
    };
    Ok((msg, used))
}

/// Decodes a complete byte stream. Trailing partial frames are an error.
pub fn decode_stream(bytes: &[u8]) -> Result<Vec<Message>, ProtocolError> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (msg, used) = decode_message_at(&bytes[at..], at)?;
        out.push(msg);
        at += used;
    }
    Ok(out)
}

/// Incremental decoder for bytes arriving in arbitrary chunks.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    consumed: usize,
}

impl StreamDecoder {
    pub fn new() -> Self {
        StreamDecoder::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        match decode_message_at(&self.buf, self.consumed) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                self.consumed += used;
                Ok(Some(msg))
            }
            Err(e) if e.is_incomplete() => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Bytes held back waiting for the rest of a frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}
