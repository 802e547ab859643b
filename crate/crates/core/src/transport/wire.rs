//! `DPRT` framing shared by rank-to-rank links and the client protocol.
//!
//! ```text
//! offset 0  4 bytes  magic "DPRT"
//! offset 4  1 byte   message kind
//! offset 5  4 bytes  payload length, little-endian u32
//! offset 9  payload
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DPRT";
pub const HEADER_LEN: usize = 9;
/// Upper bound on a single payload; anything larger is treated as corruption.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgKind {
    RayBatch = 1,
    Tile = 2,
    Barrier = 3,
    Control = 4,
    Camera = 5,
    Frame = 6,
}

impl MsgKind {
    pub const ALL: [MsgKind; 6] = [
        MsgKind::RayBatch,
        MsgKind::Tile,
        MsgKind::Barrier,
        MsgKind::Control,
        MsgKind::Camera,
        MsgKind::Frame,
    ];

    pub fn from_u8(b: u8) -> Option<MsgKind> {
        MsgKind::ALL.get((b as usize).wrapping_sub(1)).copied()
    }

    pub(crate) fn slot(self) -> usize {
        self as usize - 1
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unknown message kind {kind} at offset {offset}")]
    UnknownKind { kind: u8, offset: usize },
    #[error("truncated frame at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("payload length {length} at offset {offset} exceeds limit")]
    TooLong { length: u32, offset: usize },
}

impl FrameError {
    pub fn offset(&self) -> usize {
        match *self {
            FrameError::BadMagic { offset }
            | FrameError::UnknownKind { offset, .. }
            | FrameError::Truncated { offset, .. }
            | FrameError::TooLong { offset, .. } => offset,
        }
    }
}

pub fn encode_frame(kind: MsgKind, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    write_header(&mut out, kind, payload.len());
    out.extend_from_slice(payload);
    out
}

fn write_header(out: &mut Vec<u8>, kind: MsgKind, len: usize) {
    out.extend_from_slice(&MAGIC);
    out.push(kind as u8);
    out.extend_from_slice(&(len as u32).to_le_bytes());
}

/// Validates the header at `base` (an absolute offset used only for error reporting).
pub fn decode_header(bytes: &[u8], base: usize) -> Result<(MsgKind, usize), FrameError> {
    for (i, &m) in MAGIC.iter().enumerate() {
        match bytes.get(i) {
            None => {
                return Err(FrameError::Truncated {
                    offset: base + bytes.len(),
                    needed: HEADER_LEN - bytes.len(),
                })
            }
            Some(&b) if b != m => return Err(FrameError::BadMagic { offset: base + i }),
            _ => {}
        }
    }
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            offset: base + bytes.len(),
            needed: HEADER_LEN - bytes.len(),
        });
    }
    let kind = MsgKind::from_u8(bytes[4]).ok_or(FrameError::UnknownKind {
        kind: bytes[4],
        offset: base + 4,
    })?;
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(FrameError::TooLong {
            length: len,
            offset: base + 5,
        });
    }
    Ok((kind, len as usize))
}

/// Splits one frame off the front of `bytes`: `(kind, payload, bytes consumed)`.
pub fn decode_frame(bytes: &[u8], base: usize) -> Result<(MsgKind, &[u8], usize), FrameError> {
    let (kind, len) = decode_header(bytes, base)?;
    let end = HEADER_LEN + len;
    if bytes.len() < end {
        return Err(FrameError::Truncated {
            offset: base + bytes.len(),
            needed: end - bytes.len(),
        });
    }
    Ok((kind, &bytes[HEADER_LEN..end], end))
}

pub fn write_frame<W: Write>(w: &mut W, kind: MsgKind, payload: &[u8]) -> io::Result<()> {
    let mut header = Vec::with_capacity(HEADER_LEN);
    write_header(&mut header, kind, payload.len());
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()
}

/// Blocking read of one frame. Clean EOF before the first byte yields `Ok(None)`.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<(MsgKind, Vec<u8>)>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "truncated frame header",
                ))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let (kind, len) = decode_header(&header, 0)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some((kind, payload)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = encode_frame(MsgKind::Tile, b"abc");
        assert_eq!(&f[..4], b"DPRT");
        assert_eq!(f[4], 2);
        assert_eq!(&f[5..9], &3u32.to_le_bytes());
        assert_eq!(&f[9..], b"abc");
        assert_eq!(
            decode_frame(&f, 0).unwrap(),
            (MsgKind::Tile, &b"abc"[..], 12)
        );
    }

    #[test]
    fn located_errors() {
        let mut f = encode_frame(MsgKind::Control, b"xy");
        f[0] = b'X';
        assert_eq!(decode_frame(&f, 0), Err(FrameError::BadMagic { offset: 0 }));
        let mut f = encode_frame(MsgKind::Control, b"xy");
        f[4] = 42;
        assert_eq!(
            decode_frame(&f, 100),
            Err(FrameError::UnknownKind {
                kind: 42,
                offset: 104
            })
        );
        let f = encode_frame(MsgKind::Control, b"xy");
        assert_eq!(
            decode_frame(&f[..10], 0),
            Err(FrameError::Truncated {
                offset: 10,
                needed: 1
            })
        );
        assert_eq!(
            decode_frame(&f[..3], 0),
            Err(FrameError::Truncated {
                offset: 3,
                needed: 6
            })
        );
    }

    #[test]
    fn stream_read_matches_encoding() {
        let mut bytes = encode_frame(MsgKind::RayBatch, &[1, 2, 3]);
        bytes.extend(encode_frame(MsgKind::Barrier, &[]));
        let mut cur = std::io::Cursor::new(bytes);
        assert_eq!(
            read_frame(&mut cur).unwrap(),
            Some((MsgKind::RayBatch, vec![1, 2, 3]))
        );
        assert_eq!(
            read_frame(&mut cur).unwrap(),
            Some((MsgKind::Barrier, vec![]))
        );
        assert_eq!(read_frame(&mut cur).unwrap(), None);
    }
}
