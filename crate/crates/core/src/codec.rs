//! Envelope wire format for frames and masks.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "E5SH"
//!      4     1  version (0x01)
//!      5     1  channel (1 = RGB, 2 = Depth, 3 = Mask)
//!      6     1  encoding (0 = Raw, 1 = RLE)
//!      7     8  frame_id, little-endian
//!     15     8  capture_ts, little-endian
//!     23     2  width, little-endian
//!     25     2  height, little-endian
//!     27     4  payload length, little-endian
//!     31     n  payload
//! ```
//!
//! Raw payloads are row-major: RGB 3 bytes/pixel, depth 2 bytes/pixel LE,
//! mask (class byte, confidence byte) per pixel. RLE payloads are runs of
//! `[len u16 LE][pixel value bytes]` that never cross a row boundary.

use thiserror::Error;

use crate::types::{CameraIntrinsics, ClassId, Frame, LabeledMask, Nanos, TypeError};

pub const MAGIC: [u8; 4] = *b"E5SH";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 31;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported {field} byte {value:#04x}")]
    Unsupported { field: &'static str, value: u8 },
    #[error("payload of {0} bytes does not fit the 32-bit length field")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Rgb = 1,
    Depth = 2,
    Mask = 3,
}

impl Channel {
    fn from_byte(b: u8) -> Result<Self, CodecError> {
        match b {
            1 => Ok(Channel::Rgb),
            2 => Ok(Channel::Depth),
            3 => Ok(Channel::Mask),
            value => Err(CodecError::Unsupported { field: "channel", value }),
        }
    }

    /// Bytes per pixel of the value carried by this channel.
    pub fn pixel_bytes(self) -> usize {
        match self {
            Channel::Rgb => 3,
            Channel::Depth => 2,
            Channel::Mask => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Encoding {
    #[default]
    Raw = 0,
    Rle = 1,
}

impl Encoding {
    fn from_byte(b: u8) -> Result<Self, CodecError> {
        match b {
            0 => Ok(Encoding::Raw),
            1 => Ok(Encoding::Rle),
            value => Err(CodecError::Unsupported { field: "encoding", value }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvelopeHeader {
    pub channel: Channel,
    pub encoding: Encoding,
    pub frame_id: u64,
    pub capture_ts: Nanos,
    pub width: u16,
    pub height: u16,
    pub payload_len: u32,
}

/// Decoded payload, RLE already expanded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Rgb(Vec<u8>),
    Depth(Vec<u16>),
    Mask(LabeledMask),
}

/// Encodes one channel of a frame.
pub fn encode_frame(frame: &Frame, channel: Channel, encoding: Encoding) -> Result<Vec<u8>, CodecError> {
    let (w, h) = (frame.width(), frame.height());
    let payload = match channel {
        Channel::Rgb => pixels_to_payload(&frame.rgb, 3, w, encoding),
        Channel::Depth => {
            let bytes: Vec<u8> = frame.depth.iter().flat_map(|d| d.to_le_bytes()).collect();
            pixels_to_payload(&bytes, 2, w, encoding)
        }
        Channel::Mask => {
            return Err(CodecError::Format("frames carry no mask channel".into()));
        }
    };
    envelope(channel, encoding, frame.frame_id, frame.capture_ts, w, h, payload)
}

/// Encodes a mask (channel 3).
pub fn encode_mask(
    mask: &LabeledMask,
    frame_id: u64,
    capture_ts: Nanos,
    encoding: Encoding,
) -> Result<Vec<u8>, CodecError> {
    let bytes: Vec<u8> = mask
        .classes
        .iter()
        .zip(&mask.confidence)
        .flat_map(|(c, q)| [*c as u8, *q])
        .collect();
    let payload = pixels_to_payload(&bytes, 2, mask.width, encoding);
    envelope(Channel::Mask, encoding, frame_id, capture_ts, mask.width, mask.height, payload)
}

fn envelope(
    channel: Channel,
    encoding: Encoding,
    frame_id: u64,
    capture_ts: Nanos,
    width: u16,
    height: u16,
    payload: Vec<u8>,
) -> Result<Vec<u8>, CodecError> {
    let len = u32::try_from(payload.len()).map_err(|_| CodecError::PayloadTooLarge(payload.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(channel as u8);
    out.push(encoding as u8);
    out.extend_from_slice(&frame_id.to_le_bytes());
    out.extend_from_slice(&capture_ts.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Packs fixed-size pixel values, run-length encoding rows on request.
fn pixels_to_payload(bytes: &[u8], px: usize, width: u16, encoding: Encoding) -> Vec<u8> {
    match encoding {
        Encoding::Raw => bytes.to_vec(),
        Encoding::Rle => {
            let row_bytes = width as usize * px;
            let mut out = Vec::new();
            if row_bytes == 0 {
                return out;
            }
            for row in bytes.chunks(row_bytes) {
                let mut pixels = row.chunks(px);
                let Some(mut current) = pixels.next() else { continue };
                let mut run: u16 = 1;
                for p in pixels {
                    if p == current {
                        run += 1;
                    } else {
                        out.extend_from_slice(&run.to_le_bytes());
                        out.extend_from_slice(current);
                        current = p;
                        run = 1;
                    }
                }
                out.extend_from_slice(&run.to_le_bytes());
                out.extend_from_slice(current);
            }
            out
        }
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<EnvelopeHeader, CodecError> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated { needed: HEADER_LEN, available: bytes.len() });
    }
    if bytes[4] != VERSION {
        return Err(CodecError::Unsupported { field: "version", value: bytes[4] });
    }
    let channel = Channel::from_byte(bytes[5])?;
    let encoding = Encoding::from_byte(bytes[6])?;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    Ok(EnvelopeHeader {
        channel,
        encoding,
        frame_id: u64_at(7),
        capture_ts: u64_at(15),
        width: u16_at(23),
        height: u16_at(25),
        payload_len: u32::from_le_bytes(bytes[27..31].try_into().unwrap()),
    })
}

/// Decodes an envelope and expands its payload.
pub fn decode_frame(bytes: &[u8]) -> Result<(EnvelopeHeader, Payload), CodecError> {
    let header = decode_header(bytes)?;
    let needed = HEADER_LEN + header.payload_len as usize;
    if bytes.len() < needed {
        return Err(CodecError::Truncated { needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(CodecError::Format(format!("{} trailing bytes after payload", bytes.len() - needed)));
    }
    let body = &bytes[HEADER_LEN..];
    let px = header.channel.pixel_bytes();
    let n = header.width as usize * header.height as usize;
    let raw = match header.encoding {
        Encoding::Raw => {
            if body.len() != n * px {
                return Err(CodecError::Format(format!(
                    "raw payload is {} bytes, {}x{} needs {}",
                    body.len(),
                    header.width,
                    header.height,
                    n * px
                )));
            }
            body.to_vec()
        }
        Encoding::Rle => expand_rle(body, px, header.width, header.height)?,
    };
    let payload = match header.channel {
        Channel::Rgb => Payload::Rgb(raw),
        Channel::Depth => Payload::Depth(raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect()),
        Channel::Mask => {
            let mut classes = Vec::with_capacity(n);
            let mut confidence = Vec::with_capacity(n);
            for b in raw.chunks_exact(2) {
                classes.push(ClassId::from_byte(b[0]).map_err(|e: TypeError| CodecError::Format(e.to_string()))?);
                confidence.push(b[1]);
            }
            Payload::Mask(LabeledMask { width: header.width, height: header.height, classes, confidence })
        }
    };
    Ok((header, payload))
}

fn expand_rle(body: &[u8], px: usize, width: u16, height: u16) -> Result<Vec<u8>, CodecError> {
    let width = width as usize;
    let mut out = Vec::with_capacity(width * height as usize * px);
    let mut pos = 0;
    let mut col = 0;
    let mut rows = 0;
    while pos < body.len() {
        if pos + 2 + px > body.len() {
            return Err(CodecError::Truncated { needed: HEADER_LEN + pos + 2 + px, available: HEADER_LEN + body.len() });
        }
        let run = u16::from_le_bytes([body[pos], body[pos + 1]]) as usize;
        let value = &body[pos + 2..pos + 2 + px];
        pos += 2 + px;
        if run == 0 || col + run > width {
            return Err(CodecError::Format(format!("run of {run} pixels at column {col} crosses a row of width {width}")));
        }
        for _ in 0..run {
            out.extend_from_slice(value);
        }
        col += run;
        if col == width {
            col = 0;
            rows += 1;
        }
    }
    if col != 0 || rows != height as usize {
        return Err(CodecError::Format(format!("RLE payload covers {rows} full rows, expected {height}")));
    }
    Ok(out)
}

/// Reassembles a frame from its RGB and depth envelopes.
pub fn frame_from_envelopes(rgb: &[u8], depth: &[u8], intrinsics: CameraIntrinsics) -> Result<Frame, CodecError> {
    let (h_rgb, p_rgb) = decode_frame(rgb)?;
    let (h_depth, p_depth) = decode_frame(depth)?;
    let (Payload::Rgb(rgb), Payload::Depth(depth)) = (p_rgb, p_depth) else {
        return Err(CodecError::Format("expected an RGB and a depth envelope".into()));
    };
    if h_rgb.frame_id != h_depth.frame_id || (h_rgb.width, h_rgb.height) != (h_depth.width, h_depth.height) {
        return Err(CodecError::Format("RGB and depth envelopes describe different frames".into()));
    }
    Frame::new(h_rgb.frame_id, h_rgb.capture_ts, rgb, depth, intrinsics).map_err(|e| CodecError::Format(e.to_string()))
}

pub fn decode_mask(bytes: &[u8]) -> Result<(EnvelopeHeader, LabeledMask), CodecError> {
    match decode_frame(bytes)? {
        (h, Payload::Mask(m)) => Ok((h, m)),
        (h, _) => Err(CodecError::Format(format!("expected a mask envelope, got {:?}", h.channel))),
    }
}
