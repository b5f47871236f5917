use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::{Message, MESSAGE_TYPES};

/// Largest JSON body a frame may carry (16 MiB).
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    FrameTooLarge(usize),
    #[error("incomplete frame: expected {expected} bytes, got {available}")]
    IncompleteFrame { expected: usize, available: usize },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown message type {0:?}")]
    UnknownMessage(String),
    #[error("invalid frame content: {0}")]
    InvalidContent(String),
    #[error("connection closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Encodes `msg` as a 4-byte big-endian length followed by the JSON body.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, FrameError> {
    let body = serde_json::to_vec(msg).map_err(|e| FrameError::MalformedFrame(e.to_string()))?;
    if body.len() > MAX_FRAME_LEN {
        return Err(FrameError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes one frame from the start of `bytes`. Trailing bytes are ignored.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::IncompleteFrame {
            expected: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(FrameError::FrameTooLarge(len));
    }
    let body = &bytes[4..];
    if body.len() < len {
        return Err(FrameError::IncompleteFrame {
            expected: len,
            available: body.len(),
        });
    }
    decode_body(&body[..len])
}

fn decode_body(body: &[u8]) -> Result<Message, FrameError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| FrameError::MalformedFrame(e.to_string()))?;
    let ty = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| FrameError::MalformedFrame("missing \"type\"".into()))?;
    if !MESSAGE_TYPES.contains(&ty) {
        return Err(FrameError::UnknownMessage(ty.to_string()));
    }
    if value.get("payload").is_none() {
        return Err(FrameError::MalformedFrame("missing \"payload\"".into()));
    }
    let msg: Message =
        serde_json::from_value(value).map_err(|e| FrameError::MalformedFrame(e.to_string()))?;
    msg.validate_content().map_err(FrameError::InvalidContent)?;
    Ok(msg)
}

/// Reads one frame. A clean EOF before the header yields [`FrameError::Closed`].
pub async fn read_message<R: AsyncRead + Unpin>(
    reader: &mut R,
) -> Result<(Message, Vec<u8>), FrameError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = reader.read(&mut header[filled..]).await?;
        if n == 0 {
            return Err(if filled == 0 {
                FrameError::Closed
            } else {
                FrameError::IncompleteFrame {
                    expected: 4,
                    available: filled,
                }
            });
        }
        filled += n;
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(FrameError::FrameTooLarge(len));
    }
    let mut frame = Vec::with_capacity(4 + len);
    frame.extend_from_slice(&header);
    frame.resize(4 + len, 0);
    let mut got = 0;
    while got < len {
        let n = reader.read(&mut frame[4 + got..]).await?;
        if n == 0 {
            return Err(FrameError::IncompleteFrame {
                expected: len,
                available: got,
            });
        }
        got += n;
    }
    let msg = decode_body(&frame[4..])?;
    Ok((msg, frame))
}

/// Writes one frame and flushes. Returns the exact bytes written.
pub async fn write_message<W: AsyncWrite + Unpin>(
    writer: &mut W,
    msg: &Message,
) -> Result<Vec<u8>, FrameError> {
    let frame = encode_frame(msg)?;
    writer.write_all(&frame).await?;
    writer.flush().await?;
    Ok(frame)
}
