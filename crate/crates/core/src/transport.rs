//! Framed message streams with optional wire capture.

use std::sync::{Arc, Mutex};

use tokio::io::{AsyncRead, AsyncWrite};

use crate::protocol::{decode_frame, read_message, write_message, FrameError, Message};

pub trait Stream: AsyncRead + AsyncWrite + Unpin + Send + 'static {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send + 'static> Stream for T {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone)]
pub struct TapRecord {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

/// Records every frame that crosses a connection, byte for byte.
#[derive(Debug, Clone, Default)]
pub struct WireTap(Arc<Mutex<Vec<TapRecord>>>);

impl WireTap {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, direction: Direction, bytes: Vec<u8>) {
        self.0
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(TapRecord { direction, bytes });
    }

    pub fn records(&self) -> Vec<TapRecord> {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn messages(&self) -> Vec<(Direction, Message)> {
        self.records()
            .into_iter()
            .filter_map(|r| decode_frame(&r.bytes).ok().map(|m| (r.direction, m)))
            .collect()
    }

    /// True if any captured frame contains `needle` as a byte substring.
    pub fn contains(&self, needle: &[u8]) -> bool {
        self.records()
            .iter()
            .any(|r| r.bytes.windows(needle.len()).any(|w| w == needle))
    }
}

pub struct Framed<S> {
    stream: S,
    tap: Option<WireTap>,
}

impl<S: Stream> Framed<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, tap: None }
    }

    pub fn with_tap(stream: S, tap: Option<WireTap>) -> Self {
        Self { stream, tap }
    }

    pub async fn send(&mut self, msg: &Message) -> Result<(), FrameError> {
        let bytes = write_message(&mut self.stream, msg).await?;
        if let Some(tap) = &self.tap {
            tap.push(Direction::Sent, bytes);
        }
        Ok(())
    }

    pub async fn recv(&mut self) -> Result<Message, FrameError> {
        let (msg, bytes) = read_message(&mut self.stream).await?;
        if let Some(tap) = &self.tap {
            tap.push(Direction::Received, bytes);
        }
        Ok(msg)
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }
}
