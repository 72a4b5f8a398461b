use super::wire::{self, Message};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};

/// An ordered, reliable channel of frames.
pub trait Transport {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;

    fn send(&mut self, msg: &Message) -> Result<()> {
        self.send_frame(wire::encode(msg))
    }

    fn recv(&mut self) -> Result<Message> {
        let frame = self.recv_frame()?;
        wire::decode(&frame)
    }
}

/// Frames over any byte stream (a `TcpStream` in two-process mode).
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        StreamTransport { stream }
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        wire::write_frame(&mut self.stream, &frame)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        wire::read_frame(&mut self.stream)
    }
}

/// One end of an in-process queue pair carrying encoded frames.
pub struct InProcTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn inproc_pair() -> (InProcTransport, InProcTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        InProcTransport { tx: a_tx, rx: a_rx },
        InProcTransport { tx: b_tx, rx: b_rx },
    )
}

impl Transport for InProcTransport {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.tx
            .send(frame)
            .map_err(|_| Error::Protocol("peer hung up".into()))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.rx
            .recv()
            .map_err(|_| Error::Protocol("peer hung up".into()))
    }
}

/// Wraps a transport and keeps a copy of every frame sent (`true`) or received (`false`).
pub struct Recorder<T> {
    inner: T,
    pub transcript: Vec<(bool, Vec<u8>)>,
}

impl<T: Transport> Recorder<T> {
    pub fn new(inner: T) -> Self {
        Recorder {
            inner,
            transcript: Vec::new(),
        }
    }
}

impl<T: Transport> Transport for Recorder<T> {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.transcript.push((true, frame.clone()));
        self.inner.send_frame(frame)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let f = self.inner.recv_frame()?;
        self.transcript.push((false, f.clone()));
        Ok(f)
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        (**self).send_frame(frame)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        (**self).recv_frame()
    }
}
