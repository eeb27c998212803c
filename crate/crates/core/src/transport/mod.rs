//! Frame encoding, channel and TCP endpoints, and byte accounting.

mod frame;
mod ledger;

pub use frame::{decode_frame, frame_len, Frame, Message, MsgType, HEADER_LEN, MAGIC, VERSION};
pub use ledger::{ByteLedger, Direction, LedgerReport, BYTES_PER_MB};

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};

/// Ordered, reliable, frame-delimited byte transport.
pub trait Endpoint: Send {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()>;

    /// Blocks until a complete frame arrives or `timeout` elapses
    /// (`Ok(None)`).
    fn recv_bytes(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>>;

    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.send_bytes(&frame.encode())
    }

    fn recv(&mut self) -> Result<Frame> {
        let bytes = self
            .recv_bytes(None)?
            .ok_or_else(|| Error::Transport("endpoint closed".into()))?;
        Frame::decode(&bytes)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Frame>> {
        match self.recv_bytes(Some(timeout))? {
            Some(b) => Ok(Some(Frame::decode(&b)?)),
            None => Ok(None),
        }
    }
}

/// In-process endpoint backed by a pair of channels of encoded frames.
pub struct ChannelEndpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn channel_pair() -> (ChannelEndpoint, ChannelEndpoint) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (ChannelEndpoint { tx: a_tx, rx: a_rx }, ChannelEndpoint { tx: b_tx, rx: b_rx })
}

impl ChannelEndpoint {
    /// Next frame if one is already queued.
    pub fn try_recv_bytes(&mut self) -> Result<Option<Vec<u8>>> {
        match self.rx.try_recv() {
            Ok(b) => Ok(Some(b)),
            Err(mpsc::TryRecvError::Empty) => Ok(None),
            Err(mpsc::TryRecvError::Disconnected) => Err(Error::Transport("peer disconnected".into())),
        }
    }
}

impl Endpoint for ChannelEndpoint {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.tx
            .send(bytes.to_vec())
            .map_err(|_| Error::Transport("peer disconnected".into()))
    }

    fn recv_bytes(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        match timeout {
            None => self
                .rx
                .recv()
                .map(Some)
                .map_err(|_| Error::Transport("peer disconnected".into())),
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(b) => Ok(Some(b)),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Err(Error::Transport("peer disconnected".into())),
            },
        }
    }
}

/// Blocking TCP endpoint; frames are delimited by their header length.
pub struct TcpEndpoint {
    stream: TcpStream,
}

impl TcpEndpoint {
    pub fn new(stream: TcpStream) -> Result<TcpEndpoint> {
        stream.set_nodelay(true).map_err(tcp_err)?;
        Ok(TcpEndpoint { stream })
    }

    /// Connects to `addr`, retrying for up to `patience`.
    pub fn connect(addr: &str, patience: Duration) -> Result<TcpEndpoint> {
        let deadline = std::time::Instant::now() + patience;
        let addrs: Vec<_> = addr
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("{addr}: {e}")))?
            .collect();
        loop {
            for a in &addrs {
                if let Ok(s) = TcpStream::connect(a) {
                    return TcpEndpoint::new(s);
                }
            }
            if std::time::Instant::now() >= deadline {
                return Err(Error::Transport(format!("could not connect to {addr}")));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    fn read_exact_or_closed(&mut self, buf: &mut [u8]) -> Result<bool> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.stream.read(&mut buf[filled..]) {
                Ok(0) if filled == 0 => return Ok(false),
                Ok(0) => return Err(Error::Transport("connection closed mid-frame".into())),
                Ok(n) => filled += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(tcp_err(e)),
            }
        }
        Ok(true)
    }
}

fn tcp_err(e: std::io::Error) -> Error {
    Error::Transport(format!("tcp: {e}"))
}

impl Endpoint for TcpEndpoint {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes).map_err(tcp_err)?;
        self.stream.flush().map_err(tcp_err)
    }

    fn recv_bytes(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        self.stream.set_read_timeout(timeout).map_err(tcp_err)?;
        let mut header = vec![0u8; HEADER_LEN];
        let first = match self.stream.read(&mut header[..1]) {
            Ok(n) => n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(None),
            Err(e) => return Err(tcp_err(e)),
        };
        if first == 0 {
            return Err(Error::Transport("connection closed".into()));
        }
        self.stream.set_read_timeout(None).map_err(tcp_err)?;
        if !self.read_exact_or_closed(&mut header[1..])? {
            return Err(Error::Transport("connection closed mid-frame".into()));
        }
        let total = frame_len(&header)?;
        let mut bytes = header;
        bytes.resize(total, 0);
        if !self.read_exact_or_closed(&mut bytes[HEADER_LEN..])? && total > HEADER_LEN {
            return Err(Error::Transport("connection closed mid-frame".into()));
        }
        Ok(Some(bytes))
    }
}

pub fn tcp_listen(addr: &str) -> Result<TcpListener> {
    TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind {addr}: {e}")))
}

/// Every frame seen at a server-side endpoint, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Recorded {
    pub link: u32,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct FrameRecorder {
    inner: Arc<Mutex<Vec<Recorded>>>,
}

impl FrameRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, r: Recorded) {
        self.inner.lock().expect("recorder poisoned").push(r);
    }

    pub fn frames(&self) -> Vec<Recorded> {
        self.inner.lock().expect("recorder poisoned").clone()
    }
}

/// Server-side wrapper charging every frame to a [`ByteLedger`] under the
/// client id in its header (sent frames are downlink, received frames
/// uplink) and optionally recording it.
pub struct Tapped<E> {
    inner: E,
    link: u32,
    ledger: ByteLedger,
    recorder: Option<FrameRecorder>,
}

impl<E: Endpoint> Tapped<E> {
    pub fn new(inner: E, link: u32, ledger: ByteLedger, recorder: Option<FrameRecorder>) -> Self {
        Self { inner, link, ledger, recorder }
    }

    pub fn link(&self) -> u32 {
        self.link
    }

    pub fn set_link(&mut self, link: u32) {
        self.link = link;
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut E {
        &mut self.inner
    }

    /// Charges a frame that was read from the inner endpoint before it was
    /// wrapped.
    pub fn note_received(&self, bytes: &[u8]) -> Result<()> {
        frame_len(bytes)?;
        self.charge(Direction::Uplink, bytes);
        Ok(())
    }

    fn charge(&self, dir: Direction, bytes: &[u8]) {
        let (round, client, msg_type) = header_fields(bytes);
        self.ledger.record(client, dir, round, msg_type, bytes.len());
        if let Some(r) = &self.recorder {
            r.push(Recorded { link: self.link, direction: dir, bytes: bytes.to_vec() });
        }
    }
}

fn header_fields(bytes: &[u8]) -> (u32, u32, MsgType) {
    let round = u32::from_le_bytes(bytes[6..10].try_into().expect("header present"));
    let client = u32::from_le_bytes(bytes[10..14].try_into().expect("header present"));
    (round, client, MsgType::from_u8(bytes[5]).expect("validated frame"))
}

impl<E: Endpoint> Endpoint for Tapped<E> {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        frame_len(bytes)?;
        self.inner.send_bytes(bytes)?;
        self.charge(Direction::Downlink, bytes);
        Ok(())
    }

    fn recv_bytes(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        let got = self.inner.recv_bytes(timeout)?;
        if let Some(b) = &got {
            frame_len(b)?;
            self.charge(Direction::Uplink, b);
        }
        Ok(got)
    }
}

impl<E: Endpoint + ?Sized> Endpoint for Box<E> {
    fn send_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        (**self).send_bytes(bytes)
    }

    fn recv_bytes(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        (**self).recv_bytes(timeout)
    }
}

/// Splits a concatenated byte stream back into frames.
pub fn split_stream(mut bytes: &[u8]) -> Result<Vec<Frame>> {
    let mut out = Vec::new();
    let mut offset = 0;
    while !bytes.is_empty() {
        let (f, used) = decode_frame(bytes).map_err(|e| match e {
            Error::Decode { offset: o, msg } => Error::Decode { offset: offset + o, msg },
            other => other,
        })?;
        out.push(f);
        bytes = &bytes[used..];
        offset += used;
    }
    Ok(out)
}
