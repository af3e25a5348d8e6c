use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::{decode_frame, encode_frame, Endpoint, Frame, HEADER_LEN};
use crate::error::{Error, Result};

/// One direction of a link. Carries whole encoded frames in FIFO order.
pub trait Channel: Send {
    fn send(&mut self, frame_bytes: Vec<u8>) -> Result<()>;
    fn recv(&mut self) -> Result<Vec<u8>>;
}

#[derive(Default)]
pub struct MemoryChannel {
    queue: VecDeque<Vec<u8>>,
}

impl Channel for MemoryChannel {
    fn send(&mut self, frame_bytes: Vec<u8>) -> Result<()> {
        self.queue.push_back(frame_bytes);
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        self.queue
            .pop_front()
            .ok_or_else(|| Error::Protocol("receive on an empty channel".into()))
    }
}

/// Loopback TCP connection. A reader thread drains the socket into a queue
/// so the sending side never blocks on a full kernel buffer.
///
/// No transport security: channels are assumed to be protected by the
/// deployment, as in the threat model.
pub struct SocketChannel {
    writer: TcpStream,
    inbox: Receiver<Result<Vec<u8>>>,
    reader: Option<JoinHandle<()>>,
}

impl SocketChannel {
    pub fn loopback(max_frame: usize) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let writer = TcpStream::connect(listener.local_addr()?)?;
        writer.set_nodelay(true)?;
        let (mut stream, _) = listener.accept()?;
        let (tx, inbox) = mpsc::channel();
        let reader = std::thread::spawn(move || loop {
            let mut len = [0u8; 4];
            if stream.read_exact(&mut len).is_err() {
                return;
            }
            let n = u32::from_be_bytes(len) as usize;
            if n > max_frame || n < HEADER_LEN {
                let _ = tx.send(Err(Error::Codec(format!("bad frame length {n} on socket"))));
                return;
            }
            let mut buf = vec![0u8; 4 + n];
            buf[..4].copy_from_slice(&len);
            if let Err(e) = stream.read_exact(&mut buf[4..]) {
                let _ = tx.send(Err(e.into()));
                return;
            }
            if tx.send(Ok(buf)).is_err() {
                return;
            }
        });
        Ok(SocketChannel { writer, inbox, reader: Some(reader) })
    }
}

impl Channel for SocketChannel {
    fn send(&mut self, frame_bytes: Vec<u8>) -> Result<()> {
        self.writer.write_all(&frame_bytes)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        self.inbox
            .recv()
            .map_err(|_| Error::Protocol("socket reader terminated".into()))?
    }
}

impl Drop for SocketChannel {
    fn drop(&mut self) {
        let _ = self.writer.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Memory,
    Socket,
}

/// Monotone per-link counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkCounters {
    pub frames: u64,
    /// Sum of length fields (header + payload, without the 4-byte prefix).
    pub bytes: u64,
    /// Bytes actually written, including the length prefix.
    pub wire_bytes: u64,
}

/// A frame as it came off a channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivered {
    pub from: Endpoint,
    pub to: Endpoint,
    pub frame: Frame,
    pub wire: Vec<u8>,
}

/// All directed links between participants, created on first use.
pub struct Network {
    kind: TransportKind,
    max_frame: usize,
    links: BTreeMap<(Endpoint, Endpoint), (Box<dyn Channel>, LinkCounters)>,
    log: Vec<Delivered>,
}

impl Network {
    pub fn new(kind: TransportKind, max_frame: usize) -> Self {
        Network { kind, max_frame, links: BTreeMap::new(), log: Vec::new() }
    }

    pub fn kind(&self) -> TransportKind {
        self.kind
    }

    fn link(&mut self, from: Endpoint, to: Endpoint) -> Result<&mut (Box<dyn Channel>, LinkCounters)> {
        if !self.links.contains_key(&(from, to)) {
            let ch: Box<dyn Channel> = match self.kind {
                TransportKind::Memory => Box::<MemoryChannel>::default(),
                TransportKind::Socket => Box::new(SocketChannel::loopback(self.max_frame)?),
            };
            self.links.insert((from, to), (ch, LinkCounters::default()));
        }
        Ok(self.links.get_mut(&(from, to)).unwrap())
    }

    pub fn send(&mut self, from: Endpoint, to: Endpoint, frame: &Frame) -> Result<()> {
        if frame.length_field() as usize > self.max_frame {
            return Err(Error::Codec(format!(
                "{} frame of {} bytes exceeds limit {}",
                frame.msg_type.name(),
                frame.length_field(),
                self.max_frame
            )));
        }
        let bytes = encode_frame(frame);
        let (ch, c) = self.link(from, to)?;
        c.frames += 1;
        c.bytes += frame.length_field();
        c.wire_bytes += bytes.len() as u64;
        ch.send(bytes)
    }

    /// Receives the next frame on `from -> to` and records it in the log.
    pub fn recv(&mut self, from: Endpoint, to: Endpoint) -> Result<Frame> {
        let max = self.max_frame;
        let (ch, _) = self.link(from, to)?;
        let wire = ch.recv()?;
        let (frame, used) = decode_frame(&wire, max)?;
        if used != wire.len() {
            return Err(Error::Codec("trailing bytes after frame".into()));
        }
        self.log.push(Delivered { from, to, frame: frame.clone(), wire });
        Ok(frame)
    }

    /// Frames delivered since the previous call.
    pub fn take_log(&mut self) -> Vec<Delivered> {
        std::mem::take(&mut self.log)
    }

    pub fn counters(&self) -> Vec<((Endpoint, Endpoint), LinkCounters)> {
        self.links.iter().map(|(k, (_, c))| (*k, *c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{MessageType, DEFAULT_MAX_FRAME};

    fn frame(i: u8) -> Frame {
        Frame { msg_type: MessageType::CosP0, round: i as u32, sender: 1, payload: vec![i; i as usize] }
    }

    #[test]
    fn fifo_over_both_transports() {
        for kind in [TransportKind::Memory, TransportKind::Socket] {
            let mut net = Network::new(kind, DEFAULT_MAX_FRAME);
            for i in 0..20 {
                net.send(Endpoint::Client(1), Endpoint::Server0, &frame(i)).unwrap();
            }
            for i in 0..20 {
                assert_eq!(net.recv(Endpoint::Client(1), Endpoint::Server0).unwrap(), frame(i));
            }
            let log = net.take_log();
            assert_eq!(log.len(), 20);
            let c = net.counters()[0].1;
            assert_eq!(c.frames, 20);
            assert_eq!(c.wire_bytes, c.bytes + 4 * 20);
        }
    }

    #[test]
    fn large_frames_cross_the_socket() {
        let mut net = Network::new(TransportKind::Socket, DEFAULT_MAX_FRAME);
        let big = Frame { msg_type: MessageType::EncMaskPack, round: 0, sender: 2, payload: vec![7; 3 << 20] };
        net.send(Endpoint::Server1, Endpoint::Server0, &big).unwrap();
        net.send(Endpoint::Server1, Endpoint::Server0, &big).unwrap();
        assert_eq!(net.recv(Endpoint::Server1, Endpoint::Server0).unwrap(), big);
        assert_eq!(net.recv(Endpoint::Server1, Endpoint::Server0).unwrap(), big);
    }

    #[test]
    fn oversize_send_is_rejected() {
        let mut net = Network::new(TransportKind::Memory, 16);
        assert!(net.send(Endpoint::Server0, Endpoint::Server1, &frame(10)).is_err());
    }

    #[test]
    fn empty_memory_channel_errors() {
        let mut net = Network::new(TransportKind::Memory, DEFAULT_MAX_FRAME);
        assert!(net.recv(Endpoint::Server0, Endpoint::Server1).is_err());
    }
}
