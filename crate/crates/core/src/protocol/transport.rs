//! Reliable, ordered, duplex message transports.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::protocol::message::{ClassicalMessage, MessageBody};
use crate::sourcesim::Party;

pub trait Transport {
    fn send(&mut self, msg: ClassicalMessage) -> Result<()>;
    fn recv(&mut self) -> Result<ClassicalMessage>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub from: Party,
    pub message: ClassicalMessage,
}

/// Wire tap shared by both ends of an in-process link.
#[derive(Debug, Clone, Default)]
pub struct Transcript(Arc<Mutex<Vec<TranscriptEntry>>>);

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, from: Party, message: &ClassicalMessage) {
        self.0
            .lock()
            .expect("transcript lock")
            .push(TranscriptEntry {
                from,
                message: message.clone(),
            });
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.0.lock().expect("transcript lock").clone()
    }
}

pub struct InProcessTransport {
    me: Party,
    tx: Sender<ClassicalMessage>,
    rx: Receiver<ClassicalMessage>,
    tap: Option<Transcript>,
}

/// Two connected endpoints (Alice's, Bob's). Every sent message is appended
/// to `tap`, when given, in send order.
pub fn in_process_pair(tap: Option<Transcript>) -> (InProcessTransport, InProcessTransport) {
    let (to_bob, from_alice) = channel();
    let (to_alice, from_bob) = channel();
    (
        InProcessTransport {
            me: Party::Alice,
            tx: to_bob,
            rx: from_bob,
            tap: tap.clone(),
        },
        InProcessTransport {
            me: Party::Bob,
            tx: to_alice,
            rx: from_alice,
            tap,
        },
    )
}

impl Transport for InProcessTransport {
    fn send(&mut self, msg: ClassicalMessage) -> Result<()> {
        if let Some(tap) = &self.tap {
            tap.record(self.me, &msg);
        }
        self.tx
            .send(msg)
            .map_err(|_| Error::Channel("peer endpoint closed".into()))
    }

    fn recv(&mut self) -> Result<ClassicalMessage> {
        self.rx
            .recv()
            .map_err(|_| Error::Channel("peer endpoint closed".into()))
    }
}

/// Newline-delimited JSON over TCP.
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    line: String,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self> {
        let clone = stream
            .try_clone()
            .map_err(|e| Error::Channel(format!("cloning socket: {e}")))?;
        stream.set_nodelay(true).ok();
        Ok(TcpTransport {
            reader: BufReader::new(clone),
            writer: BufWriter::new(stream),
            line: String::new(),
        })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Channel(format!("connect: {e}")))?;
        Self::new(stream)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: ClassicalMessage) -> Result<()> {
        let line = msg.to_line();
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Channel(format!("send: {e}")))
    }

    fn recv(&mut self) -> Result<ClassicalMessage> {
        self.line.clear();
        let n = self
            .reader
            .read_line(&mut self.line)
            .map_err(|e| Error::Channel(format!("recv: {e}")))?;
        if n == 0 {
            return Err(Error::Channel("connection closed by peer".into()));
        }
        ClassicalMessage::from_line(&self.line)
    }
}

/// A session-scoped endpoint: stamps outgoing messages with the session id
/// and a per-direction sequence number, and rejects anything out of order.
pub struct Link<T: Transport> {
    transport: T,
    session_id: u64,
    next_send: u64,
    next_recv: u64,
}

impl<T: Transport> Link<T> {
    pub fn new(transport: T, session_id: u64) -> Self {
        Link {
            transport,
            session_id,
            next_send: 0,
            next_recv: 0,
        }
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn send(&mut self, body: MessageBody) -> Result<()> {
        let msg = ClassicalMessage {
            session_id: self.session_id,
            seq: self.next_send,
            body,
        };
        self.next_send += 1;
        self.transport.send(msg)
    }

    pub fn recv(&mut self) -> Result<MessageBody> {
        let msg = self.transport.recv()?;
        if msg.session_id != self.session_id {
            return Err(Error::ProtocolViolation(format!(
                "message for session {} on session {}",
                msg.session_id, self.session_id
            )));
        }
        if msg.seq != self.next_recv {
            return Err(Error::ProtocolViolation(format!(
                "expected sequence number {}, got {}",
                self.next_recv, msg.seq
            )));
        }
        self.next_recv += 1;
        Ok(msg.body)
    }

    pub fn into_inner(self) -> T {
        self.transport
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::message::AbortReason;
    use std::net::TcpListener;

    #[test]
    fn in_process_round_trip_and_tap() {
        let tap = Transcript::new();
        let (a, b) = in_process_pair(Some(tap.clone()));
        let mut a = Link::new(a, 5);
        let mut b = Link::new(b, 5);
        a.send(MessageBody::EcVerifyResult { ok: true }).unwrap();
        assert_eq!(b.recv().unwrap(), MessageBody::EcVerifyResult { ok: true });
        b.send(MessageBody::Abort { reason: AbortReason::QberThreshold }).unwrap();
        a.recv().unwrap();
        let entries = tap.entries();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].from, Party::Alice);
        assert_eq!(entries[1].from, Party::Bob);
    }

    #[test]
    fn out_of_order_and_foreign_session() {
        let (mut a, b) = in_process_pair(None);
        let mut b = Link::new(b, 1);
        a.send(ClassicalMessage { session_id: 1, seq: 4, body: MessageBody::EcVerifyResult { ok: true } })
            .unwrap();
        assert!(matches!(b.recv(), Err(Error::ProtocolViolation(_))));
        let (mut a, b) = in_process_pair(None);
        let mut b = Link::new(b, 1);
        a.send(ClassicalMessage { session_id: 2, seq: 0, body: MessageBody::EcVerifyResult { ok: true } })
            .unwrap();
        assert!(matches!(b.recv(), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn dropped_peer_is_channel_failure() {
        let (a, b) = in_process_pair(None);
        drop(b);
        let mut a = Link::new(a, 0);
        assert!(matches!(a.recv(), Err(Error::Channel(_))));
    }

    #[test]
    fn tcp_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut link = Link::new(TcpTransport::new(stream).unwrap(), 3);
            let body = link.recv().unwrap();
            link.send(body).unwrap();
        });
        let mut link = Link::new(TcpTransport::connect(addr).unwrap(), 3);
        let body = MessageBody::PaSeed { seed: 42, output_bits: 1000 };
        link.send(body.clone()).unwrap();
        assert_eq!(link.recv().unwrap(), body);
        server.join().unwrap();
    }
}
