//! Classical-channel transports: an in-process byte channel and TCP.
//!
//! Both carry the exact frame encoding from [`crate::protocol::frames`];
//! the in-process channel round-trips every message through its byte form
//! so the two transports exercise the same wire surface.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::thread::JoinHandle;

use crate::error::{FrameError, TransportError};
use crate::protocol::frames::{self, Message};
use crate::protocol::session::AliceSifter;

/// Where the classical sifting traffic runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportSpec {
    Inproc,
    Tcp(String),
}

impl TransportSpec {
    pub fn parse(s: &str) -> Result<Self, TransportError> {
        if s == "inproc" {
            return Ok(TransportSpec::Inproc);
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.split(':').count() == 2 && !addr.is_empty() {
                return Ok(TransportSpec::Tcp(addr.to_string()));
            }
        }
        Err(TransportError::BadSpec(s.to_string()))
    }

    pub fn as_string(&self) -> String {
        match self {
            TransportSpec::Inproc => "inproc".to_string(),
            TransportSpec::Tcp(addr) => format!("tcp:{addr}"),
        }
    }
}

/// One captured frame, for wire-level assertions in tests.
#[derive(Debug, Clone)]
pub struct TapRecord {
    pub from_receiver: bool,
    pub bytes: Vec<u8>,
}

/// Receiver-side handle on the classical channel.
pub trait SiftTransport {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Message, TransportError>;
}

/// Single-threaded transport: the sender's sifting machine runs inline,
/// fed through encoded bytes.
pub struct InprocTransport {
    alice: AliceSifter,
    inbox: VecDeque<Message>,
    tap: Option<Vec<TapRecord>>,
}

impl InprocTransport {
    pub fn new(alice: AliceSifter, capture: bool) -> Self {
        Self {
            alice,
            inbox: VecDeque::new(),
            tap: if capture { Some(Vec::new()) } else { None },
        }
    }

    pub fn into_parts(self) -> (AliceSifter, Vec<TapRecord>) {
        (self.alice, self.tap.unwrap_or_default())
    }
}

impl SiftTransport for InprocTransport {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        let bytes = frames::encode(msg);
        if let Some(tap) = self.tap.as_mut() {
            tap.push(TapRecord {
                from_receiver: true,
                bytes: bytes.clone(),
            });
        }
        let (decoded, used) = frames::decode(&bytes)?;
        debug_assert_eq!(used, bytes.len());
        let responses = self
            .alice
            .handle(&decoded)
            .map_err(|e| TransportError::Io(std::io::Error::other(e.to_string())))?;
        for resp in responses {
            let rbytes = frames::encode(&resp);
            if let Some(tap) = self.tap.as_mut() {
                tap.push(TapRecord {
                    from_receiver: false,
                    bytes: rbytes.clone(),
                });
            }
            let (rmsg, _) = frames::decode(&rbytes)?;
            self.inbox.push_back(rmsg);
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        self.inbox.pop_front().ok_or(TransportError::Closed)
    }
}

fn write_frame(stream: &mut TcpStream, msg: &Message) -> Result<(), TransportError> {
    stream.write_all(&frames::encode(msg))?;
    Ok(())
}

fn read_frame(stream: &mut TcpStream) -> Result<Option<Message>, TransportError> {
    let mut header = [0u8; frames::HEADER_LEN];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(header[1..5].try_into().expect("header length")) as usize;
    if len > frames::MAX_PAYLOAD {
        return Err(FrameError::OverLength(len, frames::MAX_PAYLOAD).into());
    }
    let mut payload = vec![0u8; len];
    stream.read_exact(&mut payload)?;
    Ok(Some(frames::decode_payload(header[0], &payload)?))
}

/// TCP transport, receiver end.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: &str) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }
}

impl SiftTransport for TcpTransport {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        write_frame(&mut self.stream, msg)
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        read_frame(&mut self.stream)?.ok_or(TransportError::Closed)
    }
}

/// Run the sender's sifting machine as a one-connection TCP server.
///
/// Returns the bound address and the join handle yielding the machine
/// (with its accumulated key) once the session stops.
pub fn spawn_alice_server(
    bind: impl ToSocketAddrs,
    mut alice: AliceSifter,
) -> Result<(std::net::SocketAddr, JoinHandle<Result<AliceSifter, TransportError>>), TransportError>
{
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let handle = std::thread::spawn(move || -> Result<AliceSifter, TransportError> {
        let (mut stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        loop {
            let msg = match read_frame(&mut stream)? {
                Some(m) => m,
                None => break, // peer closed
            };
            let responses = alice
                .handle(&msg)
                .map_err(|e| TransportError::Io(std::io::Error::other(e.to_string())))?;
            for resp in responses {
                write_frame(&mut stream, &resp)?;
            }
            if alice.done() {
                break;
            }
        }
        Ok(alice)
    });
    Ok((addr, handle))
}
