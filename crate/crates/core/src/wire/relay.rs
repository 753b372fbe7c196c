//! One-publisher, many-subscriber TCP relay.
//!
//! Every connection opens with a 4-byte role: `PUB1` or `SUB1`. The relay
//! answers `ACK1`, or `BUSY` when a publisher is already attached, or `FULL`
//! when the subscriber limit is reached, and closes. After the handshake the
//! publisher streams frames and each subscriber receives them in publish
//! order. A subscriber whose queue fills up is disconnected rather than
//! allowed to stall the others.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{decode_frame, read_frame_bytes, WireError};

pub const ROLE_PUBLISHER: &[u8; 4] = b"PUB1";
pub const ROLE_SUBSCRIBER: &[u8; 4] = b"SUB1";
pub const REPLY_ACK: &[u8; 4] = b"ACK1";
pub const REPLY_BUSY: &[u8; 4] = b"BUSY";
pub const REPLY_FULL: &[u8; 4] = b"FULL";
/// Frames buffered per subscriber before it is dropped.
pub const SUBSCRIBER_QUEUE: usize = 64;

const ACCEPT_POLL: Duration = Duration::from_millis(5);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct RelayConfig {
    pub max_subscribers: usize,
    pub queue_len: usize,
}

impl Default for RelayConfig {
    fn default() -> Self {
        Self {
            max_subscribers: 16,
            queue_len: SUBSCRIBER_QUEUE,
        }
    }
}

struct SubscriberSlot {
    id: u64,
    tx: SyncSender<Arc<Vec<u8>>>,
}

#[derive(Default)]
struct Shared {
    subscribers: Mutex<Vec<SubscriberSlot>>,
    publisher_attached: AtomicBool,
    frames: AtomicU64,
    dropped_subscribers: AtomicU64,
    stop: AtomicBool,
    streams: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn broadcast(&self, frame: Vec<u8>) {
        let seq = self.frames.fetch_add(1, Ordering::SeqCst);
        let frame = Arc::new(frame);
        let mut subs = self.subscribers.lock().unwrap();
        subs.retain(|s| match s.tx.try_send(Arc::clone(&frame)) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                log::warn!(
                    "relay: subscriber {} fell behind at frame {seq}, disconnecting",
                    s.id
                );
                self.dropped_subscribers.fetch_add(1, Ordering::SeqCst);
                false
            }
            Err(TrySendError::Disconnected(_)) => {
                log::info!("relay: subscriber {} gone", s.id);
                false
            }
        });
        log::debug!(
            "relay: frame {seq} ({} bytes) to {} subscribers",
            frame.len(),
            subs.len()
        );
    }

    fn track(&self, s: &TcpStream) {
        if let Ok(c) = s.try_clone() {
            self.streams.lock().unwrap().push(c);
        }
    }
}

/// A running relay. Dropping it shuts the relay down.
pub struct RelayHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl RelayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn subscriber_count(&self) -> usize {
        self.shared.subscribers.lock().unwrap().len()
    }

    pub fn publisher_attached(&self) -> bool {
        self.shared.publisher_attached.load(Ordering::SeqCst)
    }

    /// Frames received from the publisher so far.
    pub fn frames_relayed(&self) -> u64 {
        self.shared.frames.load(Ordering::SeqCst)
    }

    /// Subscribers disconnected for falling behind.
    pub fn dropped_subscribers(&self) -> u64 {
        self.shared.dropped_subscribers.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for s in self.shared.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.shared.subscribers.lock().unwrap().clear();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RelayHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds and starts the relay on background threads.
pub fn start_relay<A: ToSocketAddrs>(
    addr: A,
    config: RelayConfig,
) -> Result<RelayHandle, WireError> {
    if config.queue_len == 0 {
        return Err(WireError::Relay("queue length must be positive".into()));
    }
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let shared = Arc::new(Shared::default());
    let sh = Arc::clone(&shared);
    let accept = thread::Builder::new()
        .name("relay-accept".into())
        .spawn(move || accept_loop(listener, sh, config))?;
    log::info!("relay listening on {local}");
    Ok(RelayHandle {
        addr: local,
        shared,
        accept: Some(accept),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, config: RelayConfig) {
    let mut next_id = 0u64;
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                next_id += 1;
                if let Err(e) = handle_connection(stream, peer, next_id, &shared, &config) {
                    log::warn!("relay: connection from {peer} rejected: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log::error!("relay: accept failed: {e}");
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn handle_connection(
    mut stream: TcpStream,
    peer: SocketAddr,
    id: u64,
    shared: &Arc<Shared>,
    config: &RelayConfig,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let mut role = [0u8; 4];
    stream.read_exact(&mut role)?;
    stream.set_read_timeout(None)?;
    match &role {
        r if r == ROLE_PUBLISHER => {
            if shared.publisher_attached.swap(true, Ordering::SeqCst) {
                stream.write_all(REPLY_BUSY)?;
                return Ok(());
            }
            stream.write_all(REPLY_ACK)?;
            shared.track(&stream);
            log::info!("relay: publisher {peer} attached");
            let sh = Arc::clone(shared);
            thread::Builder::new()
                .name("relay-pub".into())
                .spawn(move || publisher_loop(stream, sh))?;
        }
        r if r == ROLE_SUBSCRIBER => {
            let mut subs = shared.subscribers.lock().unwrap();
            if subs.len() >= config.max_subscribers {
                drop(subs);
                stream.write_all(REPLY_FULL)?;
                return Ok(());
            }
            stream.write_all(REPLY_ACK)?;
            let (tx, rx) = sync_channel(config.queue_len);
            subs.push(SubscriberSlot { id, tx });
            drop(subs);
            shared.track(&stream);
            log::info!("relay: subscriber {id} ({peer}) attached");
            thread::Builder::new()
                .name(format!("relay-sub-{id}"))
                .spawn(move || subscriber_loop(stream, rx))?;
        }
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unknown role {:?}", String::from_utf8_lossy(other)),
            ));
        }
    }
    Ok(())
}

fn publisher_loop(mut stream: TcpStream, shared: Arc<Shared>) {
    loop {
        match read_frame_bytes(&mut stream) {
            Ok(Some(frame)) => match decode_frame(&frame) {
                Ok(_) => shared.broadcast(frame),
                Err(e) => log::warn!("relay: dropping malformed frame: {e}"),
            },
            Ok(None) => break,
            Err(e) => {
                if !shared.stop.load(Ordering::SeqCst) {
                    log::warn!("relay: publisher stream error: {e}");
                }
                break;
            }
        }
    }
    log::info!(
        "relay: publisher detached after {} frames",
        shared.frames.load(Ordering::SeqCst)
    );
    shared.publisher_attached.store(false, Ordering::SeqCst);
}

fn subscriber_loop(mut stream: TcpStream, rx: Receiver<Arc<Vec<u8>>>) {
    for frame in rx {
        if stream.write_all(&frame).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn handshake(addr: impl ToSocketAddrs, role: &[u8; 4]) -> Result<TcpStream, WireError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    stream.write_all(role)?;
    let mut reply = [0u8; 4];
    stream.read_exact(&mut reply)?;
    match &reply {
        r if r == REPLY_ACK => Ok(stream),
        r if r == REPLY_BUSY => Err(WireError::Relay("a publisher is already attached".into())),
        r if r == REPLY_FULL => Err(WireError::Relay("subscriber limit reached".into())),
        r => Err(WireError::Relay(format!(
            "unexpected reply {:?}",
            String::from_utf8_lossy(r)
        ))),
    }
}

/// Sending side of the relay.
pub struct Publisher {
    stream: TcpStream,
}

impl Publisher {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, WireError> {
        Ok(Self {
            stream: handshake(addr, ROLE_PUBLISHER)?,
        })
    }

    pub fn send(&mut self, frame: &[u8]) -> Result<(), WireError> {
        self.stream.write_all(frame)?;
        Ok(())
    }
}

/// Receiving side of the relay.
pub struct Subscriber {
    stream: TcpStream,
}

impl Subscriber {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, WireError> {
        Ok(Self {
            stream: handshake(addr, ROLE_SUBSCRIBER)?,
        })
    }

    pub fn set_timeout(&self, t: Option<Duration>) -> Result<(), WireError> {
        self.stream.set_read_timeout(t)?;
        Ok(())
    }

    /// Next whole frame, or `None` once the relay closes the connection.
    pub fn recv(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        read_frame_bytes(&mut self.stream)
    }
}
