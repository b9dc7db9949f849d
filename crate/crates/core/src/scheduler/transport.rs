//! Frame transports. Both carry fully encoded frames, so the in-process
//! transport exercises exactly the bytes a socket would.

use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::wire::{read_frame, WireError, HEADER_LEN};

/// Sending half of a link.
pub trait FrameSink: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), WireError>;
    /// Closes the link; the peer's source observes end of stream.
    fn close(&mut self);
}

/// Receiving half of a link. `recv` blocks; `Ok(None)` means the peer
/// closed the link.
pub trait FrameSource: Send {
    fn recv(&mut self) -> Result<Option<Vec<u8>>, WireError>;
}

pub struct Endpoint {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

struct ChannelSink(Option<Sender<Vec<u8>>>);

impl FrameSink for ChannelSink {
    fn send(&mut self, frame: &[u8]) -> Result<(), WireError> {
        match &self.0 {
            Some(tx) => tx
                .send(frame.to_vec())
                .map_err(|_| WireError::Io("peer disconnected".into())),
            None => Err(WireError::Io("link closed".into())),
        }
    }

    fn close(&mut self) {
        self.0 = None;
    }
}

struct ChannelSource(Receiver<Vec<u8>>);

impl FrameSource for ChannelSource {
    fn recv(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        Ok(self.0.recv().ok())
    }
}

/// Two connected in-process endpoints: (coordinator side, worker side).
pub fn in_process_pair() -> (Endpoint, Endpoint) {
    let (to_worker, from_coordinator) = mpsc::channel();
    let (to_coordinator, from_worker) = mpsc::channel();
    (
        Endpoint {
            sink: Box::new(ChannelSink(Some(to_worker))),
            source: Box::new(ChannelSource(from_worker)),
        },
        Endpoint {
            sink: Box::new(ChannelSink(Some(to_coordinator))),
            source: Box::new(ChannelSource(from_coordinator)),
        },
    )
}

struct TcpSink(TcpStream);

impl FrameSink for TcpSink {
    fn send(&mut self, frame: &[u8]) -> Result<(), WireError> {
        self.0.write_all(frame).map_err(|e| WireError::Io(e.to_string()))
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

struct TcpSource(TcpStream);

impl FrameSource for TcpSource {
    fn recv(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        read_frame(&mut self.0)
    }
}

pub fn tcp_endpoint(stream: TcpStream) -> Result<Endpoint, WireError> {
    stream.set_nodelay(true).map_err(|e| WireError::Io(e.to_string()))?;
    let reader = stream.try_clone().map_err(|e| WireError::Io(e.to_string()))?;
    Ok(Endpoint {
        sink: Box::new(TcpSink(stream)),
        source: Box::new(TcpSource(reader)),
    })
}

/// Accepts `count` worker connections, giving up after `timeout`.
pub fn accept_workers(listener: &TcpListener, count: usize, timeout: Duration) -> Result<Vec<Endpoint>, WireError> {
    let io = |e: std::io::Error| WireError::Io(e.to_string());
    listener.set_nonblocking(true).map_err(io)?;
    let deadline = Instant::now() + timeout;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false).map_err(io)?;
                out.push(tcp_endpoint(stream)?);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(WireError::Io(format!(
                        "only {} of {count} workers connected before the deadline",
                        out.len()
                    )));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(io(e)),
        }
    }
    Ok(out)
}

/// Connects to a coordinator, retrying with exponential backoff.
pub fn connect_with_retry(addr: impl ToSocketAddrs + Clone, attempts: usize, first_delay: Duration) -> Result<Endpoint, WireError> {
    let mut delay = first_delay;
    let mut last = String::from("no attempts made");
    for attempt in 0..attempts.max(1) {
        match TcpStream::connect(addr.clone()) {
            Ok(stream) => return tcp_endpoint(stream),
            Err(e) => {
                last = e.to_string();
                log::info!("connect attempt {} failed: {e}", attempt + 1);
                std::thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_secs(5));
            }
        }
    }
    Err(WireError::Io(format!("could not reach coordinator: {last}")))
}

/// Shared byte and frame counters.
#[derive(Debug, Default)]
pub struct Traffic {
    frames: AtomicU64,
    frame_bytes: AtomicU64,
    payload_bytes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficSnapshot {
    pub frames: u64,
    pub frame_bytes: u64,
    /// Bytes excluding the frame headers.
    pub payload_bytes: u64,
}

impl TrafficSnapshot {
    pub fn since(&self, earlier: &TrafficSnapshot) -> TrafficSnapshot {
        TrafficSnapshot {
            frames: self.frames - earlier.frames,
            frame_bytes: self.frame_bytes - earlier.frame_bytes,
            payload_bytes: self.payload_bytes - earlier.payload_bytes,
        }
    }
}

impl Traffic {
    fn record(&self, frame: &[u8]) {
        self.frames.fetch_add(1, Ordering::Relaxed);
        self.frame_bytes.fetch_add(frame.len() as u64, Ordering::Relaxed);
        self.payload_bytes
            .fetch_add(frame.len().saturating_sub(HEADER_LEN) as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        TrafficSnapshot {
            frames: self.frames.load(Ordering::SeqCst),
            frame_bytes: self.frame_bytes.load(Ordering::SeqCst),
            payload_bytes: self.payload_bytes.load(Ordering::SeqCst),
        }
    }
}

struct CountingSink {
    inner: Box<dyn FrameSink>,
    traffic: Arc<Traffic>,
}

impl FrameSink for CountingSink {
    fn send(&mut self, frame: &[u8]) -> Result<(), WireError> {
        self.traffic.record(frame);
        self.inner.send(frame)
    }

    fn close(&mut self) {
        self.inner.close();
    }
}

struct CountingSource {
    inner: Box<dyn FrameSource>,
    traffic: Arc<Traffic>,
}

impl FrameSource for CountingSource {
    fn recv(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        let frame = self.inner.recv()?;
        if let Some(f) = &frame {
            self.traffic.record(f);
        }
        Ok(frame)
    }
}

/// Wraps both halves so every frame in either direction is counted.
pub fn counting(endpoint: Endpoint, traffic: Arc<Traffic>) -> Endpoint {
    Endpoint {
        sink: Box::new(CountingSink {
            inner: endpoint.sink,
            traffic: traffic.clone(),
        }),
        source: Box::new(CountingSource {
            inner: endpoint.source,
            traffic,
        }),
    }
}
