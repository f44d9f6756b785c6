//! PLC emulator: one client at a time, `ARIS1` lines in, acks out.
//!
//! Two tasks share the session. The session task reads lines, runs them
//! through [`PlcSession`] and writes acks; the tick task advances the
//! scheduler on its own clock and forwards completed actuations over a
//! channel to whoever drives the virtual paddles.

use std::io::{self, BufRead, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use aris_core::control::{ActuationEvent, PaddleLayout, Scheduler};
use aris_core::wire::{encode_ack, BreachRecord, PlcSession, MAX_LINE_BYTES};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Clock moved by hand, for tests and replays.
#[derive(Debug, Default, Clone)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub lines: u64,
    pub acks: u64,
    pub malformed: u64,
    pub commands_accepted: u64,
    pub commands_rejected: u64,
    pub transport_lost: bool,
}

pub type Shared = Arc<Mutex<PlcSession>>;

pub fn shared_session(layout: PaddleLayout) -> Shared {
    Arc::new(Mutex::new(PlcSession::new(Scheduler::new(layout))))
}

fn interrupted(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted)
}

/// Serve one connection until EOF or `stop`. Breaches go to `breaches`.
pub fn run_session<R: BufRead, W: Write>(
    mut reader: R,
    mut writer: W,
    session: &Shared,
    clock: &dyn Clock,
    stop: &AtomicBool,
    breaches: &Sender<BreachRecord>,
) -> io::Result<SessionStats> {
    let mut stats = SessionStats::default();
    let mut buf = Vec::with_capacity(256);
    let mut overflow = false;
    session.lock().expect("session lock").reset_connection();
    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let room = (MAX_LINE_BYTES + 1).saturating_sub(buf.len()) as u64;
        let res = io::Read::take(&mut reader, room.max(1)).read_until(b'\n', &mut buf);
        match res {
            Ok(0) if buf.is_empty() => break,
            Ok(0) => {
                let mut s = session.lock().expect("session lock");
                s.transport_lost(&buf, clock.now_ms());
                drain_breaches(&mut s, breaches);
                stats.transport_lost = true;
                break;
            }
            Ok(_) => {}
            Err(e) if interrupted(&e) => continue,
            Err(e) => {
                let mut s = session.lock().expect("session lock");
                s.transport_lost(&buf, clock.now_ms());
                drain_breaches(&mut s, breaches);
                return Err(e);
            }
        }
        let complete = buf.last() == Some(&b'\n');
        if overflow {
            // skipping the rest of an oversized line
            overflow = !complete;
            buf.clear();
            continue;
        }
        if !complete {
            if buf.len() > MAX_LINE_BYTES {
                let ack = handle(session, &buf, clock, breaches);
                writer.write_all(encode_ack(&ack).as_bytes())?;
                writer.flush()?;
                stats.lines += 1;
                stats.acks += 1;
                stats.malformed += 1;
                overflow = true;
                buf.clear();
            }
            continue;
        }
        let out = {
            let mut s = session.lock().expect("session lock");
            let out = s.handle_line(&buf, clock.now_ms());
            drain_breaches(&mut s, breaches);
            out
        };
        buf.clear();
        stats.lines += 1;
        match out.packet {
            None => stats.malformed += 1,
            Some(_) => {
                let ok = out.outcomes.iter().filter(|o| o.accepted()).count() as u64;
                stats.commands_accepted += ok;
                stats.commands_rejected += out.outcomes.len() as u64 - ok;
            }
        }
        writer.write_all(encode_ack(&out.ack).as_bytes())?;
        writer.flush()?;
        stats.acks += 1;
    }
    Ok(stats)
}

fn handle(session: &Shared, line: &[u8], clock: &dyn Clock, breaches: &Sender<BreachRecord>) -> aris_core::wire::Ack {
    let mut s = session.lock().expect("session lock");
    let out = s.handle_line(line, clock.now_ms());
    drain_breaches(&mut s, breaches);
    out.ack
}

fn drain_breaches(s: &mut PlcSession, tx: &Sender<BreachRecord>) {
    for b in s.take_breaches() {
        let _ = tx.send(b);
    }
}

/// Tick the scheduler every `period` until `stop`, forwarding actuations.
pub fn spawn_ticker(
    session: Shared,
    clock: Arc<dyn Clock>,
    period: Duration,
    stop: Arc<AtomicBool>,
    tx: Sender<ActuationEvent>,
) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            let events = session.lock().expect("session lock").tick(clock.now_ms());
            for e in events {
                if tx.send(e).is_err() {
                    return;
                }
            }
            thread::sleep(period);
        }
        for e in session.lock().expect("session lock").drain() {
            let _ = tx.send(e);
        }
    })
}

pub struct ServeOptions {
    pub endpoint: String,
    pub layout: PaddleLayout,
    pub tick: Duration,
    pub poll: Duration,
}

/// Handles to a running server.
pub struct Server {
    pub local_addr: std::net::SocketAddr,
    pub session: Shared,
    pub actuations: Receiver<ActuationEvent>,
    pub breaches: Receiver<BreachRecord>,
    pub stop: Arc<AtomicBool>,
    accept: thread::JoinHandle<Result<()>>,
    ticker: thread::JoinHandle<()>,
}

impl Server {
    pub fn start(opts: ServeOptions, clock: Arc<dyn Clock>) -> Result<Self> {
        let listener = TcpListener::bind(&opts.endpoint)
            .with_context(|| format!("cannot listen on {} (port busy or address invalid)", opts.endpoint))?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let session = shared_session(opts.layout);
        let stop = Arc::new(AtomicBool::new(false));
        let (act_tx, actuations) = mpsc::channel();
        let (br_tx, breaches) = mpsc::channel();
        let ticker = spawn_ticker(session.clone(), clock.clone(), opts.tick, stop.clone(), act_tx);
        let accept = {
            let (session, stop) = (session.clone(), stop.clone());
            thread::spawn(move || accept_loop(listener, &session, clock.as_ref(), &stop, &br_tx, opts.poll))
        };
        Ok(Self { local_addr, session, actuations, breaches, stop, accept, ticker })
    }

    pub fn shutdown(self) -> Result<(Shared, Receiver<ActuationEvent>, Receiver<BreachRecord>)> {
        self.stop.store(true, Ordering::SeqCst);
        self.accept.join().map_err(|_| anyhow::anyhow!("accept thread panicked"))??;
        self.ticker.join().map_err(|_| anyhow::anyhow!("tick thread panicked"))?;
        Ok((self.session, self.actuations, self.breaches))
    }
}

fn accept_loop(
    listener: TcpListener,
    session: &Shared,
    clock: &dyn Clock,
    stop: &AtomicBool,
    breaches: &Sender<BreachRecord>,
    poll: Duration,
) -> Result<()> {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client {peer} connected");
                match serve_stream(stream, session, clock, stop, breaches, poll) {
                    Ok(s) => log::info!("client {peer} closed after {} lines ({} malformed)", s.lines, s.malformed),
                    Err(e) => log::warn!("client {peer} dropped: {e}"),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(poll),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn serve_stream(
    stream: TcpStream,
    session: &Shared,
    clock: &dyn Clock,
    stop: &AtomicBool,
    breaches: &Sender<BreachRecord>,
    poll: Duration,
) -> io::Result<SessionStats> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(poll))?;
    stream.set_nodelay(true)?;
    let reader = io::BufReader::new(stream.try_clone()?);
    run_session(reader, stream, session, clock, stop, breaches)
}
