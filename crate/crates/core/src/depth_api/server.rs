use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, PoisonError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{read_frame_bytes, write_frame, Request, Response, ResponseKind};
use super::{DialogError, DialogState, StepOutcome, DEFAULT_MAX_TURNS};
use crate::depth_codec::DepthMap;
use crate::raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    /// Socket address to bind, e.g. `127.0.0.1:7878`. Port 0 picks a free one.
    pub listen: String,
    /// Directory holding `<id>.sbd` or `<id>.png` depth maps.
    pub store_root: PathBuf,
    #[serde(default = "default_max_turns")]
    pub max_turns: u32,
}

fn default_max_turns() -> u32 {
    DEFAULT_MAX_TURNS
}

/// Read-only depth maps addressed by id. Files are loaded on first use.
#[derive(Debug, Default)]
pub struct DepthStore {
    root: Option<PathBuf>,
    cache: Mutex<HashMap<String, Arc<DepthMap>>>,
}

impl DepthStore {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            cache: Mutex::default(),
        }
    }

    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn insert(&self, id: impl Into<String>, map: DepthMap) {
        lock(&self.cache).insert(id.into(), Arc::new(map));
    }

    pub fn get(&self, id: &str) -> Option<Arc<DepthMap>> {
        if let Some(m) = lock(&self.cache).get(id) {
            return Some(m.clone());
        }
        let valid = !id.is_empty()
            && id != "."
            && id != ".."
            && id
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
        if !valid {
            return None;
        }
        let root = self.root.as_ref()?;
        let map = ["sbd", "png"].iter().find_map(|ext| {
            let path = root.join(format!("{id}.{ext}"));
            if !path.is_file() {
                return None;
            }
            raster::read_depth(&path)
                .map_err(|e| log::warn!("cannot load depth map {id}: {e}"))
                .ok()
        })?;
        let map = Arc::new(map);
        lock(&self.cache).insert(id.to_owned(), map.clone());
        Some(map)
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

struct Shared {
    store: DepthStore,
    sessions: Mutex<HashMap<String, Arc<Mutex<DialogState>>>>,
    next_session: AtomicU64,
    max_turns: u32,
}

impl Shared {
    fn handle(&self, req: Request) -> Response {
        match req {
            Request::Open {
                depth_map,
                max_turns,
            } => {
                let Some(map) = self.store.get(&depth_map) else {
                    return Response::error(format!("unknown_depth_map: {depth_map}"));
                };
                let id = format!("s{}", self.next_session.fetch_add(1, Ordering::Relaxed) + 1);
                let state = DialogState::new(id.clone(), map, max_turns.unwrap_or(self.max_turns));
                lock(&self.sessions).insert(id.clone(), Arc::new(Mutex::new(state)));
                Response {
                    ok: true,
                    kind: ResponseKind::Opened,
                    text: id.clone(),
                    session: Some(id),
                }
            }
            Request::Step { session, text } => {
                let Some(state) = lock(&self.sessions).get(&session).cloned() else {
                    return Response::error(format!("unknown_session: {session}"));
                };
                // Per-session lock serializes steps; other sessions proceed.
                let outcome = lock(&state).step(&text);
                let (kind, text) = match outcome {
                    Ok(StepOutcome::ToolResponse(t)) => (ResponseKind::ToolResponse, t),
                    Ok(StepOutcome::Final(t)) => (ResponseKind::Final, t),
                    Err(DialogError::SessionClosed(id)) => {
                        return Response::error(format!("session_closed: {id}"))
                    }
                };
                Response {
                    ok: true,
                    kind,
                    text,
                    session: Some(session),
                }
            }
            Request::Close { session } => match lock(&self.sessions).remove(&session) {
                Some(state) => {
                    lock(&state).close();
                    Response {
                        ok: true,
                        kind: ResponseKind::Closed,
                        text: session.clone(),
                        session: Some(session),
                    }
                }
                None => Response::error(format!("unknown_session: {session}")),
            },
        }
    }

    fn serve_connection(&self, stream: &mut TcpStream) -> io::Result<()> {
        while let Some(bytes) = read_frame_bytes(stream)? {
            let resp = match serde_json::from_slice::<Request>(&bytes) {
                Ok(req) => self.handle(req),
                Err(e) => Response::error(format!("bad_request: {e}")),
            };
            write_frame(stream, &resp)?;
        }
        Ok(())
    }
}

/// Open client sockets and their worker threads.
type Connections = Mutex<Vec<(TcpStream, JoinHandle<()>)>>;

/// Depth tool-call service over length-prefixed JSON.
pub struct DepthServer {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl DepthServer {
    pub fn bind(config: &ServerConfig) -> io::Result<Self> {
        if !config.store_root.is_dir() {
            return Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("depth store {} is not a directory", config.store_root.display()),
            ));
        }
        Self::bind_with_store(&config.listen, DepthStore::at(&config.store_root), config.max_turns)
    }

    pub fn bind_with_store(listen: &str, store: DepthStore, max_turns: u32) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                store,
                sessions: Mutex::default(),
                next_session: AtomicU64::new(0),
                max_turns,
            }),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Starts accepting connections on a background thread.
    pub fn spawn(self) -> io::Result<RunningServer> {
        let addr = self.listener.local_addr()?;
        self.listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Connections> = Arc::default();
        let acceptor = {
            let (stop, conns, shared) = (stop.clone(), conns.clone(), self.shared.clone());
            let listener = self.listener;
            thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            log::debug!("connection from {peer}");
                            if let Err(e) = accept(stream, &shared, &conns) {
                                log::warn!("dropping connection from {peer}: {e}");
                            }
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            thread::sleep(Duration::from_millis(10));
                        }
                        Err(e) => log::warn!("accept failed: {e}"),
                    }
                }
            })
        };
        log::info!("depth API listening on {addr}");
        Ok(RunningServer {
            addr,
            stop,
            acceptor: Some(acceptor),
            conns,
            shared: self.shared,
        })
    }
}

fn accept(
    stream: TcpStream,
    shared: &Arc<Shared>,
    conns: &Connections,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let handle = stream.try_clone()?;
    let shared = shared.clone();
    let worker = thread::spawn(move || {
        let mut stream = stream;
        if let Err(e) = shared.serve_connection(&mut stream) {
            log::debug!("connection ended: {e}");
        }
        // The clone kept for shutdown would otherwise hold the socket open.
        let _ = stream.shutdown(Shutdown::Both);
    });
    let mut conns = lock(conns);
    conns.retain(|(_, w)| !w.is_finished());
    conns.push((handle, worker));
    Ok(())
}

pub struct RunningServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    conns: Arc<Connections>,
    shared: Arc<Shared>,
}

impl RunningServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn open_sessions(&self) -> usize {
        lock(&self.shared.sessions).len()
    }

    /// Stops accepting, disconnects clients and closes every session.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        let conns: Vec<_> = lock(&self.conns).drain(..).collect();
        for (stream, worker) in conns {
            let _ = stream.shutdown(Shutdown::Both);
            let _ = worker.join();
        }
        let mut sessions = lock(&self.shared.sessions);
        for s in sessions.values() {
            lock(s).close();
        }
        sessions.clear();
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_now();
        }
    }
}
