//! Newline-delimited JSON transport.
//!
//! Every message is one JSON object on one line, tagged by `type`. A server
//! starts in a registration phase, accepts `register_model` messages, and
//! switches to serving on `start_serving`; the frontier is frozen from then
//! on. Inference replies carry the request id and the label, nothing else.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::endpoint::{InferReply, QueryEndpoint};
use crate::error::{Error, Result};
use crate::router::{DefenseConfig, QuerySpec, Router, RouterConfig, TelemetrySummary};
use crate::zoo::{build_frontier, GranularityConfig, ModelProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferErrorCode {
    InfeasibleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireMessage {
    RegisterModel {
        id: String,
        name: String,
        accuracy: f64,
        latency_ms: f64,
        num_classes: u32,
    },
    StartServing,
    InferRequest {
        request_id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        acc_min: Option<f64>,
        lat_max_ms: f64,
        input_id: u64,
    },
    InferResponse {
        request_id: u64,
        label: u32,
    },
    InferError {
        request_id: u64,
        code: InferErrorCode,
    },
    TelemetryRequest,
    TelemetryResponse {
        summary: TelemetrySummary,
    },
    Ack,
    Error {
        code: String,
        message: String,
    },
}

impl WireMessage {
    pub fn register(profile: &ModelProfile) -> Self {
        WireMessage::RegisterModel {
            id: profile.id.clone(),
            name: profile.name.clone(),
            accuracy: profile.accuracy,
            latency_ms: profile.latency,
            num_classes: profile.num_classes,
        }
    }

    fn error(err: &Error) -> Self {
        WireMessage::Error {
            code: error_code(err).to_string(),
            message: err.to_string(),
        }
    }
}

/// Stable code carried by `error` messages.
pub fn error_code(err: &Error) -> &'static str {
    match err {
        Error::Malformed(_) => "malformed",
        Error::OutOfRange(_) => "out_of_range",
        Error::RegistrationAfterStart => "registration_after_start",
        Error::NotServing => "not_serving",
        Error::TelemetryUnavailable => "telemetry_unavailable",
        Error::InvalidProfile { .. } => "invalid_profile",
        Error::DuplicateId(_) => "duplicate_id",
        Error::GranularityViolation(_) => "granularity_violation",
        Error::InvalidQuery(_) => "invalid_query",
        Error::InvalidDefense(_) | Error::EmptyFrontier => "invalid_defense",
        Error::Protocol(_) => "protocol",
        _ => "internal",
    }
}

fn code_to_error(code: &str, message: String) -> Error {
    match code {
        "telemetry_unavailable" => Error::TelemetryUnavailable,
        "registration_after_start" => Error::RegistrationAfterStart,
        "not_serving" => Error::NotServing,
        _ => Error::Remote {
            code: code.to_string(),
            message,
        },
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut out = serde_json::to_vec(msg).expect("wire messages always serialize");
    out.push(b'\n');
    out
}

pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
    let Some((&b'\n', body)) = bytes.split_last() else {
        return Err(Error::Malformed("missing trailing newline".into()));
    };
    if body.contains(&b'\n') {
        return Err(Error::Malformed("more than one line".into()));
    }
    let msg: WireMessage =
        serde_json::from_slice(body).map_err(|e| Error::Malformed(e.to_string()))?;
    check_ranges(&msg)?;
    Ok(msg)
}

fn check_ranges(msg: &WireMessage) -> Result<()> {
    if let WireMessage::InferRequest {
        acc_min,
        lat_max_ms,
        ..
    } = msg
    {
        if let Some(a) = acc_min {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::OutOfRange(format!("acc_min = {a}")));
            }
        }
        if !lat_max_ms.is_finite() || *lat_max_ms <= 0.0 {
            return Err(Error::OutOfRange(format!("lat_max_ms = {lat_max_ms}")));
        }
    }
    Ok(())
}

fn write_msg(w: &mut impl Write, msg: &WireMessage) -> Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one line including its newline; `None` on a clean EOF.
fn read_line(r: &mut impl BufRead) -> Result<Option<Vec<u8>>> {
    let mut buf = Vec::new();
    if r.read_until(b'\n', &mut buf)? == 0 {
        return Ok(None);
    }
    Ok(Some(buf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServeMode {
    /// Replies are delayed by the served model's profiled latency; no telemetry.
    Service,
    /// Virtual time; telemetry enabled.
    Experiment,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub granularity: GranularityConfig,
    pub mode: ServeMode,
    pub seed: u64,
    pub dataset_seed: u64,
    /// Privacy parameter; `None` serves undefended.
    pub epsilon: Option<f64>,
}

impl ServerConfig {
    pub fn new(granularity: GranularityConfig, mode: ServeMode, seed: u64) -> Self {
        Self {
            granularity,
            mode,
            seed,
            dataset_seed: 0,
            epsilon: None,
        }
    }

    pub fn with_epsilon(mut self, epsilon: Option<f64>) -> Self {
        self.epsilon = epsilon;
        self
    }
}

enum State {
    Registering(Vec<ModelProfile>),
    Serving(Box<Router>),
}

struct Shared {
    config: ServerConfig,
    state: Mutex<State>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn register(&self, profile: ModelProfile) -> Result<()> {
        let mut state = self.lock();
        let State::Registering(models) = &mut *state else {
            return Err(Error::RegistrationAfterStart);
        };
        profile.validate()?;
        if models.iter().any(|m| m.id == profile.id) {
            return Err(Error::DuplicateId(profile.id));
        }
        models.push(profile);
        Ok(())
    }

    fn start(&self) -> Result<DefenseConfig> {
        let mut state = self.lock();
        let State::Registering(models) = &*state else {
            return Err(Error::RegistrationAfterStart);
        };
        let frontier = build_frontier(models, &self.config.granularity)?;
        let defense = match self.config.epsilon {
            Some(eps) => DefenseConfig::for_frontier(&frontier, eps)?,
            None => DefenseConfig::disabled(),
        };
        let router_config = RouterConfig {
            seed: self.config.seed,
            dataset_seed: self.config.dataset_seed,
            defense,
        };
        *state = State::Serving(Box::new(Router::new(frontier, router_config)?));
        Ok(defense)
    }

    fn handle(&self, msg: WireMessage) -> WireMessage {
        match msg {
            WireMessage::RegisterModel {
                id,
                name,
                accuracy,
                latency_ms,
                num_classes,
            } => {
                let profile = ModelProfile {
                    id,
                    name,
                    accuracy,
                    latency: latency_ms,
                    num_classes,
                };
                match self.register(profile) {
                    Ok(()) => WireMessage::Ack,
                    Err(e) => WireMessage::error(&e),
                }
            }
            WireMessage::StartServing => match self.start() {
                Ok(_) => WireMessage::Ack,
                Err(e) => WireMessage::error(&e),
            },
            WireMessage::InferRequest {
                request_id,
                acc_min,
                lat_max_ms,
                input_id,
            } => self.infer(request_id, QuerySpec::new(acc_min, lat_max_ms, input_id)),
            WireMessage::TelemetryRequest => {
                if self.config.mode != ServeMode::Experiment {
                    return WireMessage::error(&Error::TelemetryUnavailable);
                }
                match &*self.lock() {
                    State::Serving(router) => WireMessage::TelemetryResponse {
                        summary: router.telemetry(),
                    },
                    State::Registering(_) => WireMessage::error(&Error::NotServing),
                }
            }
            other => WireMessage::error(&Error::Protocol(format!(
                "unexpected client message: {}",
                message_kind(&other)
            ))),
        }
    }

    fn infer(&self, request_id: u64, q: QuerySpec) -> WireMessage {
        let outcome = {
            let mut state = self.lock();
            let State::Serving(router) = &mut *state else {
                return WireMessage::error(&Error::NotServing);
            };
            match router.serve(&q) {
                Ok(o) => o,
                Err(e) => return WireMessage::error(&e),
            }
        };
        match outcome.label {
            Some(label) => {
                if self.config.mode == ServeMode::Service {
                    if let Some(ms) = outcome.served_latency {
                        thread::sleep(Duration::from_secs_f64(ms / 1000.0));
                    }
                }
                WireMessage::InferResponse { request_id, label }
            }
            None => WireMessage::InferError {
                request_id,
                code: InferErrorCode::InfeasibleSet,
            },
        }
    }
}

fn message_kind(msg: &WireMessage) -> &'static str {
    match msg {
        WireMessage::RegisterModel { .. } => "register_model",
        WireMessage::StartServing => "start_serving",
        WireMessage::InferRequest { .. } => "infer_request",
        WireMessage::InferResponse { .. } => "infer_response",
        WireMessage::InferError { .. } => "infer_error",
        WireMessage::TelemetryRequest => "telemetry_request",
        WireMessage::TelemetryResponse { .. } => "telemetry_response",
        WireMessage::Ack => "ack",
        WireMessage::Error { .. } => "error",
    }
}

fn serve_connection(shared: &Shared, stream: TcpStream) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    while let Some(line) = read_line(&mut reader)? {
        match decode(&line) {
            Ok(msg) => write_msg(&mut writer, &shared.handle(msg))?,
            Err(e @ Error::OutOfRange(_)) => write_msg(&mut writer, &WireMessage::error(&e))?,
            Err(e) => {
                write_msg(&mut writer, &WireMessage::error(&e))?;
                break;
            }
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
    Ok(())
}

/// A bound, not yet running server. Models may be registered in-process
/// before spawning, or over the wire afterwards.
pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: ServerConfig) -> Result<Self> {
        config.granularity.validate()?;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            shared: Arc::new(Shared {
                config,
                state: Mutex::new(State::Registering(Vec::new())),
            }),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn register(&self, profile: ModelProfile) -> Result<()> {
        self.shared.register(profile)
    }

    /// Freezes the frontier. Returns the effective defense configuration.
    pub fn start_serving(&self) -> Result<DefenseConfig> {
        self.shared.start()
    }

    /// Accepts connections on the calling thread until shut down.
    pub fn run(self) -> Result<()> {
        run_accept_loop(self.listener, self.shared, Arc::new(AtomicBool::new(false)))
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::clone(&self.shared);
        let flag = Arc::clone(&stop);
        let thread = thread::spawn(move || run_accept_loop(self.listener, self.shared, flag));
        Ok(ServerHandle {
            addr,
            stop,
            shared,
            thread: Some(thread),
        })
    }
}

fn run_accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
) -> Result<()> {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            let _ = serve_connection(&shared, stream);
        });
    }
    Ok(())
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Server-side counters regardless of mode; `None` before serving starts.
    pub fn telemetry(&self) -> Option<TelemetrySummary> {
        match &*self.shared.lock() {
            State::Serving(router) => Some(router.telemetry()),
            State::Registering(_) => None,
        }
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_and_join();
        }
    }
}

/// Client side of the protocol; usable as a query endpoint.
pub struct RemoteEndpoint {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
    granularity: Option<GranularityConfig>,
}

impl RemoteEndpoint {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            next_id: 0,
            granularity: None,
        })
    }

    /// Snap outgoing specs onto this grid before sending.
    pub fn with_granularity(mut self, g: GranularityConfig) -> Self {
        self.granularity = Some(g);
        self
    }

    pub fn request(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        write_msg(&mut self.writer, msg)?;
        let line = read_line(&mut self.reader)?
            .ok_or_else(|| Error::Protocol("connection closed by server".into()))?;
        decode(&line)
    }

    fn expect_ack(&mut self, msg: &WireMessage) -> Result<()> {
        match self.request(msg)? {
            WireMessage::Ack => Ok(()),
            WireMessage::Error { code, message } => Err(code_to_error(&code, message)),
            other => Err(unexpected(&other)),
        }
    }

    pub fn register_model(&mut self, profile: &ModelProfile) -> Result<()> {
        self.expect_ack(&WireMessage::register(profile))
    }

    pub fn start_serving(&mut self) -> Result<()> {
        self.expect_ack(&WireMessage::StartServing)
    }

    fn snap(&self, acc_min: Option<f64>, lat_max: f64) -> (Option<f64>, f64) {
        let Some(g) = &self.granularity else {
            return (acc_min, lat_max);
        };
        let lat = g.snap_lat_down(lat_max);
        (
            acc_min.map(|a| g.snap_acc_up(a).min(1.0)),
            if lat > 0.0 { lat } else { lat_max },
        )
    }
}

fn unexpected(msg: &WireMessage) -> Error {
    Error::Protocol(format!("unexpected reply: {}", message_kind(msg)))
}

impl QueryEndpoint for RemoteEndpoint {
    fn infer(&mut self, acc_min: Option<f64>, lat_max: f64, input: u64) -> Result<InferReply> {
        let (acc_min, lat_max_ms) = self.snap(acc_min, lat_max);
        let request_id = self.next_id;
        self.next_id += 1;
        let reply = self.request(&WireMessage::InferRequest {
            request_id,
            acc_min,
            lat_max_ms,
            input_id: input,
        })?;
        match reply {
            WireMessage::InferResponse {
                request_id: r,
                label,
            } if r == request_id => Ok(InferReply::Label(label)),
            WireMessage::InferError { request_id: r, .. } if r == request_id => {
                Ok(InferReply::Infeasible)
            }
            WireMessage::Error { code, message } => Err(code_to_error(&code, message)),
            other => Err(unexpected(&other)),
        }
    }

    fn telemetry(&mut self) -> Result<TelemetrySummary> {
        match self.request(&WireMessage::TelemetryRequest)? {
            WireMessage::TelemetryResponse { summary } => Ok(summary),
            WireMessage::Error { code, message } => Err(code_to_error(&code, message)),
            other => Err(unexpected(&other)),
        }
    }
}
