//! Hooks a running simulation can call: an exit-code classifier, a
//! request/reply daemon, and a step/classify/rewind driver.
//!
//! Wire format: one UTF-8 JSON object per LF-terminated line, one request in
//! flight per connection.
//!
//! ```text
//! {"op":"classify","path":"/tmp/frame.png"} -> {"label":1,"score":0.42,"model_id":"…","warm_up":false}
//! {"op":"ping"}                             -> {"pong":true,"model_id":"…"}
//! {"op":"shutdown"}                         -> {"shutdown":true}
//! anything that fails                        -> {"error":"…"}
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
#[cfg(unix)]
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::imagery::{save_png, ImageTensor, SynthSeries};
use crate::pipelines::{OfflineBundle, PipelineError};
use crate::seed::mix_seed;
use crate::Label;

/// Environment variable naming the default daemon endpoint.
pub const ENDPOINT_ENV: &str = "SENTINEL_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub score: f64,
    pub model_id: String,
    pub warm_up: bool,
}

impl Verdict {
    /// Process exit code for this verdict: 0 for valid, 1 for anomalous.
    pub fn exit_code(&self) -> i32 {
        match self.label {
            Label::Valid => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

#[derive(Debug, Error)]
pub enum SentinelError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid endpoint `{0}`")]
    BadEndpoint(String),
    #[error("cannot bind {endpoint}: {source}")]
    Bind { endpoint: String, source: io::Error },
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("timed out waiting for the daemon")]
    Timeout,
    #[error("daemon error: {0}")]
    InBand(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint {checkpoint} failed {attempts} times; giving up")]
    RewindLimitExceeded {
        checkpoint: usize,
        attempts: usize,
        log: Box<RunLog>,
    },
    #[error("invalid driver configuration: {0}")]
    InvalidConfig(String),
}

/// Classifies one image with a loaded bundle.
pub fn classify_with(
    bundle: &OfflineBundle<f64>,
    model_id: &str,
    path: &Path,
) -> Result<Verdict, PipelineError> {
    let (label, score) = bundle.classify_path(path)?;
    Ok(Verdict {
        label,
        score,
        model_id: model_id.to_string(),
        warm_up: bundle.warm_up,
    })
}

/// Spawn-per-image entry point. Prints the verdict as one JSON line to `out`
/// and returns the exit code: 0 valid, 1 anomalous, 2 on any error (with a
/// diagnostic on `err`).
pub fn classify_cli(
    bundle_path: &Path,
    image_path: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let result = OfflineBundle::<f64>::load(bundle_path)
        .and_then(|b| classify_with(&b, &b.model_id(), image_path));
    match result {
        Ok(v) => match writeln!(out, "{}", v.to_json_line()) {
            Ok(()) => v.exit_code(),
            Err(e) => {
                let _ = writeln!(err, "error: cannot write verdict: {e}");
                2
            }
        },
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

// ---------------------------------------------------------------------------
// Endpoints and streams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`.
    Tcp(String),
    /// Filesystem path of a Unix-domain socket.
    Unix(PathBuf),
}

impl Endpoint {
    /// `unix:PATH` or anything containing `/` is a local socket; `tcp:` is
    /// an optional prefix for `host:port`.
    pub fn parse(s: &str) -> Result<Self, SentinelError> {
        let s = s.trim();
        if let Some(p) = s.strip_prefix("unix:") {
            return Ok(Endpoint::Unix(PathBuf::from(p)));
        }
        if s.contains('/') {
            return Ok(Endpoint::Unix(PathBuf::from(s)));
        }
        let s = s.strip_prefix("tcp:").unwrap_or(s);
        match s.rsplit_once(':') {
            Some((_, port)) if port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(s.to_string())),
            _ => Err(SentinelError::BadEndpoint(s.to_string())),
        }
    }

    pub fn from_env() -> Option<Result<Self, SentinelError>> {
        std::env::var(ENDPOINT_ENV).ok().map(|s| Self::parse(&s))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "{a}"),
            Endpoint::Unix(p) => write!(f, "unix:{}", p.display()),
        }
    }
}

enum Stream {
    Tcp(TcpStream),
    #[cfg(unix)]
    Unix(UnixStream),
}

impl Stream {
    fn try_clone(&self) -> io::Result<Stream> {
        match self {
            Stream::Tcp(s) => s.try_clone().map(Stream::Tcp),
            #[cfg(unix)]
            Stream::Unix(s) => s.try_clone().map(Stream::Unix),
        }
    }

    fn set_timeouts(&self, t: Option<Duration>) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => {
                s.set_read_timeout(t)?;
                s.set_write_timeout(t)
            }
            #[cfg(unix)]
            Stream::Unix(s) => {
                s.set_read_timeout(t)?;
                s.set_write_timeout(t)
            }
        }
    }

    fn shutdown(&self) {
        let _ = match self {
            Stream::Tcp(s) => s.shutdown(Shutdown::Both),
            #[cfg(unix)]
            Stream::Unix(s) => s.shutdown(Shutdown::Both),
        };
    }
}

impl io::Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.read(buf),
            #[cfg(unix)]
            Stream::Unix(s) => s.read(buf),
        }
    }
}

impl io::Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.write(buf),
            #[cfg(unix)]
            Stream::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.flush(),
            #[cfg(unix)]
            Stream::Unix(s) => s.flush(),
        }
    }
}

fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Stream, SentinelError> {
    let refused = || SentinelError::ConnectionRefused(endpoint.to_string());
    let map = |e: io::Error| match e.kind() {
        io::ErrorKind::ConnectionRefused | io::ErrorKind::NotFound => refused(),
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => SentinelError::Timeout,
        _ => SentinelError::Io(e),
    };
    match endpoint {
        Endpoint::Tcp(addr) => {
            let mut last = None;
            for a in addr
                .to_socket_addrs()
                .map_err(|_| SentinelError::BadEndpoint(addr.clone()))?
            {
                match TcpStream::connect_timeout(&a, timeout) {
                    Ok(s) => {
                        s.set_nodelay(true).ok();
                        return Ok(Stream::Tcp(s));
                    }
                    Err(e) => last = Some(e),
                }
            }
            Err(last
                .map(map)
                .unwrap_or_else(|| SentinelError::BadEndpoint(addr.clone())))
        }
        #[cfg(unix)]
        Endpoint::Unix(p) => UnixStream::connect(p).map(Stream::Unix).map_err(map),
        #[cfg(not(unix))]
        Endpoint::Unix(_) => Err(SentinelError::BadEndpoint(endpoint.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Daemon
// ---------------------------------------------------------------------------

enum Listener {
    Tcp(TcpListener),
    #[cfg(unix)]
    Unix(UnixListener, PathBuf),
}

/// A bound daemon. The bundle is loaded once and shared read-only by every
/// connection thread.
pub struct Server {
    listener: Listener,
    bundle: Arc<OfflineBundle<f64>>,
    model_id: Arc<str>,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(bundle: OfflineBundle<f64>, endpoint: &Endpoint) -> Result<Self, SentinelError> {
        let bind_err = |source| SentinelError::Bind {
            endpoint: endpoint.to_string(),
            source,
        };
        let listener = match endpoint {
            Endpoint::Tcp(addr) => {
                Listener::Tcp(TcpListener::bind(addr.as_str()).map_err(bind_err)?)
            }
            #[cfg(unix)]
            Endpoint::Unix(p) => {
                Listener::Unix(UnixListener::bind(p).map_err(bind_err)?, p.clone())
            }
            #[cfg(not(unix))]
            Endpoint::Unix(_) => return Err(SentinelError::BadEndpoint(endpoint.to_string())),
        };
        let model_id: Arc<str> = bundle.model_id().into();
        Ok(Self {
            listener,
            bundle: Arc::new(bundle),
            model_id,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    /// The bound address, with the actual port when bound to port 0.
    pub fn local_endpoint(&self) -> Endpoint {
        match &self.listener {
            Listener::Tcp(l) => {
                Endpoint::Tcp(l.local_addr().map(|a| a.to_string()).unwrap_or_default())
            }
            #[cfg(unix)]
            Listener::Unix(_, p) => Endpoint::Unix(p.clone()),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Accepts connections until a `shutdown` request arrives.
    pub fn run(self) -> Result<(), SentinelError> {
        let wake = self.local_endpoint();
        log::info!("serving model {} on {}", self.model_id, wake);
        loop {
            let stream = match &self.listener {
                Listener::Tcp(l) => l.accept().map(|(s, _)| Stream::Tcp(s)),
                #[cfg(unix)]
                Listener::Unix(l, _) => l.accept().map(|(s, _)| Stream::Unix(s)),
            };
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let ctx = Connection {
                bundle: Arc::clone(&self.bundle),
                model_id: Arc::clone(&self.model_id),
                stop: Arc::clone(&self.stop),
                wake: wake.clone(),
            };
            std::thread::spawn(move || {
                if let Err(e) = ctx.serve(stream) {
                    log::debug!("connection closed: {e}");
                }
            });
        }
        #[cfg(unix)]
        if let Listener::Unix(_, p) = &self.listener {
            let _ = std::fs::remove_file(p);
        }
        Ok(())
    }
}

struct Connection {
    bundle: Arc<OfflineBundle<f64>>,
    model_id: Arc<str>,
    stop: Arc<AtomicBool>,
    wake: Endpoint,
}

impl Connection {
    fn serve(&self, stream: Stream) -> io::Result<()> {
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Ok(());
            }
            if line.trim().is_empty() {
                continue;
            }
            let (reply, stop) = self.handle(&line);
            writer.write_all(reply.to_string().as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
            if stop {
                self.stop.store(true, Ordering::SeqCst);
                // Unblock the accept loop so it sees the flag.
                let _ = connect(&self.wake, Duration::from_secs(1));
                writer.shutdown();
                return Ok(());
            }
        }
    }

    fn handle(&self, line: &str) -> (Value, bool) {
        let req: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return (json!({ "error": format!("malformed request: {e}") }), false),
        };
        match req.get("op").and_then(Value::as_str) {
            Some("ping") => (json!({ "pong": true, "model_id": &*self.model_id }), false),
            Some("shutdown") => (json!({ "shutdown": true }), true),
            Some("classify") => {
                let Some(path) = req.get("path").and_then(Value::as_str) else {
                    return (
                        json!({ "error": "classify requires a string `path`" }),
                        false,
                    );
                };
                match classify_with(&self.bundle, &self.model_id, Path::new(path)) {
                    Ok(v) => (serde_json::to_value(v).expect("verdict serializes"), false),
                    Err(e) => (json!({ "error": e.to_string() }), false),
                }
            }
            Some(other) => (json!({ "error": format!("unknown op `{other}`") }), false),
            None => (json!({ "error": "request lacks an `op` field" }), false),
        }
    }
}

/// Loads the bundle once, binds, and serves until shutdown.
pub fn serve(bundle_path: &Path, endpoint: &Endpoint) -> Result<(), SentinelError> {
    let bundle = OfflineBundle::load(bundle_path)?;
    Server::bind(bundle, endpoint)?.run()
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// One connection to a daemon; requests strictly alternate with replies.
pub struct Client {
    writer: Stream,
    reader: BufReader<Stream>,
}

impl Client {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self, SentinelError> {
        let stream = connect(endpoint, timeout)?;
        stream.set_timeouts(Some(timeout))?;
        let writer = stream.try_clone()?;
        Ok(Self {
            writer,
            reader: BufReader::new(stream),
        })
    }

    fn request(&mut self, req: &Value) -> Result<Value, SentinelError> {
        let io_map = |e: io::Error| match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => SentinelError::Timeout,
            _ => SentinelError::Io(e),
        };
        let mut line = req.to_string();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(io_map)?;
        self.writer.flush().map_err(io_map)?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply).map_err(io_map)? == 0 {
            return Err(SentinelError::Protocol(
                "daemon closed the connection".into(),
            ));
        }
        let v: Value =
            serde_json::from_str(&reply).map_err(|e| SentinelError::Protocol(e.to_string()))?;
        if let Some(err) = v.get("error").and_then(Value::as_str) {
            return Err(SentinelError::InBand(err.to_string()));
        }
        Ok(v)
    }

    pub fn classify(&mut self, path: &Path) -> Result<Verdict, SentinelError> {
        let path = path
            .to_str()
            .ok_or_else(|| SentinelError::Protocol("image path is not UTF-8".into()))?;
        let v = self.request(&json!({ "op": "classify", "path": path }))?;
        serde_json::from_value(v).map_err(|e| SentinelError::Protocol(e.to_string()))
    }

    /// Returns the daemon's model id.
    pub fn ping(&mut self) -> Result<String, SentinelError> {
        let v = self.request(&json!({ "op": "ping" }))?;
        v.get("model_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| SentinelError::Protocol("ping reply lacks model_id".into()))
    }

    pub fn shutdown(mut self) -> Result<(), SentinelError> {
        self.request(&json!({ "op": "shutdown" })).map(|_| ())
    }
}

/// Connects, sends one classify request, and waits for its reply.
pub fn client_classify(
    endpoint: &Endpoint,
    path: &Path,
    timeout: Duration,
) -> Result<Verdict, SentinelError> {
    Client::connect(endpoint, timeout)?.classify(path)
}

// ---------------------------------------------------------------------------
// Workflow driver
// ---------------------------------------------------------------------------

/// Anything that can judge a freshly rendered frame.
pub trait Detector {
    fn classify(&mut self, image: &ImageTensor, step: usize) -> Result<Verdict, SentinelError>;
}

impl<F> Detector for F
where
    F: FnMut(&ImageTensor, usize) -> Result<Verdict, SentinelError>,
{
    fn classify(&mut self, image: &ImageTensor, step: usize) -> Result<Verdict, SentinelError> {
        self(image, step)
    }
}

/// Classifies in-process with a loaded bundle.
pub struct BundleDetector {
    bundle: OfflineBundle<f64>,
    model_id: String,
}

impl BundleDetector {
    pub fn new(bundle: OfflineBundle<f64>) -> Self {
        let model_id = bundle.model_id();
        Self { bundle, model_id }
    }
}

impl Detector for BundleDetector {
    fn classify(&mut self, image: &ImageTensor, _step: usize) -> Result<Verdict, SentinelError> {
        let (label, score) = self.bundle.classify_image(image)?;
        Ok(Verdict {
            label,
            score,
            model_id: self.model_id.clone(),
            warm_up: self.bundle.warm_up,
        })
    }
}

/// Writes each frame as a PNG under `workdir` and asks a daemon about it.
pub struct EndpointDetector {
    client: Client,
    workdir: PathBuf,
}

impl EndpointDetector {
    pub fn connect(
        endpoint: &Endpoint,
        workdir: PathBuf,
        timeout: Duration,
    ) -> Result<Self, SentinelError> {
        std::fs::create_dir_all(&workdir)?;
        Ok(Self {
            client: Client::connect(endpoint, timeout)?,
            workdir,
        })
    }
}

impl Detector for EndpointDetector {
    fn classify(&mut self, image: &ImageTensor, step: usize) -> Result<Verdict, SentinelError> {
        let path = self.workdir.join(format!("step_{step:06}.png"));
        save_png(image, &path).map_err(|source| PipelineError::Image {
            stage: "writing frame",
            source,
        })?;
        let path = std::fs::canonicalize(&path)?;
        self.client.classify(&path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmUpPolicy {
    /// Act on every verdict.
    Trust,
    /// Disregard `-1` verdicts from models flagged as warm-up.
    IgnoreNegative,
}

impl std::str::FromStr for WarmUpPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trust" => Ok(WarmUpPolicy::Trust),
            "ignore-negative" => Ok(WarmUpPolicy::IgnoreNegative),
            other => Err(format!("unknown warm-up policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    /// Steps run are `1..=steps`.
    pub steps: usize,
    /// Step whose first rendering carries the ray.
    pub inject_at: Option<usize>,
    /// A checkpoint is written after every step that is a multiple of this.
    pub checkpoint_every: usize,
    /// Failures at one checkpoint that abort the run.
    pub max_attempts: usize,
    pub policy: WarmUpPolicy,
    pub series: SynthSeries,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            inject_at: None,
            checkpoint_every: 10,
            max_attempts: 3,
            policy: WarmUpPolicy::Trust,
            series: SynthSeries::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepAction {
    Continue,
    /// A warm-up `-1` that the policy disregarded.
    IgnoredWarmUp,
    Rewind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogEvent {
    Step {
        step: usize,
        generation: u64,
        injected: bool,
        verdict: Verdict,
        action: StepAction,
    },
    Checkpoint {
        step: usize,
    },
    Rewind {
        from: usize,
        to: usize,
        failures: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub events: Vec<LogEvent>,
    pub completed: bool,
}

impl RunLog {
    pub fn rewinds(&self) -> Vec<(usize, usize)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Rewind { from, to, .. } => Some((*from, *to)),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }
}

/// Simulates the blocking loop: render step `s`, classify, continue on `+1`;
/// on `-1` roll back to the last checkpoint and re-render the lost steps
/// with a fresh seed generation. The ray is injected only on the first
/// rendering of `inject_at`.
pub fn workflow_driver(
    config: &DriverConfig,
    detector: &mut dyn Detector,
) -> Result<RunLog, SentinelError> {
    if config.checkpoint_every == 0 || config.max_attempts == 0 {
        return Err(SentinelError::InvalidConfig(
            "checkpoint interval and attempt limit must be positive".into(),
        ));
    }
    let mut log = RunLog::default();
    let mut generation = 0u64;
    let mut injected_once = false;
    let mut failures: std::collections::HashMap<usize, usize> = Default::default();
    let mut step = 1;
    while step <= config.steps {
        let inject = config.inject_at == Some(step) && !injected_once;
        injected_once |= inject;
        let mut frame = config.series.frame_config(step, inject.then_some(0));
        frame.seed = mix_seed(mix_seed(config.series.base.seed, generation), step as u64);
        let (image, _) = crate::imagery::synth_image(&frame);
        let verdict = detector.classify(&image, step)?;
        let action = match (verdict.label, verdict.warm_up, config.policy) {
            (Label::Valid, _, _) => StepAction::Continue,
            (Label::Anomalous, true, WarmUpPolicy::IgnoreNegative) => StepAction::IgnoredWarmUp,
            (Label::Anomalous, _, _) => StepAction::Rewind,
        };
        log.events.push(LogEvent::Step {
            step,
            generation,
            injected: inject,
            verdict,
            action,
        });
        if action == StepAction::Rewind {
            let checkpoint = (step - 1) / config.checkpoint_every * config.checkpoint_every;
            let count = failures.entry(checkpoint).or_insert(0);
            *count += 1;
            if *count >= config.max_attempts {
                return Err(SentinelError::RewindLimitExceeded {
                    checkpoint,
                    attempts: *count,
                    log: Box::new(log),
                });
            }
            log.events.push(LogEvent::Rewind {
                from: step,
                to: checkpoint,
                failures: *count,
            });
            generation += 1;
            step = checkpoint + 1;
            continue;
        }
        if step % config.checkpoint_every == 0 {
            log.events.push(LogEvent::Checkpoint { step });
        }
        step += 1;
    }
    log.completed = true;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(label: Label, warm_up: bool) -> Verdict {
        Verdict {
            label,
            score: 0.5,
            model_id: "m".into(),
            warm_up,
        }
    }

    fn small_series() -> SynthSeries {
        let mut s = SynthSeries::with_seed(3);
        s.base.height = 16;
        s.base.width = 8;
        s
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            Endpoint::parse("127.0.0.1:5555").unwrap(),
            Endpoint::Tcp("127.0.0.1:5555".into())
        );
        assert_eq!(
            Endpoint::parse("tcp:localhost:1").unwrap(),
            Endpoint::Tcp("localhost:1".into())
        );
        assert_eq!(
            Endpoint::parse("unix:s.sock").unwrap(),
            Endpoint::Unix("s.sock".into())
        );
        assert_eq!(
            Endpoint::parse("/tmp/s.sock").unwrap(),
            Endpoint::Unix("/tmp/s.sock".into())
        );
        assert!(Endpoint::parse("nohost").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(verdict(Label::Valid, false).exit_code(), 0);
        assert_eq!(verdict(Label::Anomalous, false).exit_code(), 1);
        let line = verdict(Label::Anomalous, true).to_json_line();
        assert_eq!(
            line,
            r#"{"label":-1,"score":0.5,"model_id":"m","warm_up":true}"#
        );
    }

    #[test]
    fn driver_rewinds_once_on_injection() {
        let cfg = DriverConfig {
            steps: 30,
            inject_at: Some(20),
            series: small_series(),
            ..DriverConfig::default()
        };
        let mut det = |img: &ImageTensor, _s: usize| {
            // The ray turns the top-right corner red.
            let [r, g, _] = img.pixel(2, img.width() - 2);
            Ok(verdict(
                if r > 200 && g < 60 {
                    Label::Anomalous
                } else {
                    Label::Valid
                },
                false,
            ))
        };
        let log = workflow_driver(&cfg, &mut det).unwrap();
        assert!(log.completed);
        assert_eq!(log.rewinds(), vec![(20, 10)]);
    }

    #[test]
    fn driver_gives_up_after_limit() {
        let cfg = DriverConfig {
            steps: 30,
            series: small_series(),
            ..DriverConfig::default()
        };
        let mut det = |_: &ImageTensor, _s: usize| Ok(verdict(Label::Anomalous, false));
        match workflow_driver(&cfg, &mut det) {
            Err(SentinelError::RewindLimitExceeded {
                checkpoint: 0,
                attempts: 3,
                log,
            }) => {
                assert_eq!(log.rewinds(), vec![(1, 0), (1, 0)]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let cfg = DriverConfig {
            policy: WarmUpPolicy::IgnoreNegative,
            ..cfg
        };
        let mut det = |_: &ImageTensor, _s: usize| Ok(verdict(Label::Anomalous, true));
        let log = workflow_driver(&cfg, &mut det).unwrap();
        assert!(log.completed && log.rewinds().is_empty());
    }
}
