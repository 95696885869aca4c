//! HTTP transport for prior providers: an oracle-backed server and a
//! blocking client that implements [`PriorProvider`].

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use blursplat::image::Image;
use blursplat::lie::PoseSE3;
use blursplat::priors::{
    Capabilities, DeblurRequest, GroundTruthOracle, NoisyOracle, PriorProvider, ProviderError,
    RepairRequest, DEFAULT_T0,
};
use serde::{Deserialize, Serialize};
use std::net::SocketAddr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DeblurBody {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseSE3>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RepairBody {
    pub image: String,
    pub reference: String,
    #[serde(default = "default_t0")]
    pub t0: u32,
    pub pose: PoseSE3,
}

fn default_t0() -> u32 {
    DEFAULT_T0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageBody {
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub fn encode_image(img: &Image) -> Result<String, ProviderError> {
    let png = img
        .to_png(true)
        .map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
    Ok(B64.encode(png))
}

pub fn decode_image(text: &str) -> Result<Image, String> {
    let bytes = B64.decode(text).map_err(|e| format!("invalid base64: {e}"))?;
    Image::from_png(&bytes).map_err(|e| format!("invalid PNG: {e}"))
}

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Seed of the noise stream when a request asks for `sigma`.
    pub seed: u64,
    /// Requests whose oracle work exceeds this answer 504.
    pub deadline: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            seed: 0,
            deadline: Duration::from_secs(30),
        }
    }
}

#[derive(Clone)]
struct AppState {
    oracle: GroundTruthOracle,
    opts: ServeOptions,
}

#[derive(Debug, Deserialize)]
struct NoiseQuery {
    sigma: Option<f64>,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError(
            status,
            ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        )
    }

    fn malformed(path: &str, message: impl std::fmt::Display) -> Self {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "malformed_request",
            format!("{path}: {message}"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<ProviderError> for ApiError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::InvalidRequest(m) => ApiError::malformed("request", m),
            ProviderError::Unsupported(what) => {
                ApiError::new(StatusCode::NOT_IMPLEMENTED, "unsupported", what)
            }
            ProviderError::Timeout => {
                ApiError::new(StatusCode::GATEWAY_TIMEOUT, "timeout", "oracle timed out")
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::malformed(&path, e.into_inner())
    })
}

fn field_image(name: &str, text: &str) -> Result<Image, ApiError> {
    decode_image(text).map_err(|m| ApiError::malformed(name, m))
}

fn provider(state: &AppState, sigma: Option<f64>) -> Result<Box<dyn PriorProvider>, ApiError> {
    match sigma {
        None => Ok(Box::new(state.oracle.clone())),
        Some(s) => NoisyOracle::new(state.oracle.clone(), s, state.opts.seed)
            .map(|p| Box::new(p) as Box<dyn PriorProvider>)
            .map_err(|e| ApiError::malformed("sigma", e)),
    }
}

async fn run_blocking<F>(deadline: Duration, f: F) -> Result<Image, ApiError>
where
    F: FnOnce() -> Result<Image, ProviderError> + Send + 'static,
{
    let started = std::time::Instant::now();
    let result = tokio::time::timeout(deadline, tokio::task::spawn_blocking(f)).await;
    // late answers count as timeouts too
    if started.elapsed() > deadline {
        return Err(ProviderError::Timeout.into());
    }
    match result {
        Err(_) => Err(ProviderError::Timeout.into()),
        Ok(Err(join)) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            join.to_string(),
        )),
        Ok(Ok(r)) => Ok(r?),
    }
}

fn respond(img: Image) -> Result<Json<ImageBody>, ApiError> {
    Ok(Json(ImageBody {
        image: encode_image(&img)?,
    }))
}

async fn capabilities(State(s): State<AppState>) -> Json<Capabilities> {
    Json(s.oracle.capabilities())
}

async fn deblur(
    State(s): State<AppState>,
    Query(q): Query<NoiseQuery>,
    body: Bytes,
) -> Result<Json<ImageBody>, ApiError> {
    let b: DeblurBody = parse(&body)?;
    let req = DeblurRequest {
        image: field_image("image", &b.image)?,
        frame: b.frame,
        pose: b.pose,
    };
    let p = provider(&s, q.sigma)?;
    respond(run_blocking(s.opts.deadline, move || p.deblur(&req)).await?)
}

async fn repair(
    State(s): State<AppState>,
    Query(q): Query<NoiseQuery>,
    body: Bytes,
) -> Result<Json<ImageBody>, ApiError> {
    let b: RepairBody = parse(&body)?;
    let req = RepairRequest {
        image: field_image("image", &b.image)?,
        reference: field_image("reference", &b.reference)?,
        t0: b.t0,
        pose: b.pose,
    };
    let p = provider(&s, q.sigma)?;
    respond(run_blocking(s.opts.deadline, move || p.repair(&req)).await?)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "unknown route")
}

pub fn router(oracle: GroundTruthOracle, opts: ServeOptions) -> Router {
    Router::new()
        .route("/v1/capabilities", get(capabilities))
        .route("/v1/deblur", post(deblur))
        .route("/v1/repair", post(repair))
        .fallback(not_found)
        .with_state(AppState { oracle, opts })
}

/// Serves until the process exits.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}

/// A server on its own runtime thread, stopped on drop.
pub struct LocalServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl LocalServer {
    pub fn start(
        oracle: GroundTruthOracle,
        opts: ServeOptions,
        bind: SocketAddr,
    ) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(bind)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(oracle, opts);
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(LocalServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for LocalServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Appended as `?sigma=` to deblur and repair requests.
    pub sigma: Option<f64>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://127.0.0.1:8750".into(),
            timeout_ms: 30_000,
            retries: 3,
            backoff_ms: 100,
            max_in_flight: 4,
            sigma: None,
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.free.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Client for a prior service. Bounded in-flight requests; transport errors
/// and 5xx answers are retried with linear backoff, 4xx answers are not.
pub struct RemoteProvider {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    caps: Capabilities,
    sem: Arc<Semaphore>,
}

impl RemoteProvider {
    pub fn connect(cfg: RemoteConfig) -> Result<Self, ProviderError> {
        if cfg.max_in_flight == 0 {
            return Err(ProviderError::InvalidRequest("max_in_flight must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let sem = Arc::new(Semaphore {
            free: Mutex::new(cfg.max_in_flight),
            cv: Condvar::new(),
        });
        let mut p = RemoteProvider {
            cfg,
            agent,
            caps: Capabilities {
                deblur: false,
                repair: false,
                features: false,
            },
            sem,
        };
        let text = p.with_retries(|| p.call("GET", "/v1/capabilities", None))?;
        p.caps = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Internal(format!("capabilities: {e}")))?;
        Ok(p)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        let base = self.cfg.base_url.trim_end_matches('/');
        match (path, self.cfg.sigma) {
            ("/v1/capabilities", _) | (_, None) => format!("{base}{path}"),
            (_, Some(s)) => format!("{base}{path}?sigma={s}"),
        }
    }

    fn call(&self, method: &str, path: &str, body: Option<&serde_json::Value>) -> Result<String, ProviderError> {
        let _permit = self.sem.acquire();
        let url = self.url(path);
        let result = match (method, body) {
            ("GET", _) => self.agent.get(&url).call(),
            (_, Some(b)) => self.agent.post(&url).send_json(b),
            (_, None) => self.agent.post(&url).send_empty(),
        };
        let mut resp = result.map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout,
            other => ProviderError::Transport {
                message: other.to_string(),
                retryable: true,
            },
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(256 << 20)
            .read_to_string()
            .map_err(|e| ProviderError::Transport {
                message: e.to_string(),
                retryable: true,
            })?;
        if status == 200 {
            return Ok(text);
        }
        let detail = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| format!("{}: {}", b.code, b.message))
            .unwrap_or(text);
        Err(match status {
            422 | 400 => ProviderError::InvalidRequest(detail),
            501 => ProviderError::Unsupported("remote capability"),
            504 => ProviderError::Timeout,
            s if s >= 500 => ProviderError::Transport {
                message: format!("HTTP {s}: {detail}"),
                retryable: true,
            },
            s => ProviderError::Transport {
                message: format!("HTTP {s}: {detail}"),
                retryable: false,
            },
        })
    }

    fn with_retries(&self, f: impl Fn() -> Result<String, ProviderError>) -> Result<String, ProviderError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.cfg.retries => {
                    attempt += 1;
                    log::warn!("prior request failed ({e}), retry {attempt}");
                    std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms * attempt as u64));
                }
                other => return other,
            }
        }
    }

    fn image_call(&self, path: &str, body: serde_json::Value) -> Result<Image, ProviderError> {
        let text = self.with_retries(|| self.call("POST", path, Some(&body)))?;
        let b: ImageBody = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Internal(format!("response: {e}")))?;
        decode_image(&b.image).map_err(ProviderError::Internal)
    }
}

impl PriorProvider for RemoteProvider {
    fn identity(&self) -> String {
        format!("remote:{}", self.cfg.base_url)
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn deblur(&self, req: &DeblurRequest) -> Result<Image, ProviderError> {
        if !self.caps.deblur {
            return Err(ProviderError::Unsupported("deblur"));
        }
        let body = DeblurBody {
            image: encode_image(&req.image)?,
            frame: req.frame,
            pose: req.pose,
        };
        self.image_call("/v1/deblur", serde_json::to_value(body).expect("serializes"))
    }

    fn repair(&self, req: &RepairRequest) -> Result<Image, ProviderError> {
        if !self.caps.repair {
            return Err(ProviderError::Unsupported("repair"));
        }
        let body = RepairBody {
            image: encode_image(&req.image)?,
            reference: encode_image(&req.reference)?,
            t0: req.t0,
            pose: req.pose,
        };
        self.image_call("/v1/repair", serde_json::to_value(body).expect("serializes"))
    }
}
