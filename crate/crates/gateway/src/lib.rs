//! HTTP front end for the firewall.
//!
//! `GET /resource?id=<token>&resubmit=<bool>` answers 200 or 403 with the
//! verdict as JSON. `/admin/...` exposes the device ledger. The admin routes
//! carry no authentication, which is why the default bind address is
//! loopback.

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, RawQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use spare_core::token::{extract_token, KeyConfig};
use spare_core::{
    DeviceLedger, FirewallConfig, FirewallPolicy, KeyMaterial, SharedFirewall, Verdict,
};
use tokio::net::TcpListener;
use tokio::sync::watch;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_SNAPSHOT_INTERVAL: u64 = 30;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("snapshot {path} is unusable: {message}")]
    Snapshot { path: PathBuf, message: String },
    #[error("server error: {0}")]
    Serve(#[from] std::io::Error),
}

/// Seconds since the Unix epoch, UTC.
pub trait Clock: Send + Sync + 'static {
    fn now(&self) -> i64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }
}

/// Settable clock for tests and replays.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicI64>);

impl ManualClock {
    pub fn new(now: i64) -> Self {
        ManualClock(Arc::new(AtomicI64::new(now)))
    }

    pub fn set(&self, now: i64) {
        self.0.store(now, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen_address: String,
    pub firewall: FirewallConfig,
    pub snapshot_path: Option<PathBuf>,
    pub snapshot_interval: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServiceFile {
    #[serde(default = "default_listen")]
    listen_address: String,
    key: KeyConfig,
    #[serde(default)]
    firewall: FirewallPolicy,
    snapshot_path: Option<PathBuf>,
    #[serde(default = "default_interval")]
    snapshot_interval: u64,
}

fn default_listen() -> String {
    DEFAULT_LISTEN.into()
}

fn default_interval() -> u64 {
    DEFAULT_SNAPSHOT_INTERVAL
}

impl ServiceConfig {
    pub fn new(firewall: FirewallConfig) -> Self {
        ServiceConfig {
            listen_address: DEFAULT_LISTEN.into(),
            firewall,
            snapshot_path: None,
            snapshot_interval: DEFAULT_SNAPSHOT_INTERVAL,
        }
    }

    /// Top-level `listen_address`, `snapshot_path`, `snapshot_interval`,
    /// plus `[key]` and `[firewall]` tables as in scenario files. Unknown
    /// top-level keys other than scenario sections are errors.
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        // Scenario files double as service configs.
        for k in [
            "name",
            "seed",
            "base_url",
            "benign",
            "malicious",
            "adversary",
        ] {
            value.remove(k);
        }
        let file: ServiceFile = value
            .try_into()
            .map_err(|e: toml::de::Error| ServiceError::Config(e.to_string()))?;
        let key: KeyMaterial = file
            .key
            .try_into()
            .map_err(|e: spare_core::token::TokenError| ServiceError::Config(e.to_string()))?;
        let firewall =
            FirewallConfig::new(file.firewall, key).map_err(|e| ServiceError::Config(e.0))?;
        let cfg = ServiceConfig {
            listen_address: file.listen_address,
            firewall,
            snapshot_path: file.snapshot_path,
            snapshot_interval: file.snapshot_interval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|source| ServiceError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.snapshot_interval == 0 {
            return Err(ServiceError::Config("snapshot_interval must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct AppState {
    pub firewall: Arc<SharedFirewall>,
    pub clock: Arc<dyn Clock>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceView {
    pub count_today: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub blocked_until: Option<i64>,
    pub last_request_time: Option<i64>,
}

/// Wire body of `/resource`; `reason` is present only on rejection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictBody {
    pub verdict: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

impl From<Verdict> for VerdictBody {
    fn from(v: Verdict) -> Self {
        if v.is_accept() {
            VerdictBody {
                verdict: "accept".into(),
                reason: None,
            }
        } else {
            VerdictBody {
                verdict: "reject".into(),
                reason: Some(v.reason().name().into()),
            }
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/resource", get(resource))
        .route("/admin/devices", get(devices))
        .route("/admin/devices/{id}/reset", post(reset))
        .with_state(state)
}

async fn resource(State(st): State<AppState>, RawQuery(query): RawQuery) -> Response {
    let (token, resubmit) = extract_token(query.as_deref().unwrap_or(""));
    let verdict = st
        .firewall
        .validate(token.as_ref(), resubmit, st.clock.now());
    let status = if verdict.is_accept() {
        StatusCode::OK
    } else {
        StatusCode::FORBIDDEN
    };
    (status, Json(VerdictBody::from(verdict))).into_response()
}

async fn devices(State(st): State<AppState>) -> Json<BTreeMap<String, DeviceView>> {
    st.firewall.advance_time(st.clock.now());
    let ledger = st.firewall.to_ledger();
    Json(
        ledger
            .devices()
            .map(|(id, s)| {
                (
                    id.to_owned(),
                    DeviceView {
                        count_today: s.count_today,
                        blocked_until: s.blocked_until,
                        last_request_time: s.last_request_time,
                    },
                )
            })
            .collect(),
    )
}

async fn reset(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> StatusCode {
    st.firewall.reset_device(&id);
    StatusCode::NO_CONTENT
}

/// Loads a snapshot if the file exists; a missing file means a fresh ledger.
pub fn load_snapshot(path: &Path) -> Result<Option<DeviceLedger>, ServiceError> {
    match std::fs::read(path) {
        Ok(bytes) => DeviceLedger::restore(&bytes)
            .map(Some)
            .map_err(|e| ServiceError::Snapshot {
                path: path.into(),
                message: e.0,
            }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(ServiceError::Io {
            path: path.into(),
            source,
        }),
    }
}

/// Writes via a temporary sibling and a rename so readers never see a torn file.
pub fn write_snapshot(firewall: &SharedFirewall, path: &Path) -> Result<(), ServiceError> {
    let bytes = firewall.snapshot();
    let tmp = path.with_extension("tmp");
    let io = |source| ServiceError::Io {
        path: path.into(),
        source,
    };
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub struct Gateway {
    config: ServiceConfig,
    state: AppState,
}

impl Gateway {
    /// Restores the ledger from `snapshot_path` when present.
    pub fn new(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        config.validate()?;
        let ledger = match &config.snapshot_path {
            Some(p) => load_snapshot(p)?.unwrap_or_default(),
            None => DeviceLedger::new(),
        };
        let firewall = Arc::new(SharedFirewall::with_ledger(config.firewall.clone(), ledger));
        Ok(Gateway {
            config,
            state: AppState { firewall, clock },
        })
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    pub async fn bind(&self) -> Result<TcpListener, ServiceError> {
        Ok(TcpListener::bind(&self.config.listen_address).await?)
    }

    /// Serves until `shutdown` resolves, snapshotting every
    /// `snapshot_interval` seconds and once more on the way out.
    pub async fn serve(
        self,
        listener: TcpListener,
        shutdown: impl Future<Output = ()> + Send + 'static,
    ) -> Result<(), ServiceError> {
        let (stop_tx, mut stop_rx) = watch::channel(false);
        let snapshots = self.config.snapshot_path.clone().map(|path| {
            let fw = self.state.firewall.clone();
            let every = Duration::from_secs(self.config.snapshot_interval);
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                tick.tick().await;
                loop {
                    tokio::select! {
                        _ = tick.tick() => {}
                        _ = stop_rx.changed() => break,
                    }
                    let (fw, path) = (fw.clone(), path.clone());
                    match tokio::task::spawn_blocking(move || write_snapshot(&fw, &path)).await {
                        Ok(Err(e)) => tracing::warn!("periodic snapshot failed: {e}"),
                        Err(e) => tracing::warn!("snapshot task panicked: {e}"),
                        Ok(Ok(())) => {}
                    }
                }
            })
        });
        let app = router(self.state.clone());
        let served = axum::serve(listener, app)
            .with_graceful_shutdown(shutdown)
            .await;
        let _ = stop_tx.send(true);
        if let Some(task) = snapshots {
            let _ = task.await;
        }
        if let Some(path) = &self.config.snapshot_path {
            write_snapshot(&self.state.firewall, path)?;
        }
        served.map_err(ServiceError::from)
    }
}

/// A gateway running on a background task, for tests and embedding.
pub struct RunningGateway {
    pub addr: SocketAddr,
    pub state: AppState,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<Result<(), ServiceError>>,
}

impl RunningGateway {
    pub async fn start(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let gw = Gateway::new(config, clock)?;
        let listener = gw.bind().await?;
        let addr = listener.local_addr()?;
        let state = gw.state().clone();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let task = tokio::spawn(gw.serve(listener, async {
            let _ = rx.await;
        }));
        Ok(RunningGateway {
            addr,
            state,
            stop: Some(tx),
            task,
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    /// Graceful stop; the final snapshot is written before this returns.
    pub async fn stop(mut self) -> Result<(), ServiceError> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.task.await {
            Ok(r) => r,
            Err(e) => Err(ServiceError::Config(format!("gateway task failed: {e}"))),
        }
    }
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
