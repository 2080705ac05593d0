//! Local HTTP+JSON API for the approval console.
//!
//! The console can list pending requests, decide them, read the notification
//! log and follow a stream of events. It cannot start any flow. Every request
//! must carry the console token as `?token=`; the server only binds to
//! loopback addresses.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::json;
use subtle::ConstantTimeEq;
use tokio::sync::{mpsc, oneshot};

use twofe_protocol::approval::{Decision, Event, Gate};
use twofe_protocol::{Error, Result};

#[derive(Clone)]
struct App {
    gate: Arc<Gate>,
    token: Arc<String>,
}

#[derive(Deserialize)]
struct Auth {
    token: Option<String>,
}

#[derive(Deserialize)]
struct DecisionBody {
    decision: String,
}

fn error(status: StatusCode, class: &str, detail: &str) -> Response {
    (status, Json(json!({ "error": class, "detail": detail }))).into_response()
}

impl App {
    fn authorized(&self, auth: &Auth) -> bool {
        let given = auth.token.as_deref().unwrap_or("").as_bytes();
        given.ct_eq(self.token.as_bytes()).into()
    }
}

fn unauthorized() -> Response {
    error(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong console token")
}

async fn requests(State(app): State<App>, Query(auth): Query<Auth>) -> Response {
    if !app.authorized(&auth) {
        return unauthorized();
    }
    Json(app.gate.queue().pending()).into_response()
}

async fn notifications(State(app): State<App>, Query(auth): Query<Auth>) -> Response {
    if !app.authorized(&auth) {
        return unauthorized();
    }
    Json(app.gate.queue().notifications()).into_response()
}

/// Deciding is idempotent: repeating the decision a request already has
/// returns it unchanged. A conflicting decision is refused.
async fn decide(
    State(app): State<App>,
    Query(auth): Query<Auth>,
    Path(id): Path<u64>,
    body: Bytes,
) -> Response {
    if !app.authorized(&auth) {
        return unauthorized();
    }
    let body = serde_json::from_slice::<DecisionBody>(&body).ok();
    let approve = match body.as_ref().map(|b| b.decision.as_str()) {
        Some("approve") => true,
        Some("deny") => false,
        _ => return error(StatusCode::BAD_REQUEST, "malformed", "body must be {\"decision\": \"approve\"|\"deny\"}"),
    };
    let queue = app.gate.queue();
    match queue.decide(id, approve) {
        Ok(r) => Json(r).into_response(),
        Err(Error::UnknownRequest) => error(StatusCode::NOT_FOUND, "unknown-request", "no such request"),
        Err(Error::AlreadyDecided) => {
            let current = queue.get(id).expect("decided requests are kept");
            let wanted = if approve { Decision::Approved } else { Decision::Denied };
            if current.decision == wanted {
                Json(current).into_response()
            } else {
                (
                    StatusCode::CONFLICT,
                    Json(json!({ "error": "already-decided", "request": current })),
                )
                    .into_response()
            }
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.class(), &e.to_string()),
    }
}

fn event_name(e: &Event) -> &'static str {
    match e {
        Event::Request(_) => "request",
        Event::Decided(_) => "decided",
        Event::Notification(_) => "notification",
    }
}

async fn events(State(app): State<App>, Query(auth): Query<Auth>) -> Response {
    if !app.authorized(&auth) {
        return unauthorized();
    }
    // The queue publishes on a blocking channel; a thread forwards into the
    // async side and exits once the client is gone.
    let rx = app.gate.queue().subscribe();
    let (tx, mut out) = mpsc::unbounded_channel::<Event>();
    thread::spawn(move || {
        while let Ok(e) = rx.recv() {
            if tx.send(e).is_err() {
                break;
            }
        }
    });
    let stream: std::pin::Pin<Box<dyn Stream<Item = std::result::Result<SseEvent, Infallible>> + Send>> =
        Box::pin(futures::stream::poll_fn(move |cx| {
            out.poll_recv(cx).map(|e| {
                e.map(|e| {
                    Ok(SseEvent::default()
                        .event(event_name(&e))
                        .data(serde_json::to_string(&e).expect("events serialize")))
                })
            })
        }));
    Sse::new(stream).keep_alive(KeepAlive::default()).into_response()
}

pub fn router(gate: Arc<Gate>, token: String) -> Router {
    Router::new()
        .route("/requests", get(requests))
        .route("/requests/{id}/decision", post(decide))
        .route("/notifications", get(notifications))
        .route("/events", get(events))
        .with_state(App {
            gate,
            token: Arc::new(token),
        })
}

/// A console server running on its own thread.
pub struct ConsoleServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
}

impl ConsoleServer {
    /// Binds `addr`, which must be a loopback address, and serves until
    /// dropped.
    pub fn spawn(addr: SocketAddr, gate: Arc<Gate>, token: String) -> Result<ConsoleServer> {
        if !addr.ip().is_loopback() {
            return Err(Error::Io(format!("console must bind to loopback, not {}", addr.ip())));
        }
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = oneshot::channel();
        let app = router(gate, token);
        thread::Builder::new()
            .name("console".into())
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_current_thread()
                    .enable_all()
                    .build()
                    .expect("console runtime");
                rt.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(std_listener).expect("console listener");
                    let _ = axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await;
                });
            })?;
        Ok(ConsoleServer {
            addr,
            shutdown: Some(tx),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// The URL a console connects to, token included.
    pub fn url(&self, token: &str) -> String {
        format!("http://{}/?token={}", self.addr, token)
    }
}

impl Drop for ConsoleServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
