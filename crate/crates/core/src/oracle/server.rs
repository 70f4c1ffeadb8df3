use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::oneshot;

use super::{LabelQuery, LabelQueue, RunStatus, SubmitError};
use crate::error::Result;

#[derive(Deserialize)]
struct LabelBody {
    id: u64,
    label: i64,
}

/// Handle of a running oracle service; dropping it stops the service.
pub struct OracleServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl OracleServer {
    /// The bound address (useful after binding port 0).
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

fn router(queue: Arc<LabelQueue>) -> Router {
    Router::new()
        .route("/queries", get(queries))
        .route("/labels", post(labels))
        .route("/status", get(status))
        .with_state(queue)
}

async fn queries(State(queue): State<Arc<LabelQueue>>) -> Json<Vec<LabelQuery>> {
    Json(queue.pending())
}

async fn status(State(queue): State<Arc<LabelQueue>>) -> Json<RunStatus> {
    Json(queue.status())
}

async fn labels(
    State(queue): State<Arc<LabelQueue>>,
    body: std::result::Result<Json<LabelBody>, JsonRejection>,
) -> (StatusCode, String) {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return (StatusCode::BAD_REQUEST, e.body_text()),
    };
    match queue.submit(body.id, body.label) {
        Ok(()) => (StatusCode::OK, String::new()),
        Err(e @ SubmitError::InvalidLabel(_)) => (StatusCode::BAD_REQUEST, e.to_string()),
        Err(e @ SubmitError::UnknownId(_)) => (StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ SubmitError::Conflict(_)) => (StatusCode::CONFLICT, e.to_string()),
    }
}

/// Serves `GET /queries`, `POST /labels` and `GET /status` for `queue` on a
/// background thread.
pub fn serve_oracle(addr: SocketAddr, queue: Arc<LabelQueue>) -> Result<OracleServer> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("oracle service could not adopt its socket: {e}");
                    return;
                }
            };
            let serve = axum::serve(listener, router(queue)).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = serve.await {
                log::error!("oracle service stopped: {e}");
            }
        });
    });
    Ok(OracleServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
