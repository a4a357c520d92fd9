//! Transports for the call interface: an in-process handle (any
//! `Arc<dyn NodeHandle>`) and a TCP client/server pair speaking the
//! framed wire format. Semantics are identical across transports.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Mutex};
use tokio::task::JoinHandle;
use tracing::{debug, warn};

use super::types::{CallRequest, CallResponse, ErrorCode, Refusal, StopRequest, WorkerSnapshot};
use super::wire::{decode_message, encode_message, WireError, WireMessage};

/// Extra time beyond the request deadline a client waits before giving
/// up on a response.
pub const RESPONSE_GRACE_MS: u64 = 2_000;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error("connection closed")]
    Closed,
    #[error("wire error: {0}")]
    Wire(#[from] WireError),
    #[error("unexpected message type in response")]
    UnexpectedMessage,
    #[error("timed out waiting for response")]
    Timeout,
    #[error("operation not supported by this node kind")]
    Unsupported,
    #[error("refused: {0}")]
    Refused(Refusal),
}

impl TransportError {
    /// Failures where the target never produced a response and another
    /// target may be tried.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            TransportError::Unreachable(_)
                | TransportError::Closed
                | TransportError::Wire(_)
                | TransportError::UnexpectedMessage
        )
    }
}

/// The uniform node interface. Balancers, leaves, and workers all
/// implement it, so any node kind can stand in for any other as a call
/// target.
#[async_trait]
pub trait NodeHandle: Send + Sync {
    /// Forward one call and wait for its single response.
    async fn call(&self, req: CallRequest) -> Result<CallResponse, TransportError>;

    /// Fetch the worker state snapshot. Only workers serve this.
    async fn state(&self) -> Result<WorkerSnapshot, TransportError> {
        Err(TransportError::Unsupported)
    }

    /// Stop an instance or a whole function. Only workers serve this.
    async fn stop(&self, _req: StopRequest) -> Result<(), TransportError> {
        Err(TransportError::Unsupported)
    }

    /// Cheap reachability check.
    async fn probe(&self) -> Result<(), TransportError> {
        Ok(())
    }
}

/// Fold a transport failure into the in-band response every caller of
/// the tree root ultimately sees.
pub fn fold_call_result(
    call_id: &str,
    result: Result<CallResponse, TransportError>,
) -> CallResponse {
    match result {
        Ok(resp) => resp,
        Err(TransportError::Timeout) => CallResponse::error(
            call_id,
            ErrorCode::DeadlineExceeded,
            "no response before deadline",
            "",
        ),
        Err(e) => CallResponse::error(call_id, ErrorCode::TransportError, e.to_string(), ""),
    }
}

struct Conn {
    read: OwnedReadHalf,
    write: OwnedWriteHalf,
    buf: Vec<u8>,
}

impl Conn {
    async fn connect(addr: &str) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)
            .await
            .map_err(|e| TransportError::Unreachable(format!("{addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let (read, write) = stream.into_split();
        Ok(Self { read, write, buf: Vec::with_capacity(4096) })
    }

    async fn send(&mut self, msg: &WireMessage) -> Result<(), TransportError> {
        let frame = encode_message(msg)?;
        self.write
            .write_all(&frame)
            .await
            .map_err(|e| TransportError::Unreachable(e.to_string()))
    }

    async fn recv(&mut self) -> Result<WireMessage, TransportError> {
        loop {
            if let Some((msg, consumed)) = decode_message(&self.buf)? {
                self.buf.drain(..consumed);
                return Ok(msg);
            }
            let mut chunk = [0u8; 16 * 1024];
            let n = self
                .read
                .read(&mut chunk)
                .await
                .map_err(|e| TransportError::Unreachable(e.to_string()))?;
            if n == 0 {
                return Err(TransportError::Closed);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }
}

/// TCP client for one remote node. Keeps a small pool of idle
/// connections and runs one in-flight request per connection.
pub struct TcpNodeClient {
    addr: String,
    pool: Mutex<Vec<Conn>>,
    max_idle: usize,
}

impl TcpNodeClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), pool: Mutex::new(Vec::new()), max_idle: 64 }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    async fn acquire(&self) -> Result<Conn, TransportError> {
        if let Some(conn) = self.pool.lock().await.pop() {
            return Ok(conn);
        }
        Conn::connect(&self.addr).await
    }

    async fn release(&self, conn: Conn) {
        let mut pool = self.pool.lock().await;
        if pool.len() < self.max_idle {
            pool.push(conn);
        }
    }

    /// One request/response exchange with an overall time budget.
    async fn exchange(
        &self,
        msg: WireMessage,
        budget: Duration,
    ) -> Result<WireMessage, TransportError> {
        let mut conn = self.acquire().await?;
        let fut = async {
            conn.send(&msg).await?;
            conn.recv().await
        };
        match tokio::time::timeout(budget, fut).await {
            Ok(Ok(resp)) => {
                self.release(conn).await;
                Ok(resp)
            }
            Ok(Err(e)) => Err(e),
            Err(_) => Err(TransportError::Timeout),
        }
    }
}

#[async_trait]
impl NodeHandle for TcpNodeClient {
    async fn call(&self, req: CallRequest) -> Result<CallResponse, TransportError> {
        let call_id = req.call_id.clone();
        let budget = Duration::from_millis(req.deadline_ms.saturating_add(RESPONSE_GRACE_MS));
        match self.exchange(WireMessage::CallReq(req), budget).await? {
            WireMessage::CallResp(resp) if resp.call_id == call_id => Ok(resp),
            _ => Err(TransportError::UnexpectedMessage),
        }
    }

    async fn state(&self) -> Result<WorkerSnapshot, TransportError> {
        let msg = WireMessage::StateReq { worker_id: self.addr.clone() };
        match self.exchange(msg, Duration::from_millis(RESPONSE_GRACE_MS)).await? {
            WireMessage::StateResp(Ok(snap)) => Ok(snap),
            WireMessage::StateResp(Err(refusal)) => Err(TransportError::Refused(refusal)),
            _ => Err(TransportError::UnexpectedMessage),
        }
    }

    async fn stop(&self, req: StopRequest) -> Result<(), TransportError> {
        let budget = Duration::from_millis(RESPONSE_GRACE_MS + 5_000);
        match self.exchange(WireMessage::StopReq(req), budget).await? {
            WireMessage::StopResp(Ok(())) => Ok(()),
            WireMessage::StopResp(Err(refusal)) => Err(TransportError::Refused(refusal)),
            _ => Err(TransportError::UnexpectedMessage),
        }
    }

    async fn probe(&self) -> Result<(), TransportError> {
        let conn = Conn::connect(&self.addr).await?;
        self.release(conn).await;
        Ok(())
    }
}

/// A running TCP server; the listener task stops when this is dropped.
pub struct ServerHandle {
    local_addr: std::net::SocketAddr,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.local_addr
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Expose a node on a TCP address. Requests on one connection may be
/// pipelined; responses are matched by call_id and may return out of
/// order.
pub async fn serve_node(
    addr: &str,
    node: Arc<dyn NodeHandle>,
) -> Result<ServerHandle, std::io::Error> {
    let listener = TcpListener::bind(addr).await?;
    let local_addr = listener.local_addr()?;
    let task = tokio::spawn(async move {
        // connection tasks live in the JoinSet, so aborting the accept
        // task (ServerHandle drop) tears down live connections too
        let mut conns = tokio::task::JoinSet::new();
        loop {
            tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        stream.set_nodelay(true).ok();
                        let node = Arc::clone(&node);
                        conns.spawn(async move {
                            if let Err(e) = serve_connection(stream, node).await {
                                debug!("connection from {peer} ended: {e}");
                            }
                        });
                    }
                    Err(e) => {
                        warn!("accept failed: {e}");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                },
                Some(_) = conns.join_next(), if !conns.is_empty() => {}
            }
        }
    });
    Ok(ServerHandle { local_addr, task })
}

async fn serve_connection(
    stream: TcpStream,
    node: Arc<dyn NodeHandle>,
) -> Result<(), TransportError> {
    let (mut read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::channel::<Vec<u8>>(256);

    let writer = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if write.write_all(&frame).await.is_err() {
                break;
            }
        }
    });

    let mut buf = Vec::with_capacity(4096);
    let result = loop {
        match decode_message(&buf) {
            Ok(Some((msg, consumed))) => {
                buf.drain(..consumed);
                let node = Arc::clone(&node);
                let tx = tx.clone();
                tokio::spawn(async move {
                    let reply = dispatch(node, msg).await;
                    if let Some(reply) = reply {
                        if let Ok(frame) = encode_message(&reply) {
                            let _ = tx.send(frame).await;
                        }
                    }
                });
            }
            Ok(None) => {
                let mut chunk = [0u8; 16 * 1024];
                let n = read
                    .read(&mut chunk)
                    .await
                    .map_err(|e| TransportError::Unreachable(e.to_string()))?;
                if n == 0 {
                    break Ok(());
                }
                buf.extend_from_slice(&chunk[..n]);
            }
            Err(e) => break Err(TransportError::Wire(e)),
        }
    };
    drop(tx);
    let _ = writer.await;
    result
}

async fn dispatch(node: Arc<dyn NodeHandle>, msg: WireMessage) -> Option<WireMessage> {
    match msg {
        WireMessage::CallReq(req) => {
            let call_id = req.call_id.clone();
            let resp = fold_call_result(&call_id, node.call(req).await);
            Some(WireMessage::CallResp(resp))
        }
        WireMessage::StateReq { .. } => {
            let result = match node.state().await {
                Ok(snap) => Ok(snap),
                Err(TransportError::Refused(r)) => Err(r),
                Err(TransportError::Unsupported) => Err(Refusal::new(
                    ErrorCode::TransportError,
                    "node does not expose worker state",
                )),
                Err(e) => Err(Refusal::new(ErrorCode::TransportError, e.to_string())),
            };
            Some(WireMessage::StateResp(result))
        }
        WireMessage::StopReq(req) => {
            let result = match node.stop(req).await {
                Ok(()) => Ok(()),
                Err(TransportError::Refused(r)) => Err(r),
                Err(TransportError::Unsupported) => Err(Refusal::new(
                    ErrorCode::TransportError,
                    "node does not manage instances",
                )),
                Err(e) => Err(Refusal::new(ErrorCode::TransportError, e.to_string())),
            };
            Some(WireMessage::StopResp(result))
        }
        // Response-typed messages are never expected from a client.
        _ => None,
    }
}
