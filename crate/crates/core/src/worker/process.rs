//! Subprocess runtime: the function image is an executable. The worker
//! writes framed call requests to its stdin and reads framed responses
//! from its stdout; one process is one instance, and within-instance
//! concurrency shows up as interleaved frames.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::process::{Child, Command};
use tokio::sync::{mpsc, oneshot};
use tracing::{debug, warn};

use crate::protocol::types::{CallOutcome, CallRequest, CallResponse, FunctionConfig};
use crate::protocol::wire::{decode_message, encode_message, WireMessage};

use super::runtime::{InvokeCtx, InvokeError, Runtime, RuntimeError, RuntimeInstance};

/// Runtime that runs each instance as a child process speaking the wire
/// protocol on stdin/stdout.
pub struct ProcessRuntime {
    scratch: PathBuf,
    counter: AtomicU64,
}

impl ProcessRuntime {
    /// `scratch` holds the materialized image executables.
    pub fn new(scratch: impl Into<PathBuf>) -> std::io::Result<Self> {
        let scratch = scratch.into();
        std::fs::create_dir_all(&scratch)?;
        Ok(Self { scratch, counter: AtomicU64::new(0) })
    }
}

type Pending = Arc<Mutex<Option<HashMap<String, oneshot::Sender<CallResponse>>>>>;

struct ProcessInstance {
    frames: mpsc::Sender<Vec<u8>>,
    pending: Pending,
    child: Mutex<Option<Child>>,
    exe_path: PathBuf,
    cpu: CpuSampler,
}

impl ProcessInstance {
    fn register(&self, call_id: &str) -> Option<oneshot::Receiver<CallResponse>> {
        let mut pending = self.pending.lock().unwrap();
        let map = pending.as_mut()?;
        let (tx, rx) = oneshot::channel();
        map.insert(call_id.to_string(), tx);
        Some(rx)
    }

    fn unregister(&self, call_id: &str) {
        if let Some(map) = self.pending.lock().unwrap().as_mut() {
            map.remove(call_id);
        }
    }
}

#[async_trait]
impl RuntimeInstance for ProcessInstance {
    async fn invoke(
        &self,
        ctx: &InvokeCtx,
        payload: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, InvokeError> {
        let rx = self
            .register(&ctx.call_id)
            .ok_or_else(|| InvokeError::Crashed("instance process exited".into()))?;

        let req = CallRequest {
            call_id: ctx.call_id.clone(),
            function: ctx.function.clone(),
            payload: payload.to_vec(),
            deadline_ms: (timeout.as_millis() as u64).max(1),
        };
        let frame = encode_message(&WireMessage::CallReq(req))
            .map_err(|e| InvokeError::Function(format!("encode: {e}")))?;
        if self.frames.send(frame).await.is_err() {
            self.unregister(&ctx.call_id);
            return Err(InvokeError::Crashed("instance stdin closed".into()));
        }

        match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(resp)) => match resp.outcome {
                CallOutcome::Ok(payload) => Ok(payload),
                CallOutcome::Err { message, .. } => Err(InvokeError::Function(message)),
            },
            Ok(Err(_)) => Err(InvokeError::Crashed("instance process exited".into())),
            Err(_) => {
                self.unregister(&ctx.call_id);
                Err(InvokeError::DeadlineExceeded)
            }
        }
    }

    async fn stop(&self) {
        let child = self.child.lock().unwrap().take();
        if let Some(mut child) = child {
            let _ = child.start_kill();
            let _ = child.wait().await;
        }
        let _ = std::fs::remove_file(&self.exe_path);
    }

    fn cpu_fraction(&self) -> Option<f64> {
        self.cpu.sample()
    }
}

#[async_trait]
impl Runtime for ProcessRuntime {
    fn kind(&self) -> &'static str {
        "process"
    }

    async fn start_instance(
        &self,
        config: &FunctionConfig,
        instance_id: &str,
        image: Option<Arc<Vec<u8>>>,
    ) -> Result<Arc<dyn RuntimeInstance>, RuntimeError> {
        let image = image.ok_or_else(|| RuntimeError::Start("process runtime needs an image".into()))?;
        let ordinal = self.counter.fetch_add(1, Ordering::SeqCst);
        let exe_path = self.scratch.join(format!("{}-{ordinal}", instance_id));
        std::fs::write(&exe_path, image.as_slice())
            .map_err(|e| RuntimeError::Start(format!("write image: {e}")))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&exe_path, std::fs::Permissions::from_mode(0o755))
                .map_err(|e| RuntimeError::Start(format!("chmod image: {e}")))?;
        }

        let mut child = Command::new(&exe_path)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| {
                let _ = std::fs::remove_file(&exe_path);
                RuntimeError::Start(format!("spawn {}: {e}", config.image_digest))
            })?;

        let pid = child.id();
        let mut stdin = child.stdin.take().expect("stdin piped");
        let mut stdout = child.stdout.take().expect("stdout piped");

        let (frames_tx, mut frames_rx) = mpsc::channel::<Vec<u8>>(256);
        tokio::spawn(async move {
            while let Some(frame) = frames_rx.recv().await {
                if stdin.write_all(&frame).await.is_err() {
                    break;
                }
            }
        });

        let pending: Pending = Arc::new(Mutex::new(Some(HashMap::new())));
        let reader_pending = Arc::clone(&pending);
        tokio::spawn(async move {
            let mut buf: Vec<u8> = Vec::with_capacity(16 * 1024);
            'read: loop {
                match decode_message(&buf) {
                    Ok(Some((msg, consumed))) => {
                        buf.drain(..consumed);
                        if let WireMessage::CallResp(resp) = msg {
                            let waiter = reader_pending
                                .lock()
                                .unwrap()
                                .as_mut()
                                .and_then(|m| m.remove(&resp.call_id));
                            if let Some(tx) = waiter {
                                let _ = tx.send(resp);
                            } else {
                                debug!("dropping late response for call {}", resp.call_id);
                            }
                        }
                    }
                    Ok(None) => {
                        let mut chunk = [0u8; 16 * 1024];
                        match stdout.read(&mut chunk).await {
                            Ok(0) | Err(_) => break 'read,
                            Ok(n) => buf.extend_from_slice(&chunk[..n]),
                        }
                    }
                    Err(e) => {
                        warn!("instance emitted a malformed frame: {e}");
                        break 'read;
                    }
                }
            }
            // child gone: fail every outstanding call
            if let Some(map) = reader_pending.lock().unwrap().take() {
                drop(map);
            }
        });

        Ok(Arc::new(ProcessInstance {
            frames: frames_tx,
            pending,
            child: Mutex::new(Some(child)),
            exe_path,
            cpu: CpuSampler::new(pid, config.cpu_millis),
        }))
    }
}

/// Samples a child's CPU time from /proc, reporting the fraction of its
/// configured cpu_millis limit used since the previous sample.
struct CpuSampler {
    pid: Option<u32>,
    limit_cores: f64,
    last: Mutex<Option<(Instant, f64)>>,
}

impl CpuSampler {
    fn new(pid: Option<u32>, cpu_millis: u64) -> Self {
        Self {
            pid,
            limit_cores: (cpu_millis as f64 / 1000.0).max(1e-6),
            last: Mutex::new(None),
        }
    }

    fn sample(&self) -> Option<f64> {
        let pid = self.pid?;
        let cpu_seconds = read_proc_cpu_seconds(pid)?;
        let now = Instant::now();
        let mut last = self.last.lock().unwrap();
        let frac = match *last {
            Some((t0, c0)) => {
                let wall = now.duration_since(t0).as_secs_f64();
                if wall <= 0.0 {
                    return None;
                }
                Some((((cpu_seconds - c0) / wall) / self.limit_cores).clamp(0.0, 1.0))
            }
            None => None,
        };
        *last = Some((now, cpu_seconds));
        frac
    }
}

#[cfg(target_os = "linux")]
fn read_proc_cpu_seconds(pid: u32) -> Option<f64> {
    // utime + stime out of /proc/<pid>/stat; fields start after the
    // parenthesized comm. Assumes the usual 100 Hz clock tick.
    const CLK_TCK: f64 = 100.0;
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let after = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = after.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some((utime + stime) as f64 / CLK_TCK)
}

#[cfg(not(target_os = "linux"))]
fn read_proc_cpu_seconds(_pid: u32) -> Option<f64> {
    None
}
