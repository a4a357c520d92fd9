//! Sample function image: a sleep-based echo speaking the instance
//! protocol (framed call requests on stdin, framed responses on
//! stdout). Concurrency shows up as interleaved frames.
//!
//! Deploy it by putting the built binary (or a one-line shell script
//! that execs it with flags) into the image store.

use std::time::{Duration, Instant};

use clap::Parser;
use faastree_core::protocol::types::{CallOutcome, CallResponse, ErrorCode};
use faastree_core::protocol::wire::{decode_message, encode_message, WireMessage};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::mpsc;

#[derive(Parser)]
#[command(name = "fn-echo", about = "sleep-based echo function")]
struct Args {
    /// One-time delay before the instance starts serving.
    #[arg(long, default_value_t = 0, env = "FN_ECHO_STARTUP_MS")]
    startup_ms: u64,
    /// Base service time per call.
    #[arg(long, default_value_t = 0, env = "FN_ECHO_SLEEP_MS")]
    sleep_ms: u64,
    /// Additional service time per KiB of payload.
    #[arg(long, default_value_t = 0.0, env = "FN_ECHO_SLEEP_PER_KIB")]
    sleep_per_kib: f64,
    /// Fail every Nth call with FUNCTION_ERROR (0 = never).
    #[arg(long, default_value_t = 0, env = "FN_ECHO_FAIL_EVERY")]
    fail_every: u64,
}

#[tokio::main(flavor = "current_thread")]
async fn main() {
    let args = Args::parse();
    if args.startup_ms > 0 {
        tokio::time::sleep(Duration::from_millis(args.startup_ms)).await;
    }

    let mut stdin = tokio::io::stdin();
    let (tx, mut rx) = mpsc::channel::<Vec<u8>>(256);

    let writer = tokio::spawn(async move {
        let mut stdout = tokio::io::stdout();
        while let Some(frame) = rx.recv().await {
            if stdout.write_all(&frame).await.is_err() {
                return;
            }
            let _ = stdout.flush().await;
        }
    });

    let mut buf: Vec<u8> = Vec::with_capacity(16 * 1024);
    let mut seq: u64 = 0;
    loop {
        match decode_message(&buf) {
            Ok(Some((msg, consumed))) => {
                buf.drain(..consumed);
                if let WireMessage::CallReq(req) = msg {
                    seq += 1;
                    let fail = args.fail_every > 0 && seq.is_multiple_of(args.fail_every);
                    let service = Duration::from_millis(args.sleep_ms)
                        + Duration::from_secs_f64(
                            args.sleep_per_kib * req.payload.len() as f64 / 1024.0 / 1000.0,
                        );
                    let tx = tx.clone();
                    tokio::spawn(async move {
                        let started = Instant::now();
                        tokio::time::sleep(service).await;
                        let outcome = if fail {
                            CallOutcome::Err {
                                code: ErrorCode::FunctionError,
                                message: "synthetic failure".into(),
                            }
                        } else {
                            CallOutcome::Ok(req.payload)
                        };
                        let resp = CallResponse {
                            call_id: req.call_id,
                            outcome,
                            cold_start: false,
                            queue_wait_ms: 0,
                            exec_ms: started.elapsed().as_millis() as u64,
                            worker_id: "fn-echo".into(),
                        };
                        if let Ok(frame) = encode_message(&WireMessage::CallResp(resp)) {
                            let _ = tx.send(frame).await;
                        }
                    });
                }
            }
            Ok(None) => {
                let mut chunk = [0u8; 16 * 1024];
                match stdin.read(&mut chunk).await {
                    Ok(0) | Err(_) => break,
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                }
            }
            Err(_) => break,
        }
    }
    drop(tx);
    let _ = writer.await;
}
