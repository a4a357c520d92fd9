//! Length-prefixed wire format: 4-byte big-endian length, then a UTF-8
//! JSON body whose top-level `type` field selects one of six messages.
//! Binary payloads travel base64-encoded in `payload_b64`.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::types::{
    CallOutcome, CallRequest, CallResponse, ErrorCode, FunctionId, InstanceSnapshot,
    InstanceStatus, Refusal, StopRequest, StopTarget, WorkerSnapshot, MAX_PAYLOAD_BYTES,
};

/// Maximum frame body size. The 4-byte prefix is not counted.
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    /// Encoded body would exceed [`MAX_FRAME_BYTES`] (or the payload cap).
    #[error("encode too large: {0}")]
    TooLarge(String),
    /// Truncated frame, unknown `type`, or invariant violation.
    #[error("malformed frame: {0}")]
    Malformed(String),
}

fn malformed(reason: impl Into<String>) -> WireError {
    WireError::Malformed(reason.into())
}

/// Any of the six messages nodes exchange.
#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    CallReq(CallRequest),
    CallResp(CallResponse),
    StateReq { worker_id: String },
    StateResp(Result<WorkerSnapshot, Refusal>),
    StopReq(StopRequest),
    StopResp(Result<(), Refusal>),
}

#[derive(Serialize, Deserialize)]
struct WireInstance {
    instance_id: String,
    function: String,
    status: String,
    in_flight: u64,
    started_at_ms: u64,
}

/// On-wire body. Field names here are the protocol; do not rename.
#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum WireBody {
    #[serde(rename = "call_req")]
    CallReq {
        call_id: String,
        function: String,
        payload_b64: String,
        deadline_ms: u64,
    },
    #[serde(rename = "call_resp")]
    CallResp {
        call_id: String,
        outcome: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        payload_b64: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        code: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        message: Option<String>,
        cold_start: bool,
        queue_wait_ms: u64,
        exec_ms: u64,
        worker_id: String,
    },
    #[serde(rename = "state_req")]
    StateReq { worker_id: String },
    #[serde(rename = "state_resp")]
    StateResp {
        outcome: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        code: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        message: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        worker_id: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        taken_at_ms: Option<u64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        instances: Option<Vec<WireInstance>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        utilization: Option<f64>,
    },
    #[serde(rename = "stop_req")]
    StopReq {
        #[serde(skip_serializing_if = "Option::is_none")]
        function: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        instance_id: Option<String>,
    },
    #[serde(rename = "stop_resp")]
    StopResp {
        outcome: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        code: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
}

fn status_to_wire(s: InstanceStatus) -> String {
    s.as_str().to_string()
}

fn status_from_wire(s: &str) -> Result<InstanceStatus, WireError> {
    match s {
        "starting" => Ok(InstanceStatus::Starting),
        "idle" => Ok(InstanceStatus::Idle),
        "busy" => Ok(InstanceStatus::Busy),
        other => Err(malformed(format!("unknown instance status {other:?}"))),
    }
}

fn code_from_wire(s: &str) -> Result<ErrorCode, WireError> {
    s.parse().map_err(|_| malformed(format!("unknown error code {s:?}")))
}

fn to_body(msg: &WireMessage) -> Result<WireBody, WireError> {
    Ok(match msg {
        WireMessage::CallReq(req) => {
            if req.payload.len() > MAX_PAYLOAD_BYTES {
                return Err(WireError::TooLarge(format!(
                    "payload {} bytes exceeds {} byte cap",
                    req.payload.len(),
                    MAX_PAYLOAD_BYTES
                )));
            }
            WireBody::CallReq {
                call_id: req.call_id.clone(),
                function: req.function.to_string(),
                payload_b64: BASE64.encode(&req.payload),
                deadline_ms: req.deadline_ms,
            }
        }
        WireMessage::CallResp(resp) => {
            let (outcome, payload_b64, code, message) = match &resp.outcome {
                CallOutcome::Ok(payload) => {
                    if payload.len() > MAX_PAYLOAD_BYTES {
                        return Err(WireError::TooLarge(format!(
                            "response payload {} bytes exceeds {} byte cap",
                            payload.len(),
                            MAX_PAYLOAD_BYTES
                        )));
                    }
                    ("ok".to_string(), Some(BASE64.encode(payload)), None, None)
                }
                CallOutcome::Err { code, message } => (
                    "err".to_string(),
                    None,
                    Some(code.as_str().to_string()),
                    Some(message.clone()),
                ),
            };
            WireBody::CallResp {
                call_id: resp.call_id.clone(),
                outcome,
                payload_b64,
                code,
                message,
                cold_start: resp.cold_start,
                queue_wait_ms: resp.queue_wait_ms,
                exec_ms: resp.exec_ms,
                worker_id: resp.worker_id.clone(),
            }
        }
        WireMessage::StateReq { worker_id } => WireBody::StateReq { worker_id: worker_id.clone() },
        WireMessage::StateResp(Ok(snap)) => WireBody::StateResp {
            outcome: "ok".to_string(),
            code: None,
            message: None,
            worker_id: Some(snap.worker_id.clone()),
            taken_at_ms: Some(snap.taken_at_ms),
            instances: Some(
                snap.instances
                    .iter()
                    .map(|i| WireInstance {
                        instance_id: i.instance_id.clone(),
                        function: i.function.to_string(),
                        status: status_to_wire(i.status),
                        in_flight: i.in_flight,
                        started_at_ms: i.started_at_ms,
                    })
                    .collect(),
            ),
            utilization: Some(snap.utilization),
        },
        WireMessage::StateResp(Err(refusal)) => WireBody::StateResp {
            outcome: "err".to_string(),
            code: Some(refusal.code.as_str().to_string()),
            message: Some(refusal.message.clone()),
            worker_id: None,
            taken_at_ms: None,
            instances: None,
            utilization: None,
        },
        WireMessage::StopReq(req) => match &req.target {
            StopTarget::Function(f) => {
                WireBody::StopReq { function: Some(f.to_string()), instance_id: None }
            }
            StopTarget::Instance(id) => {
                WireBody::StopReq { function: None, instance_id: Some(id.clone()) }
            }
        },
        WireMessage::StopResp(Ok(())) => {
            WireBody::StopResp { outcome: "ok".to_string(), code: None, message: None }
        }
        WireMessage::StopResp(Err(refusal)) => WireBody::StopResp {
            outcome: "err".to_string(),
            code: Some(refusal.code.as_str().to_string()),
            message: Some(refusal.message.clone()),
        },
    })
}

fn from_body(body: WireBody) -> Result<WireMessage, WireError> {
    Ok(match body {
        WireBody::CallReq { call_id, function, payload_b64, deadline_ms } => {
            let function = FunctionId::new(function).map_err(|e| malformed(e.to_string()))?;
            let payload =
                BASE64.decode(payload_b64).map_err(|e| malformed(format!("payload_b64: {e}")))?;
            let req = CallRequest { call_id, function, payload, deadline_ms };
            req.validate().map_err(|e| malformed(e.to_string()))?;
            WireMessage::CallReq(req)
        }
        WireBody::CallResp {
            call_id,
            outcome,
            payload_b64,
            code,
            message,
            cold_start,
            queue_wait_ms,
            exec_ms,
            worker_id,
        } => {
            let outcome = match outcome.as_str() {
                "ok" => {
                    let payload = BASE64
                        .decode(payload_b64.unwrap_or_default())
                        .map_err(|e| malformed(format!("payload_b64: {e}")))?;
                    if payload.len() > MAX_PAYLOAD_BYTES {
                        return Err(malformed("response payload exceeds cap"));
                    }
                    CallOutcome::Ok(payload)
                }
                "err" => {
                    let code = code.ok_or_else(|| malformed("err outcome without code"))?;
                    CallOutcome::Err {
                        code: code_from_wire(&code)?,
                        message: message.unwrap_or_default(),
                    }
                }
                other => return Err(malformed(format!("unknown outcome {other:?}"))),
            };
            WireMessage::CallResp(CallResponse {
                call_id,
                outcome,
                cold_start,
                queue_wait_ms,
                exec_ms,
                worker_id,
            })
        }
        WireBody::StateReq { worker_id } => WireMessage::StateReq { worker_id },
        WireBody::StateResp { outcome, code, message, worker_id, taken_at_ms, instances, utilization } => {
            match outcome.as_str() {
                "ok" => {
                    let instances = instances
                        .unwrap_or_default()
                        .into_iter()
                        .map(|i| {
                            Ok(InstanceSnapshot {
                                instance_id: i.instance_id,
                                function: FunctionId::new(i.function)
                                    .map_err(|e| malformed(e.to_string()))?,
                                status: status_from_wire(&i.status)?,
                                in_flight: i.in_flight,
                                started_at_ms: i.started_at_ms,
                            })
                        })
                        .collect::<Result<Vec<_>, WireError>>()?;
                    let snap = WorkerSnapshot {
                        worker_id: worker_id.ok_or_else(|| malformed("state_resp without worker_id"))?,
                        taken_at_ms: taken_at_ms.unwrap_or_default(),
                        instances,
                        utilization: utilization.unwrap_or_default(),
                    };
                    snap.validate().map_err(|e| malformed(e.to_string()))?;
                    WireMessage::StateResp(Ok(snap))
                }
                "err" => {
                    let code = code.ok_or_else(|| malformed("err outcome without code"))?;
                    WireMessage::StateResp(Err(Refusal::new(
                        code_from_wire(&code)?,
                        message.unwrap_or_default(),
                    )))
                }
                other => return Err(malformed(format!("unknown outcome {other:?}"))),
            }
        }
        WireBody::StopReq { function, instance_id } => {
            let target = match (function, instance_id) {
                (Some(f), None) => StopTarget::Function(
                    FunctionId::new(f).map_err(|e| malformed(e.to_string()))?,
                ),
                (None, Some(id)) => StopTarget::Instance(id),
                _ => return Err(malformed("stop_req must name exactly one of function, instance_id")),
            };
            WireMessage::StopReq(StopRequest { target })
        }
        WireBody::StopResp { outcome, code, message } => match outcome.as_str() {
            "ok" => WireMessage::StopResp(Ok(())),
            "err" => {
                let code = code.ok_or_else(|| malformed("err outcome without code"))?;
                WireMessage::StopResp(Err(Refusal::new(
                    code_from_wire(&code)?,
                    message.unwrap_or_default(),
                )))
            }
            other => return Err(malformed(format!("unknown outcome {other:?}"))),
        },
    })
}

/// Encode one message as a complete frame.
pub fn encode_message(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    let body = to_body(msg)?;
    let json = serde_json::to_vec(&body).map_err(|e| malformed(e.to_string()))?;
    if json.len() > MAX_FRAME_BYTES {
        return Err(WireError::TooLarge(format!(
            "frame body {} bytes exceeds {} byte cap",
            json.len(),
            MAX_FRAME_BYTES
        )));
    }
    let mut out = Vec::with_capacity(4 + json.len());
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Decode the first complete frame in `buf`.
///
/// Returns `Ok(None)` when more bytes are needed, otherwise the message
/// and the number of bytes consumed. Trailing bytes are untouched.
pub fn decode_message(buf: &[u8]) -> Result<Option<(WireMessage, usize)>, WireError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(malformed(format!("frame length {len} exceeds {MAX_FRAME_BYTES} byte cap")));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let body: WireBody =
        serde_json::from_slice(&buf[4..4 + len]).map_err(|e| malformed(e.to_string()))?;
    Ok(Some((from_body(body)?, 4 + len)))
}
