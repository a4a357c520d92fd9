//! Shared fixtures for the criterion benchmarks.

use faastree_core::protocol::types::{CallRequest, FunctionId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn sample_request(payload_bytes: usize) -> CallRequest {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    CallRequest::new(
        FunctionId::new("echo").unwrap(),
        vec![0xabu8; payload_bytes],
        30_000,
        &mut rng,
    )
}
