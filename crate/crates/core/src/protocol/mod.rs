//! The uniform call interface shared by every node in the tree, plus the
//! framed wire encoding and the transports that carry it.

pub mod transport;
pub mod types;
pub mod wire;

pub use transport::{NodeHandle, TcpNodeClient, TransportError};
pub use types::*;
pub use wire::{decode_message, encode_message, WireError, WireMessage, MAX_FRAME_BYTES};
