//! Remote backends over the JSON wire protocol, and a mock server that
//! implements it on top of the synthetic backends.

pub mod client;
pub mod mock;
pub mod protocol;

pub use client::{RemoteClient, RemoteConfig, RemotePropagator, RemoteSegmenter};
pub use mock::{Fault, MockServer, Route};
pub use protocol::ProtocolError;
