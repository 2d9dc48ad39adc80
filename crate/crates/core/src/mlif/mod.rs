//! Client side of the model-server protocol and its transports.

mod client;
mod protocol;
mod transport;

pub use client::*;
pub use protocol::*;
pub use transport::*;
