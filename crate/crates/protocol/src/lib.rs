//! Protocol layer of two-factor encrypted storage: wire format, secure
//! channel, device and cloud roles, approval policy and persistence.

pub mod approval;
pub mod channel;
pub mod clock;
pub mod cloud;
pub mod device;
pub mod error;
pub mod sim;
pub mod state;
pub mod store;
pub mod transport;
pub mod wire;

pub use error::{Error, Result};
pub use wire::{Flow, Frame, MsgType, RecoveryMode};
