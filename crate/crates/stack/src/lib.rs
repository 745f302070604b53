//! Services of the remote capture platform: the gateway (leases, sessions,
//! event log, HTTP/WebSocket API), the frame relay, the inference hook, the
//! packer, the simulated device agent and the benchmark harness.

pub mod agent;
pub mod bench;
pub mod clock;
pub mod eventlog;
pub mod gateway;
pub mod http;
pub mod inference;
pub mod lease;
pub mod packer;
pub mod protocol;
pub mod pubsub;
pub mod relay;
pub mod stack;

pub use agent::{run_capture, AgentConfig, AgentError, DeviceAgent};
pub use gateway::{Gateway, GatewayConfig, GatewayError};
pub use stack::{Stack, StackConfig};
