//! Play service: sessions over HTTP with a server-sent-events live channel.

pub mod message;
pub mod server;
pub mod session;

pub use message::{Mode, StateMessage, SCHEMA_VERSION};
pub use server::{router, serve, serve_on, AppState, ServeError, ServeOptions, DEFAULT_PORT};
pub use session::{AgentPolicy, PlayError, Session, SessionStore};
