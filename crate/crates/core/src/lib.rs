//! Autoregressive six-hourly ocean-state forecasting with mixture-of-time
//! routing.
//!
//! The crate covers the whole pipeline: grid and channel bookkeeping
//! ([`grid`]), synthetic and on-disk series ([`data`]), the forecasting
//! network ([`net`]), channel-wise routing across temporal candidates
//! ([`mot`]), losses and metrics ([`objectives`]), two-stage training
//! ([`train`]) and rollout evaluation ([`eval`]).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod mot;
pub mod net;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
