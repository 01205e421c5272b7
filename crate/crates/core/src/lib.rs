//! Transmission-grid voltage and frequency stability with EV charging loads.
//!
//! Pipeline: network model → Newton power flow → P-V curves and line
//! stability indices → time-domain frequency response → nadir, ROCOF and
//! settling-time metrics.

pub mod dynamics;
pub mod evload;
pub mod filters;
pub mod metrics;
pub mod netmodel;
pub mod powerflow;
pub mod pvfarm;
pub mod study;
pub mod voltstab;
