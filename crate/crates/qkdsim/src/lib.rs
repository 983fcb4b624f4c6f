//! Discrete-event simulator of a one-way, actively compensated fibre QKD
//! system.
//!
//! A BB84 session runs over a simulated double asymmetric Mach-Zehnder
//! link: phase-encoded weak signal pulses ride together with bright
//! unmodulated reference pulses, three gated APDs click at the receiver,
//! a fibre-stretcher feedback loop locks the interferometer onto the
//! reference dark fringe, and a three-axis walker tracks polarization
//! drift. The sifting exchange runs over a framed classical channel
//! (in-process or TCP), and the metrics layer reproduces the session's
//! error-rate series, duty cycle, bit rate and error budget.

pub mod compensation;
pub mod config;
pub mod detectors;
pub mod error;
pub mod metrics;
pub mod physics;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod transport;
pub mod util;

pub use config::{validate, RunConfig, RunMode};
pub use error::RunError;
pub use metrics::{RunSummary, TraceFile};
pub use sim::{run, run_and_export, RunOutput};
