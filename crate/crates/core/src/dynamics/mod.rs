//! Time-domain frequency dynamics: machines, governors, exciters, the
//! multi-band stabilizer, AGC and switching events.

pub mod agc;
pub mod events;
pub mod machine;
pub mod pss;
pub mod sim;

pub use agc::{agc_update, AgcParams, AgcState};
pub use events::{Event, EventAction, EventSchedule};
pub use machine::{ExciterParams, GovernorParams, MachineParams};
pub use pss::{mbpss_output, MbPssParams, MbPssState, PssBand};
pub use sim::{
    run_scenario, step_dynamics, Controls, DynError, DynamicConfig, DynamicModel, DynamicState, MachineModel, RunOptions,
    ScenarioFailure, Simulator, Trace,
};
