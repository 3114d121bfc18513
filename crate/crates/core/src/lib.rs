//! Simulation of the CMS online farm at P5 running offline work: ClassAd
//! matchmaking over partitionable slots, static versus vacuum provisioning,
//! LHC-driven availability, induced defragmentation and a deterministic
//! event engine tying them together.

pub mod classad;
pub mod defrag;
pub mod lhc;
pub mod pool;
pub mod provisioning;
pub mod scenario;
pub mod sim;
pub mod slot;
pub mod telemetry;

pub use scenario::{load_scenario, Scenario, ScenarioError};
pub use sim::{run, RunOutput, SimError, Simulation};
