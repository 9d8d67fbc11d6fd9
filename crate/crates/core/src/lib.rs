//! Decentralized ergodic coverage control.
//!
//! Each agent runs a receding-horizon controller that drives the spectral
//! ergodic metric of its trajectory toward a target distribution. Agents
//! coordinate only by consensus averaging of their trajectory coefficients.

pub mod basis;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod network;
pub mod scenario;
pub mod spatial;

pub use basis::{BasisContext, BoxDomain, FourierIndexSet};
pub use dynamics::{AgentModel, CollectiveDynamics, ControlBound, Dynamics};
pub use error::{Error, Result};
pub use network::{CoefficientMessage, ConsensusMatrix};
pub use spatial::{CoefficientVector, SpatialField};
