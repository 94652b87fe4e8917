//! Power-system model, small-signal analysis, the stability-constrained OPF
//! formulation and a time-domain simulator.

pub mod case;
pub mod dae;
mod data;
pub mod network;
pub mod nlp;
pub mod smallsignal;
pub mod tdsim;

pub use case::{load_case, resolve_case, save_case, CaseError, NetworkCase};
