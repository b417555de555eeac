//! Transient-stability simulation and islanding prediction for multi-machine
//! power systems.
//!
//! The pipeline: load a network case, solve the AC power flow, initialize the
//! classical machine model, simulate disturbances over the Kron-reduced
//! network with relay models injecting trips, track generator coherency
//! through synchronization coefficients aggregated into the group matrix,
//! evaluate the splitting indices, and act on the islanding signal by arming
//! out-of-step relays on the coherent-group boundary.
//!
//! All numeric modules are generic over [`scalar::Scalar`]; the aliases below
//! pin `f64`, which is what the command-line harness uses.

pub mod coherency;
pub mod dynamics;
pub mod grid;
pub mod islanding;
pub mod powerflow;
pub mod protection;
pub mod psi;
pub mod scalar;

pub use scalar::Scalar;

pub type NetworkCase64 = grid::NetworkCase<f64>;
pub type AdmittanceMatrix64 = grid::AdmittanceMatrix<f64>;
pub type ReducedNetwork64 = grid::ReducedNetwork<f64>;
// pub type PowerFlowSolution64 = powerflow::PowerFlowSolution<f64>;
// pub type DynamicInit64 = powerflow::DynamicInit<f64>;
// pub type SimConfig64 = dynamics::SimConfig<f64>;
// pub type Event64 = dynamics::Event<f64>;
// pub type SystemTrajectory64 = dynamics::SystemTrajectory<f64>;
// pub type SyncCoefficientMatrix64 = coherency::SyncCoefficientMatrix<f64>;
// pub type KsGm64 = coherency::KsGm<f64>;
// pub type PsiSample64 = psi::PsiSample<f64>;
// pub type GrowthPercent64 = psi::GrowthPercent<f64>;
// pub type Thresholds64 = psi::Thresholds<f64>;
// pub type IslandingSignal64 = psi::IslandingSignal<f64>;
// pub type IslandingPlan64 = islanding::IslandingPlan<f64>;
// pub type IslandOutcome64 = islanding::IslandOutcome<f64>;
