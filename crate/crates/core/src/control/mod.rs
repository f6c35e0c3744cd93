//! Reduced-order tracking MPC, its closed-loop harness, and the stabilizing
//! actuator-feedback construction.

pub mod closed_loop;
pub mod feedback;
pub mod mpc;
pub mod qp;
pub mod reference;

pub use closed_loop::{closed_loop_run, ClosedLoopConfig, ClosedLoopResult};
pub use feedback::{design_feedback, feedback_filter_response, FeedbackDesign};
pub use mpc::{linearize_reduced, mpc_step, solve_tracking_qp, MpcConfig, MpcSolution, MpcState, MpcStatus};
pub use reference::{Reference, Shape};
