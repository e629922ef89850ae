pub mod aggregator;
pub mod channel;
pub mod harness;
pub mod kinematics;
pub mod metrics;
pub mod predictor;
