pub mod barrier;
pub mod client;
pub mod clock;
pub mod des;
pub mod device;
pub mod engine;
pub mod harness;
pub mod predictor;
pub mod protocol_sim;
pub mod server;
pub mod wire;
