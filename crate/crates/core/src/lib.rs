pub mod agents;
pub mod dpp;
pub mod eval;
pub mod frame_store;
pub mod model_client;
pub mod orchestrator;
pub mod synthetic;
