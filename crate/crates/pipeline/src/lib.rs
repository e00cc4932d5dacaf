//! Counterfactual clip generation: provider clients, keyframe selection,
//! action proposal and filtering, the edit loop, and the resumable
//! orchestrator that ties them together.

pub mod editloop;
pub mod generate;
pub mod judge;
pub mod keyframe;
pub mod prompts;
pub mod proposal;
pub mod providers;
pub mod store;
