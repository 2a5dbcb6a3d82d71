//! Atomic and response-level calibration of LLM confidence for long-form
//! factuality.

pub mod analysis;
pub mod applications;
pub mod calibration;
pub mod corpus;
pub mod decompose;
pub mod elicit;
pub mod fusion;
pub mod gateway;
pub mod orchestrator;
pub mod prompts;
pub mod sim;
