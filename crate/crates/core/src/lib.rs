//! Multimodal multitask network for emotion classification and personality
//! regression from eye, pupil, facial action unit and skin conductance signals.

pub mod config;
pub mod data;
pub mod eval;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
