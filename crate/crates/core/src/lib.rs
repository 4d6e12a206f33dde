//! Reasoning-guided vision-language-action pipeline at desk scale.
//!
//! The crate covers the whole loop: a kinematic tabletop simulator that
//! produces demonstrations, an annotator that turns them into three
//! reasoning formats, a small decoder-only backbone with learnable action
//! queries, a connector and a diffusion transformer action head, the
//! two-stage training curriculum, reasoning-guided inference and the
//! evaluation harness.

pub mod geometry;
pub mod simenv;
pub mod annotator;
pub mod model;
pub mod training;
pub mod inference;
pub mod eval;
pub mod config;
