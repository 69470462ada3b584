//! Desk-scale toolkit for binary ultrasound nodule classification:
//! multimodal LBP/DWT feature fusion, a frozen stacking ensemble of
//! expert networks, and a student network trained with the ensemble's
//! prediction as a fixed cue.
//!
//! Everything runs on the f64 reverse-mode autodiff engine in [`tensor`];
//! no GPU, no external ML framework.

pub mod dataio;
pub mod experts;
pub mod gradcam;
pub mod gradcheck;
pub mod kdl;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod texture;
