//! Multi-sequence fusion networks for lesion segmentation, with
//! integration-level dropout, lesion-level detection metrics and saliency
//! accounting, exercised on synthetic MR phantoms.

pub mod config;
pub mod detect;
pub mod experiment;
pub mod fusenet;
pub mod grid;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod saliency;
pub mod seqdrop;
pub mod trainer;
