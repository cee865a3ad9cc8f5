//! Semi-supervised CTC training with iterative hard pseudo-labels and a
//! dynamic pseudo-label cache.

pub mod ctc;
pub mod binio;
pub mod model;
pub mod augment;
pub mod data;
pub mod cache;
pub mod optim;
pub mod eval;
pub mod trainer;
