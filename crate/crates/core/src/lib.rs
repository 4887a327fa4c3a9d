//! Speaker verification with deep time-delay embedding extractors.
//!
//! The crate covers the full path from audio to verification metrics:
//!
//! * [`frontend`]: MFCC extraction, energy VAD and sliding mean normalization.
//! * [`autodiff`]: a small reverse-mode engine with the primitives the
//!   extractors need (time-delay affine, 2x2 max pooling, PReLU, MFM,
//!   statistics pooling) and a finite-difference checker.
//! * [`models`]: the max-pooling and residual TDNN extractors.
//! * [`objectives`]: softmax cross-entropy and angular-margin softmax.
//! * [`backend`]: cosine, centering, LDA, two-covariance PLDA and CSML scoring.
//! * [`metrics`]: EER and minimum detection cost.
//! * [`pipeline`]: synthetic corpora, training, checkpoints and file formats.

pub mod autodiff;
pub mod backend;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod pipeline;

pub use error::{Error, Result};
