//! Expectation-maximization multiple-instance learning (EM-MIL) for
//! weakly-supervised temporal localization.
//!
//! A bag is a sequence of fixed-dimensional clip features carrying only a
//! bag-level multi-hot label. Two small scoring networks are trained in
//! alternation from each other's hard pseudo-labels:
//!
//! * the assignment branch `q` estimates, per clip, whether the clip is a key
//!   instance of its bag, trained from thresholded classifier scores (E step);
//! * the classification branch `p` scores each clip per class, trained from
//!   thresholded assignment scores restricted to the bag's classes (M step).
//!
//! At inference time the two score maps are fused, thresholded and grouped into
//! temporal proposals, which [`evaluation`] scores with mAP at tIoU thresholds.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod mil;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
