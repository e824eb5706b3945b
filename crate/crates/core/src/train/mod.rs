//! Training: loss, optimizer, schedule, gradient checking, and the loop.

pub mod gradcheck;
pub mod loss;
pub mod optim;

pub use gradcheck::{grad_check, GradReport};
pub use loss::{label_smoothed_ce, LossOut};
pub use optim::{lr_at, AdamW};
