//! Raw numeric kernels with hand-written adjoints. The tape ops in
//! [`crate::ops`] wrap these.

pub mod conv;
pub mod resample;
