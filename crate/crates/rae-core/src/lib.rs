//! Reversible adversarial examples.
//!
//! * [`attack`] finds an adversarial image with a query-only beam-search
//!   attack over low-frequency DCT directions ([`dctspace`]).
//! * [`rdhgi`] embeds a payload into it reversibly while leaving the
//!   grayscale plane untouched.
//! * [`pipeline`] composes the two and verifies the result.

pub mod attack;
pub mod dctspace;
pub mod imagecore;
pub mod oracle;
pub mod pipeline;
pub mod rdhgi;
pub mod seeded;
