//! The narrative guide, mirrored from `book/src/`.
//!
//! Each chapter is included as a module's documentation so that every code
//! block in the book compiles and runs under `cargo test --doc`; the book
//! cannot drift from the API. Render the browsable version with
//! `mdbook build book` from the repository root.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/smoothing.md")]
pub mod smoothing {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/set-objective.md")]
pub mod set_objective {}

#[doc = include_str!("../../../book/src/attack.md")]
pub mod attack {}

#[doc = include_str!("../../../book/src/mining.md")]
pub mod mining {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
