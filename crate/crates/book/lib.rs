//! The guide's chapters, compiled so their listings run as doc-tests.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../book/src/world.md")]
pub mod world {}

#[doc = include_str!("../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../book/src/federation.md")]
pub mod federation {}

#[doc = include_str!("../../book/src/experiments.md")]
pub mod experiments {}
