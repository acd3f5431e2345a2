//! Compiles the guide's code blocks as doc-tests so they track the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/frame-stores.md")]
pub mod frame_stores {}
#[doc = include_str!("../../../book/src/frame-selection.md")]
pub mod frame_selection {}
#[doc = include_str!("../../../book/src/answer-loop.md")]
pub mod answer_loop {}
#[doc = include_str!("../../../book/src/agents-and-backends.md")]
pub mod agents_and_backends {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
