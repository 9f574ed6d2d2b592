//! Learn point-to-point skills from demonstrations as kernelized movement
//! primitives and adapt them through validated tool calls issued by a
//! language model.

pub mod eval;
pub mod fixture;
pub mod gmm;
pub mod io;
pub mod kmp;
pub mod llm;
pub mod registry;
pub mod session;
pub mod tools;
pub mod trajectory;
