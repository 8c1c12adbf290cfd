//! Workbench for population protocols with shutdown requests: define them,
//! simulate them under a randomized fair-like scheduler, exhaustively verify
//! them at bounded population sizes against specifications, and compose two
//! verified protocols into one mechanically.

pub mod composer;
pub mod format;
pub mod model;
pub mod protolib;
pub mod semantics;
pub mod specs;
pub mod verifier;
