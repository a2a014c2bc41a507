//! Checks shared by the test targets of this workspace.
#![allow(dead_code)]

pub mod gradients;
pub mod oracles;
