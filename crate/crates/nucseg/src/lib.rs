//! Files, fixtures and the command-line runner around `nucseg-core`.

pub mod config;
pub mod fixtures;
pub mod io;
pub mod masks;
pub mod run;
pub mod tensor;
pub mod trace;
