//! Library side of the `tiue` binary: checkpoint persistence and the
//! strict run configuration. The command implementations live in the
//! binary; integration tests drive both this API and the executable.

pub mod checkpoint;
pub mod config;
