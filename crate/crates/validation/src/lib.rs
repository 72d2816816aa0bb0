//! Home of the `acceptance` test target, which checks the exit criteria
//! against the `ggograde` crate.
