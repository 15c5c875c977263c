//! Acceptance checks for `telegraph-core`, run by `cargo test`.
//!
//! The suite lives in `tests/acceptance.rs` and prints one PASS or FAIL line
//! per criterion. `cargo test -p telegraph-validation --test acceptance`
//! runs it alone.
