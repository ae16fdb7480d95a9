//! Shared setup helpers for the criterion benches.
