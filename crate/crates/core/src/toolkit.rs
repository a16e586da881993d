//! Random instance generation and the benchmark harness.
