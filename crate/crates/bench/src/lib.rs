//! Criterion benchmarks for the hot paths: scheduler iterations, the
//! closed-loop simulator, metric aggregation and the frame codec.
//! Run with `cargo bench -p gatewise-bench`.
