//! Criterion benchmarks for the varkernel core. Run with `cargo bench -p varkernel-bench`.
