//! Criterion benchmarks for the simulation, archive and surrogate hot paths.
//! Run with `cargo bench -p dsage-bench`.
