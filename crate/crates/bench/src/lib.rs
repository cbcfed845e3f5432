//! Criterion benchmarks for the inn-core kernels live in `benches/`.
