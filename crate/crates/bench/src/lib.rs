//! Criterion benchmarks for the numeric kernels live under `benches/`.
