//! Criterion benchmarks for the hot kernels of `palgan-core`. See `benches/`.
