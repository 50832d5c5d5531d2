//! Criterion benchmarks for the restitch core live under `benches/`.
