//! Criterion benchmarks for the dpsyn hot paths; see `benches/`.
