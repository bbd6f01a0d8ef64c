//! Benchmarks for the scene completion pipeline; see `benches/`.
