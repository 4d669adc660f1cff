//! Criterion benchmarks for `trimodal-core`; see `benches/`.
