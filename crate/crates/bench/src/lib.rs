//! Criterion benchmarks for pivsem live in `benches/`.
