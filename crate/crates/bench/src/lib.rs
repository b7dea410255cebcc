//! Criterion benchmarks live in `benches/`; the library target is empty.
