//! Criterion benchmarks for the search and LSTM kernels.
