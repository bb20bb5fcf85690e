//! Criterion benchmarks for the convolution, CTC and training-step kernels.
//! Run them with `cargo bench -p ctcmix-bench`.
