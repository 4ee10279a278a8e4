// SPDX-License-Identifier: Apache-2.0

//! Criterion benchmarks for the core kernels. See `benches/`.
