//! Microbenchmarks live under benches/; see the workspace README.
