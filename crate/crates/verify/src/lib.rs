//! Holds the `acceptance` test target; run it with
//! `cargo test -p rscope-verify --test acceptance -- --test-threads 1`.
