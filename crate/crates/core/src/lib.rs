//! Learning from sparse discrete data.
//!
//! Records store only their non-default values. The crate extracts one-way
//! and two-way counts and runs naive-Bayes EM clustering in time
//! proportional to the number of stored values, and keeps a dense-view
//! implementation of each operation alongside for comparison.

pub mod bench;
pub mod count_engine;
pub mod dtree_learner;
pub mod error;
pub mod nb_cluster;
pub mod sparse_store;

pub use error::{Error, Result};
pub use sparse_store::{DatasetView, DefaultPolicy, DenseTable, Entry, SparseDataset, SparseRecord, VariableSchema};
