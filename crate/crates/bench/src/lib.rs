//! Shared fixtures for the criterion benchmarks.

use fairtransfer::data::{BiasSpec, SplitSizes, TaskSplits};
use fairtransfer::harness::{load_data, DataSource, TaskSelection};

/// The transfer pair shrunk to `train` training examples, with its source.
pub fn fixture(train: usize, tasks: &TaskSelection) -> (DataSource, Vec<TaskSplits>) {
    let mut spec = BiasSpec::transfer_default();
    spec.splits = SplitSizes {
        train,
        dev: 500,
        test: 500,
    };
    let source = DataSource::Synthetic(spec);
    let data = load_data(&source, tasks).expect("fixture data loads");
    (source, data)
}
