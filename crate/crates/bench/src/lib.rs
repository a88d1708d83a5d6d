//! Shared inputs for the benchmarks.

use depthart::data::generate_sample;
use depthart::training::{prepare_items, Item};
use depthart::var::{VarConfig, VarModel};
use depthart::vq::{VqConfig, VqModel};

/// Default-size autoencoder, transformer and a batch of prepared samples.
pub fn training_fixture(batch: usize) -> (VqModel, VarModel, Vec<Item>) {
    let vq = VqModel::new(VqConfig::default(), 0).expect("default autoencoder");
    let var = VarModel::new(VarConfig::for_vq(&vq), 0).expect("default transformer");
    let samples: Vec<_> = (0..batch as u64).map(|s| generate_sample(s).expect("sample")).collect();
    let items = prepare_items(&samples, &vq).expect("prepared items");
    (vq, var, items)
}
