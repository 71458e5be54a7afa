//! Fixtures shared by the benchmarks.

use cen_core::net::{Arch, CenModel, ModelConfig};
use cen_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Two-modality segmentation network at the default size, with a quarter
/// of each sub-part's scaling factors zeroed so exchange is active.
pub fn exchanging_model(width: usize) -> CenModel {
    let mut cfg = ModelConfig::new(2, Arch::segmentation(3, 5, 4, width));
    cfg.seed = 1;
    let mut model = CenModel::build(cfg).expect("bench model");
    for l in 0..model.depth() {
        for s in 0..2 {
            let id = model.norms[l][s].gamma;
            let part = model.plans[l].subparts[s].clone();
            for c in part.step_by(4) {
                model.params.get_mut(id).data_mut()[c] = 0.0;
            }
        }
    }
    model
}
