//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};

use comoe_core::adapters::{MoeLayerConfig, MoeLoraLayer};
use comoe_core::autograd::Tensor;
use comoe_core::SeededRng;

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).expect("valid shape")
}

/// A default-sized adapted layer with nonzero `B`, so experts differ.
pub fn layer(d: usize, seed: u64) -> MoeLoraLayer {
    let mut rng = SeededRng::seed_from_u64(seed);
    let w0 = random_tensor(&mut rng, &[d, d]);
    let mut layer = MoeLoraLayer::init(w0, &MoeLayerConfig::default(), &mut rng).expect("valid config");
    for e in layer.experts_mut() {
        let [_, b] = e.parameters_mut();
        let shape = b.shape().to_vec();
        *b = Tensor::parameter(random_tensor(&mut rng, &shape).data().to_vec(), &shape).expect("valid shape");
    }
    layer
}
