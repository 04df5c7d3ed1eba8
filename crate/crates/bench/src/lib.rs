//! Fixtures shared by the kernel benchmarks.

use rlfat_core::{Model, ModelSpec, Tensor};

/// Desk MNIST-shaped model and a batch of mid-gray inputs.
pub fn mnist_fixture(batch: usize) -> (Model<f32>, Tensor<f32>, Vec<usize>) {
    let model = Model::build(ModelSpec::desk([1, 28, 28], 10, 0)).expect("desk spec is valid");
    let x = Tensor::from_fn(&[batch, 1, 28, 28], |i| ((i * 37) % 256) as f32 / 255.0);
    let labels = (0..batch).map(|i| i % 10).collect();
    (model, x, labels)
}
