use rand::Rng;

use super::layers::LinearLayer;
use crate::autodiff::Tensor;
use crate::rng::normal;

/// Samples `N(0, 2 / fan_in)` where `fan_in` is the product of all but the
/// last dimension.
pub fn kaiming_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    assert!(fan_in >= 1, "kaiming_init needs fan_in >= 1, got shape {shape:?}");
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Hyperfan-in initialisation for a hypernetwork output layer that emits the
/// flattened weights of a primary layer with fan-in `target_fan_in`.
///
/// With head inputs of unit second moment (a Kaiming-initialised ReLU trunk
/// fed unit-variance embeddings), each generated weight then has variance
/// `1 / target_fan_in`, and a primary layer using those weights keeps the
/// variance of its input. The head bias starts at zero.
pub fn hyperfan_init(layer: &mut LinearLayer, target_fan_in: usize, rng: &mut impl Rng) {
    let head_in = layer.in_size();
    let std = (1.0 / (target_fan_in * head_in) as f64).sqrt();
    for w in layer.weight.data_mut() {
        *w = std * normal(rng);
    }
    layer.bias.data_mut().fill(0.0);
}

/// Sets weight and bias to zero, so the layer emits exactly zero.
pub fn zero_init(layer: &mut LinearLayer) {
    layer.weight.data_mut().fill(0.0);
    layer.bias.data_mut().fill(0.0);
}
