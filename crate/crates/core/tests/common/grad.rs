//! Finite-difference helpers shared by the gradient suites.

use lora3d::{RandomSource, Tensor};

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-6;
pub const INSTANCES: u64 = 20;

/// `‖a − n‖₂ / ‖n‖₂`, with the norm floored to keep all-zero gradients
/// comparable.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Central differences of `loss` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let up = loss(&probe);
            probe.data_mut()[i] = orig - H;
            let down = loss(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub fn weighted_sum(y: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

pub struct ConvCase {
    pub x: Tensor<f64>,
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// Random small convolution: 1 to 3 channels each way, kernel 1, 2 or 3,
/// mixed strides and paddings.
pub fn conv_case(seed: u64) -> ConvCase {
    let mut r = RandomSource::new(seed);
    let d_in = 1 + r.below(3);
    let d_out = 1 + r.below(3);
    let k = [1, 2, 3][r.below(3)];
    let stride = [1 + r.below(2), 1 + r.below(2), 1 + r.below(2)];
    let padding = [r.below(k / 2 + 1), r.below(k / 2 + 1), r.below(k / 2 + 1)];
    let n = 1 + r.below(2);
    let ext = [k + r.below(3), k + r.below(3), k + r.below(3)];
    ConvCase {
        x: Tensor::randn([n, d_in, ext[0], ext[1], ext[2]], &mut r, 0.0, 1.0).unwrap(),
        weight: Tensor::randn([d_out, d_in, k, k, k], &mut r, 0.0, 0.5).unwrap(),
        bias: Tensor::randn([d_out], &mut r, 0.0, 0.5).unwrap(),
        stride,
        padding,
    }
}
