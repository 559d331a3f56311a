//! Kaiming (He) initialization: zero biases, weights drawn from
//! `N(0, 2/fan_in)` where the second parameter is the variance.

use crate::layers::Layer;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Number of inputs feeding one unit: input width for dense layers,
/// `f·f·c` for convolution kernels. `None` for layers without weights.
pub fn fan_in(layer: &Layer) -> Option<usize> {
    match layer {
        Layer::Dense(l) => Some(l.inputs()),
        Layer::Conv2d(l) => Some(l.kernel_size() * l.kernel_size() * l.in_channels()),
        _ => None,
    }
}

/// Re-draw the weights of a dense or convolution layer; other layers are
/// left untouched.
pub fn kaiming_init(layer: &mut Layer, rng: &mut SeededRng) {
    let Some(fan) = fan_in(layer) else { return };
    let std = (2.0 / fan as f64).sqrt();
    let (weights, bias) = match layer {
        Layer::Dense(l) => (&mut l.weights, &mut l.bias),
        Layer::Conv2d(l) => (&mut l.kernels, &mut l.bias),
        _ => return,
    };
    *weights = Tensor::randn(weights.shape(), std, rng);
    *bias = Tensor::zeros(bias.shape());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2d, Dense};

    fn sample_std(data: &[f64]) -> (f64, f64) {
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn dense_statistics_and_zero_bias() {
        let mut layer = Layer::Dense(Dense::zeros(5000, 40).unwrap());
        if let Layer::Dense(l) = &mut layer {
            l.bias = Tensor::filled(l.bias.shape(), 3.0);
        }
        kaiming_init(&mut layer, &mut SeededRng::new(1));
        let Layer::Dense(l) = &layer else {
            unreachable!()
        };
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
        let (mean, std) = sample_std(l.weights.data());
        let target = (2.0f64 / 5000.0).sqrt();
        assert!(mean.abs() < 0.05 * target);
        assert!(
            (std - target).abs() < 0.05 * target,
            "std {std} vs {target}"
        );
    }

    #[test]
    fn conv_fan_in_is_kernel_volume() {
        let layer = Layer::Conv2d(Conv2d::zeros(5, 3, 8, 1, 0).unwrap());
        assert_eq!(fan_in(&layer), Some(75));
        assert_eq!(fan_in(&Layer::Relu(Default::default())), None);
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = Layer::Conv2d(Conv2d::zeros(3, 2, 4, 1, 0).unwrap());
        let mut b = a.clone();
        kaiming_init(&mut a, &mut SeededRng::new(99));
        kaiming_init(&mut b, &mut SeededRng::new(99));
        let (pa, pb) = (a.params(), b.params());
        assert!(pa[0]
            .data()
            .iter()
            .zip(pb[0].data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
