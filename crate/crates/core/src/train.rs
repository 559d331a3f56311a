//! Mini-batch training loop.
//!
//! Each epoch shuffles the training indices into disjoint mini-batches. For
//! every batch the network runs forward in training mode, the loss error
//! `ŷ − y` is propagated back per example, the per-example gradients are
//! averaged, and one optimizer step is taken.

use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{mse_loss, mse_output_grad};
use crate::network::Network;
use crate::optim::{average_gradients, OptConfig, Optimizer};
use crate::rng::SeededRng;

/// Stream index for mini-batch shuffling, see [`SeededRng::derive`].
pub const SHUFFLE_STREAM: u64 = 1;
/// Stream index for parameter initialization.
pub const INIT_STREAM: u64 = 2;
/// Stream index for generated datasets.
pub const DATA_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: OptConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 100,
            opt: OptConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.opt.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// One-based epoch number.
    pub epoch: usize,
    /// Batch losses averaged with batch-size weights.
    pub mean_loss: f64,
    pub batch_losses: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub seconds: f64,
}

/// Partition `0..m` into `⌈m/n⌉` batches of size `n` (the last may be
/// smaller), optionally shuffling first.
pub fn make_minibatches(m: usize, n: usize, rng: &mut SeededRng, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..m).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order.chunks(n.max(1)).map(<[usize]>::to_vec).collect()
}

/// Build `arch` for `input_shape` with initialization drawn from the
/// seed's init stream.
pub fn init_network(
    arch: &crate::arch::ArchSpec,
    input_shape: &crate::tensor::Shape,
    seed: u64,
) -> Result<Network> {
    Network::build(arch, input_shape, &mut SeededRng::derive(seed, INIT_STREAM))
}

/// Train on the whole dataset.
pub fn fit(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochReport>> {
    let all: Vec<usize> = (0..data.len()).collect();
    fit_subset(net, data, &all, cfg)
}

/// Train on `data` restricted to `indices`; no other example is touched.
pub fn fit_subset(
    net: &mut Network,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::Config("cannot train on an empty set".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Config(format!("training index {bad} out of range")));
    }
    if data.image_shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "dataset images are {} but the network expects {}",
            data.image_shape(),
            net.input_shape()
        )));
    }
    if data.target_shape() != net.output_shape() {
        return Err(Error::Shape(format!(
            "dataset targets are {} but the network outputs {}",
            data.target_shape(),
            net.output_shape()
        )));
    }
    let m = indices.len();
    let n = cfg.batch_size.min(m);
    if net.has_batchnorm() && (m < 2 || m % n == 1) {
        return Err(Error::Config(format!(
            "batch normalization needs ≥2 examples per batch, but {m} examples in batches of {n} leave a batch of 1"
        )));
    }

    let mut opt = Optimizer::new(cfg.opt, net)?;
    let mut rng = SeededRng::derive(cfg.seed, SHUFFLE_STREAM);
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut batch_losses = Vec::new();
        let mut batch_sizes = Vec::new();
        for (b, batch) in make_minibatches(m, n, &mut rng, cfg.shuffle)
            .iter()
            .enumerate()
        {
            let loss = train_batch(net, &mut opt, data, batch.iter().map(|&k| indices[k]))
                .map_err(|e| e.context(format_args!("epoch {epoch}, batch {b}")))?;
            batch_losses.push(loss);
            batch_sizes.push(batch.len());
        }
        let weighted: f64 = batch_losses
            .iter()
            .zip(&batch_sizes)
            .map(|(l, &s)| l * s as f64)
            .sum();
        reports.push(EpochReport {
            epoch,
            mean_loss: weighted / m as f64,
            batch_losses,
            batch_sizes,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    net.clear_caches();
    Ok(reports)
}

fn train_batch(
    net: &mut Network,
    opt: &mut Optimizer,
    data: &Dataset,
    batch: impl Iterator<Item = usize>,
) -> Result<f64> {
    let (xs, ys): (Vec<_>, Vec<_>) = batch
        .map(|i| (data.images()[i].clone(), data.targets()[i].clone()))
        .unzip();
    let preds = net.forward_batch(&xs, Mode::Train)?;
    let loss = mse_loss(&preds, &ys)?;
    let errors = preds
        .iter()
        .zip(&ys)
        .map(|(p, y)| mse_output_grad(p, y))
        .collect::<Result<Vec<_>>>()?;
    let per_example = net.backward_batch(&errors)?;
    let grads = average_gradients(&per_example)?;
    if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient of shape {}",
            bad.shape()
        )));
    }
    opt.step(net, &grads)?;
    Ok(loss.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::layers::{Dense, Layer};
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn minibatch_sizes() {
        let mut rng = SeededRng::new(0);
        let sizes: Vec<usize> = make_minibatches(10, 3, &mut rng, true)
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(make_minibatches(7, 7, &mut rng, true).len(), 1);
        assert_eq!(
            make_minibatches(4, 2, &mut rng, false),
            vec![vec![0, 1], vec![2, 3]]
        );
    }

    #[test]
    fn minibatches_partition_the_indices() {
        let mut rng = SeededRng::new(5);
        for m in 1..40 {
            for n in 1..=m + 2 {
                let batches = make_minibatches(m, n, &mut rng, true);
                assert_eq!(batches.len(), m.div_ceil(n));
                let mut seen = vec![false; m];
                for (b, batch) in batches.iter().enumerate() {
                    if b + 1 < batches.len() {
                        assert_eq!(batch.len(), n);
                    }
                    for &i in batch {
                        assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    fn one_unit_net(w: f64, b: f64) -> Network {
        let dense = Dense::new(
            Tensor::matrix(&[&[w]]).unwrap(),
            Tensor::vector(&[b]).unwrap(),
        )
        .unwrap();
        Network::from_layers(vec![Layer::Dense(dense)], Shape::new(&[1]).unwrap()).unwrap()
    }

    #[test]
    fn single_step_by_hand() {
        // z = 0.5·2 + 0.1 = 1.1, y = 3: dJ/dz = −1.9, dW = −3.8, db = −1.9
        let mut net = one_unit_net(0.5, 0.1);
        let data = Dataset::new(
            "one",
            vec![Tensor::vector(&[2.0]).unwrap()],
            vec![Tensor::vector(&[3.0]).unwrap()],
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            opt: OptConfig::sgd(0.1),
            seed: 0,
            shuffle: true,
        };
        let reports = fit(&mut net, &data, &cfg).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].batch_losses.len(), 1);
        assert!((reports[0].mean_loss - 0.5 * 1.9 * 1.9).abs() < 1e-15);
        let p = net.params();
        assert!((p[0][0].data()[0] - (0.5 + 0.1 * 3.8)).abs() < 1e-15);
        assert!((p[0][1].data()[0] - (0.1 + 0.1 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut net = one_unit_net(1.0, 0.0);
        let data = Dataset::new(
            "d",
            vec![Tensor::vector(&[1.0]).unwrap()],
            vec![Tensor::vector(&[1.0]).unwrap()],
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(fit(&mut net, &data, &cfg), Err(Error::Config(_))));

        let mut bn_net = Network::build(
            &"bn dense(1)".parse::<ArchSpec>().unwrap(),
            &Shape::new(&[1]).unwrap(),
            &mut SeededRng::new(0),
        )
        .unwrap();
        let three = Dataset::new(
            "d",
            (0..3)
                .map(|i| Tensor::vector(&[i as f64]).unwrap())
                .collect(),
            (0..3).map(|_| Tensor::vector(&[0.0]).unwrap()).collect(),
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            fit(&mut bn_net, &three, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let data = crate::data::synth_shapes(40, 8, &mut SeededRng::new(1)).unwrap();
        let arch: ArchSpec = "conv(f=3,k=2) relu bn pool(f=2,s=2) flatten dense(2)"
            .parse()
            .unwrap();
        let run = || {
            let mut net =
                Network::build(&arch, data.image_shape(), &mut SeededRng::new(3)).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 8,
                seed: 9,
                ..TrainConfig::default()
            };
            let losses: Vec<u64> = fit(&mut net, &data, &cfg)
                .unwrap()
                .iter()
                .map(|r| r.mean_loss.to_bits())
                .collect();
            let params: Vec<u64> = net
                .params()
                .iter()
                .flatten()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect();
            (losses, params)
        };
        assert_eq!(run(), run());
    }
}
