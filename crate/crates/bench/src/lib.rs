//! Fixtures shared by the criterion benchmarks.

use scratchcnn::data::synth_shapes;
use scratchcnn::gradcheck::ConvShape;
use scratchcnn::loss::{mse_loss, mse_output_grad};
use scratchcnn::optim::average_gradients;
use scratchcnn::train::init_network;
use scratchcnn::{ArchSpec, Mode, Network, OptConfig, Optimizer, Result, SeededRng, Tensor};

/// Convolution shapes timed by the `conv` bench.
pub fn conv_shapes() -> Vec<ConvShape> {
    scratchcnn::gradcheck::default_bench_shapes()
}

/// Input, kernels and bias for `shape`, drawn from `seed`.
pub fn conv_operands(shape: &ConvShape, seed: u64) -> (Tensor, Tensor, Tensor) {
    shape
        .sample(&mut SeededRng::new(seed))
        .expect("valid bench shape")
}

/// A network, its optimizer and one mini-batch of synthetic rectangles.
pub struct StepFixture {
    pub net: Network,
    pub opt: Optimizer,
    pub images: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl StepFixture {
    pub fn new(arch: &ArchSpec, side: usize, batch: usize, seed: u64) -> Result<Self> {
        let data = synth_shapes(batch, side, &mut SeededRng::new(seed))?;
        let net = init_network(arch, data.image_shape(), seed)?;
        let opt = Optimizer::new(OptConfig::default(), &net)?;
        Ok(StepFixture {
            net,
            opt,
            images: data.images().to_vec(),
            targets: data.targets().to_vec(),
        })
    }

    /// Forward, backward, average and update once; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let preds = self.net.forward_batch(&self.images, Mode::Train)?;
        let loss = mse_loss(&preds, &self.targets)?.value;
        let errors = preds
            .iter()
            .zip(&self.targets)
            .map(|(p, y)| mse_output_grad(p, y))
            .collect::<Result<Vec<_>>>()?;
        let grads = average_gradients(&self.net.backward_batch(&errors)?)?;
        self.opt.step(&mut self.net, &grads)?;
        Ok(loss)
    }
}
