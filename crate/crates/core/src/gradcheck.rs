//! Independent oracles: central finite differences for every analytic
//! gradient, and a literal loop convolution to hold the fast one to.

use std::fmt;
use std::time::Instant;

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_im2col, BatchNorm, Conv2d, Dense, Flatten, Layer, MaxPool2d, Mode, ParamKind, Relu,
};
use crate::network::Network;
use crate::rng::SeededRng;
use crate::tensor::{conv_out_dims, Shape, Tensor};

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-12;
pub const MAX_RESAMPLES: usize = 32;

/// `g[i] = (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn numeric_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite near coordinate {i} ({up}, {down})"
            )));
        }
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Central differences of the probe loss `Σₙ ⟨rₙ, f(xₙ)⟩` where `f` returns
/// the batch outputs. Outputs are differenced before they are weighted, so
/// the many terms an element barely moves cancel exactly instead of adding
/// rounding noise to the loss.
fn probe_gradient(
    mut f: impl FnMut(&Tensor) -> Result<Vec<Tensor>>,
    x: &Tensor,
    probes: &[Tensor],
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let mut sum = 0.0;
        for ((u, d), r) in up.iter().zip(&down).zip(probes) {
            for ((&a, &b), &w) in u.data().iter().zip(d.data()).zip(r.data()) {
                sum += w * (a - b);
            }
        }
        if !sum.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite near coordinate {i}"
            )));
        }
        g.data_mut()[i] = sum / (2.0 * h);
    }
    Ok(g)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub threshold: f64,
    /// Finite-difference step.
    pub h: f64,
    /// Distance from a kink (ReLU zero, pooling tie, flat batch) that counts
    /// as degenerate.
    pub margin: f64,
    pub batch: usize,
    /// Resample degenerate inputs; when off, degeneracy is reported instead.
    pub exclude_degenerate: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            threshold: 1e-5,
            h: 1e-5,
            margin: 1e-3,
            batch: 4,
            exclude_degenerate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// The sampled point sits on a kink; the comparison is not meaningful.
    Degenerate,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "FAIL",
            Verdict::Degenerate => "degenerate",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub subject: String,
    pub blocks: Vec<BlockError>,
    pub max_rel: f64,
    pub max_abs: f64,
    pub threshold: f64,
    /// `max_rel < threshold`.
    pub passed: bool,
    pub degenerate: Option<String>,
    pub probe: String,
    pub resamples: usize,
}

impl CheckReport {
    pub fn verdict(&self) -> Verdict {
        match (&self.degenerate, self.passed) {
            (Some(_), _) => Verdict::Degenerate,
            (None, true) => Verdict::Pass,
            (None, false) => Verdict::Fail,
        }
    }

    pub fn worst_block(&self) -> Option<&BlockError> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} (max rel {:.3e}, max abs {:.3e}, threshold {:.1e})",
            self.subject,
            self.verdict(),
            self.max_rel,
            self.max_abs,
            self.threshold
        )?;
        if let Some(why) = &self.degenerate {
            writeln!(f, "  degenerate: {why}")?;
        }
        for b in &self.blocks {
            writeln!(
                f,
                "  {:<28} rel {:.3e}  abs {:.3e}  ({} values)",
                b.name, b.max_rel, b.max_abs, b.len
            )?;
        }
        write!(f, "  probe: {}", self.probe)
    }
}

fn kind_name(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
        ParamKind::Scale => "gamma",
        ParamKind::Shift => "beta",
    }
}

fn compare(name: String, analytic: &Tensor, numeric: &Tensor) -> Result<BlockError> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Shape(format!(
            "{name}: analytic gradient {} vs numeric {}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        max_rel = max_rel.max(relative_error(a, n));
        max_abs = max_abs.max((a - n).abs());
    }
    Ok(BlockError {
        name,
        max_rel,
        max_abs,
        len: analytic.numel(),
    })
}

fn network_degeneracy(net: &Network, margin: f64) -> Option<String> {
    net.layers.iter().enumerate().find_map(|(i, l)| {
        l.degeneracy(margin)
            .map(|why| format!("layer {i} ({}): {why}", l.name()))
    })
}

/// Compare analytic and numeric gradients of the probe loss at fixed inputs
/// and probe tensors. The gradient with respect to every input and every
/// parameter block is checked.
pub fn check_network_at(
    net: &Network,
    inputs: &[Tensor],
    probes: &[Tensor],
    opts: &CheckOptions,
    subject: &str,
) -> Result<CheckReport> {
    if inputs.len() != probes.len() {
        return Err(Error::Shape(format!(
            "{} inputs vs {} probes",
            inputs.len(),
            probes.len()
        )));
    }
    let mut work = net.clone();
    work.forward_batch(inputs, Mode::Train)?;
    let degenerate = network_degeneracy(&work, opts.margin);
    if let (Some(why), true) = (&degenerate, opts.exclude_degenerate) {
        return Err(Error::Check(format!(
            "{subject}: sampled point is degenerate: {why}"
        )));
    }
    let (d_inputs, per_example) = work.backward_batch_with_input(probes)?;

    let mut blocks = Vec::new();
    for (n, analytic) in d_inputs.iter().enumerate() {
        let numeric = probe_gradient(
            |x| {
                let mut batch = inputs.to_vec();
                batch[n] = x.clone();
                net.clone().forward_batch(&batch, Mode::Train)
            },
            &inputs[n],
            probes,
            opts.h,
        )?;
        blocks.push(compare(format!("input[{n}]"), analytic, &numeric)?);
    }
    for (li, layer) in net.layers.iter().enumerate() {
        for (pi, (param, &kind)) in layer
            .params()
            .into_iter()
            .zip(layer.param_kinds())
            .enumerate()
        {
            let mut analytic = Tensor::zeros(param.shape());
            for g in &per_example {
                analytic.add_assign(&g.0[li][pi])?;
            }
            let numeric = probe_gradient(
                |p| {
                    let mut perturbed = net.clone();
                    *perturbed.layers[li].params_mut()[pi] = p.clone();
                    perturbed.forward_batch(inputs, Mode::Train)
                },
                param,
                probes,
                opts.h,
            )?;
            blocks.push(compare(
                format!("layer {li} {} {}", layer.name(), kind_name(kind)),
                &analytic,
                &numeric,
            )?);
        }
    }
    let max_rel = blocks.iter().map(|b| b.max_rel).fold(0.0, f64::max);
    let max_abs = blocks.iter().map(|b| b.max_abs).fold(0.0, f64::max);
    Ok(CheckReport {
        subject: subject.to_string(),
        blocks,
        max_rel,
        max_abs,
        threshold: opts.threshold,
        passed: max_rel < opts.threshold,
        degenerate,
        probe: format!(
            "L = Σₙ⟨rₙ, f(xₙ)⟩, rₙ ~ N(0,1), batch {}, train mode, central differences h = {:e}",
            inputs.len(),
            opts.h
        ),
        resamples: 0,
    })
}

/// Check a whole network on random N(0,1) inputs, resampling up to
/// [`MAX_RESAMPLES`] times while the inputs land on a kink.
pub fn check_network(
    net: &Network,
    rng: &mut SeededRng,
    opts: &CheckOptions,
    subject: &str,
) -> Result<CheckReport> {
    if opts.batch == 0 {
        return Err(Error::Config(
            "gradient check needs a batch of at least 1".into(),
        ));
    }
    let out_shape = net.output_shape().clone();
    let mut last = String::new();
    for attempt in 0..=MAX_RESAMPLES {
        let inputs: Vec<Tensor> = (0..opts.batch)
            .map(|_| Tensor::randn(net.input_shape(), 1.0, rng))
            .collect();
        let probes: Vec<Tensor> = (0..opts.batch)
            .map(|_| Tensor::randn(&out_shape, 1.0, rng))
            .collect();
        match check_network_at(net, &inputs, &probes, opts, subject) {
            Ok(mut report) => {
                report.resamples = attempt;
                return Ok(report);
            }
            Err(Error::Check(why)) if opts.exclude_degenerate => last = why,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Check(format!(
        "{subject}: still degenerate after {MAX_RESAMPLES} resamples; last: {last}"
    )))
}

/// Check one layer at random N(0,1) parameters and inputs of `input_shape`.
pub fn check_layer(
    layer: &Layer,
    input_shape: &Shape,
    rng: &mut SeededRng,
    opts: &CheckOptions,
) -> Result<CheckReport> {
    let mut layer = layer.clone();
    layer.clear_cache();
    for p in layer.params_mut() {
        *p = Tensor::randn(p.shape(), 1.0, rng);
    }
    let subject = format!("{} on {input_shape}", layer.name());
    let net = Network::from_layers(vec![layer], input_shape.clone())?;
    check_network(&net, rng, opts, &subject)
}

#[allow(clippy::large_enum_variant)]
pub enum CaseSubject {
    Layer(Layer),
    Network(ArchSpec),
}

/// One entry of the standard gradient suite.
pub struct CheckCase {
    pub name: String,
    /// Layer family used for filtering: dense, relu, conv, pool, bn,
    /// flatten, composite.
    pub family: &'static str,
    pub subject: CaseSubject,
    pub input: Shape,
    /// Batch size overriding [`CheckOptions::batch`].
    pub batch: Option<usize>,
}

/// Composite network of the standard suite.
/// A bias feeding batch normalization directly has an identically zero
/// gradient, which no relative-error test can score, so ReLU sits between.
pub const COMPOSITE_ARCH: &str = "conv(f=3,k=3) relu bn pool(f=2,s=2) flatten dense(3)";

pub const CHECK_FAMILIES: &[&str] = &[
    "dense",
    "relu",
    "conv",
    "pool",
    "bn",
    "flatten",
    "composite",
];

/// Every layer type (convolution in three stride/padding variants) and one
/// six-layer composite.
pub fn standard_cases() -> Result<Vec<CheckCase>> {
    let shape = |d: &[usize]| Shape::new(d);
    let layer = |name: &str, family, l: Layer, input: Shape| CheckCase {
        name: name.to_string(),
        family,
        subject: CaseSubject::Layer(l),
        input,
        batch: None,
    };
    Ok(vec![
        layer(
            "dense 3→2",
            "dense",
            Layer::Dense(Dense::zeros(3, 2)?),
            shape(&[3])?,
        ),
        layer(
            "dense 12→5",
            "dense",
            Layer::Dense(Dense::zeros(12, 5)?),
            shape(&[12])?,
        ),
        layer("relu", "relu", Layer::Relu(Relu::new()), shape(&[4, 3, 2])?),
        layer(
            "conv f3 k2 s1 p0",
            "conv",
            Layer::Conv2d(Conv2d::zeros(3, 2, 2, 1, 0)?),
            shape(&[6, 6, 2])?,
        ),
        layer(
            "conv f3 k3 s2 p0",
            "conv",
            Layer::Conv2d(Conv2d::zeros(3, 2, 3, 2, 0)?),
            shape(&[7, 7, 2])?,
        ),
        layer(
            "conv f3 k2 s1 p1",
            "conv",
            Layer::Conv2d(Conv2d::zeros(3, 2, 2, 1, 1)?),
            shape(&[5, 5, 2])?,
        ),
        layer(
            "pool f2 s2",
            "pool",
            Layer::MaxPool2d(MaxPool2d::new(2, 2, 0)?),
            shape(&[6, 6, 2])?,
        ),
        layer(
            "pool f3 s2 p1",
            "pool",
            Layer::MaxPool2d(MaxPool2d::new(3, 2, 1)?),
            shape(&[5, 5, 1])?,
        ),
        layer(
            "bn 6",
            "bn",
            Layer::BatchNorm(BatchNorm::new(6)?),
            shape(&[6])?,
        ),
        layer(
            "bn 2x2x3",
            "bn",
            Layer::BatchNorm(BatchNorm::new(12)?),
            shape(&[2, 2, 3])?,
        ),
        layer(
            "flatten",
            "flatten",
            Layer::Flatten(Flatten::new()),
            shape(&[3, 3, 2])?,
        ),
        CheckCase {
            name: COMPOSITE_ARCH.to_string(),
            family: "composite",
            subject: CaseSubject::Network(COMPOSITE_ARCH.parse()?),
            input: shape(&[6, 6, 2])?,
            // ReLU zeros ahead of batch norm make small batches flat too often.
            batch: Some(16),
        },
    ])
}

/// Run one case. Layers get N(0,1) parameters; networks get Kaiming weights
/// with N(0, 0.1²) biases (large negative biases would kill whole channels).
pub fn run_case(case: &CheckCase, rng: &mut SeededRng, opts: &CheckOptions) -> Result<CheckReport> {
    let opts = &CheckOptions {
        batch: case.batch.unwrap_or(opts.batch),
        ..*opts
    };
    let mut report = match &case.subject {
        CaseSubject::Layer(l) => check_layer(l, &case.input, rng, opts)?,
        CaseSubject::Network(arch) => {
            let mut net = Network::build(arch, &case.input, rng)?;
            for layer in &mut net.layers {
                let kinds = layer.param_kinds();
                for (p, kind) in layer.params_mut().into_iter().zip(kinds) {
                    if *kind == ParamKind::Bias {
                        *p = Tensor::randn(p.shape(), 0.1, rng);
                    }
                }
            }
            check_network(&net, rng, opts, &case.name)?
        }
    };
    report.subject = case.name.clone();
    Ok(report)
}

/// Run the standard cases whose family matches `family` (all when `None`).
/// Case `i` draws from stream `i` of `seed`, so a filtered run reproduces
/// the corresponding rows of a full run.
pub fn run_suite(seed: u64, family: Option<&str>, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    if let Some(f) = family {
        if !CHECK_FAMILIES.contains(&f) {
            return Err(Error::Config(format!(
                "unknown layer family {f:?}; expected one of {}",
                CHECK_FAMILIES.join(", ")
            )));
        }
    }
    standard_cases()?
        .iter()
        .enumerate()
        .filter(|(_, c)| family.is_none_or(|f| c.family == f))
        .map(|(i, c)| run_case(c, &mut SeededRng::derive(seed, i as u64), opts))
        .collect()
}

/// Convolution as the literal nested sum
/// `z[i,j,k] = b[k] + Σₘ Σₙ Σ_c x[i·s+m−p, j·s+n−p, c] · K[m,n,c,k]`,
/// with out-of-range input cells read as zero.
pub fn naive_conv(
    x: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [h, w, c] = *x.dims() else {
        return Err(Error::Shape(format!(
            "conv expects {{h,w,c}} input, got {}",
            x.shape()
        )));
    };
    let [f, f2, kc, k] = *kernels.dims() else {
        return Err(Error::Shape(format!(
            "kernels must be {{f,f,c,k}}, got {}",
            kernels.shape()
        )));
    };
    if f != f2 || kc != c || bias.dims() != [k] {
        return Err(Error::Shape(format!(
            "conv: input {}, kernels {}, bias {} do not agree",
            x.shape(),
            kernels.shape(),
            bias.shape()
        )));
    }
    let out_shape = conv_out_dims(h, w, f, k, stride, padding)?;
    let [ho, wo, _] = *out_shape.dims() else {
        unreachable!()
    };
    let (xd, kd, bd) = (x.data(), kernels.data(), bias.data());
    let mut out = vec![0.0; ho * wo * k];
    for i in 0..ho {
        for j in 0..wo {
            for kk in 0..k {
                let mut acc = bd[kk];
                for m in 0..f {
                    for n in 0..f {
                        for ch in 0..c {
                            let r = (i * stride + m) as isize - padding as isize;
                            let q = (j * stride + n) as isize - padding as isize;
                            if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                continue;
                            }
                            let xv = xd[(r as usize * w + q as usize) * c + ch];
                            acc += xv * kd[((m * f + n) * c + ch) * k + kk];
                        }
                    }
                }
                out[(i * wo + j) * k + kk] = acc;
            }
        }
    }
    Tensor::from_shape_vec(out_shape, out)
}

/// One convolution problem: input `{h,w,c}`, `k` kernels of `f×f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub const fn new(h: usize, w: usize, c: usize, f: usize, k: usize) -> Self {
        ConvShape {
            h,
            w,
            c,
            f,
            k,
            stride: 1,
            padding: 0,
        }
    }

    /// Random input, kernels and bias for this shape.
    pub fn sample(&self, rng: &mut SeededRng) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((
            Tensor::randn(&Shape::new(&[self.h, self.w, self.c])?, 1.0, rng),
            Tensor::randn(&Shape::new(&[self.f, self.f, self.c, self.k])?, 1.0, rng),
            Tensor::randn(&Shape::new(&[self.k])?, 1.0, rng),
        ))
    }
}

impl fmt::Display for ConvShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} k{}x{}x{}x{} s{} p{}",
            self.h, self.w, self.c, self.f, self.f, self.c, self.k, self.stride, self.padding
        )
    }
}

/// Both convolution layers of the reference architecture on a 200×200 image,
/// plus a small multi-channel case.
pub fn default_bench_shapes() -> Vec<ConvShape> {
    vec![
        ConvShape::new(200, 200, 1, 5, 8),
        ConvShape::new(98, 98, 8, 5, 16),
        ConvShape::new(32, 32, 3, 3, 16),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub shape: String,
    pub implementation: &'static str,
    pub ns_per_call: f64,
}

pub const BENCH_CSV_HEADER: &str = "shape,impl,ns_per_call";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.0}",
            self.shape, self.implementation, self.ns_per_call
        )
    }
}

fn time_per_call(reps: usize, mut call: impl FnMut() -> Result<Tensor>) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(call()?);
    }
    Ok(start.elapsed().as_nanos() as f64 / reps as f64)
}

/// Time the naive and im2col convolutions on each shape. Each shape is first
/// checked for equivalence (max |diff| < 1e-12); a mismatch aborts.
pub fn bench_conv(shapes: &[ConvShape], reps: usize, rng: &mut SeededRng) -> Result<Vec<BenchRow>> {
    if reps == 0 {
        return Err(Error::Config("bench needs at least one repetition".into()));
    }
    let mut rows = Vec::with_capacity(2 * shapes.len());
    for shape in shapes {
        let (x, kernels, bias) = shape.sample(rng)?;
        let (s, p) = (shape.stride, shape.padding);
        let diff = naive_conv(&x, &kernels, &bias, s, p)?
            .max_abs_diff(&conv2d_im2col(&x, &kernels, &bias, s, p)?)?;
        if diff.is_nan() || diff >= 1e-12 {
            return Err(Error::Check(format!(
                "{shape}: im2col and naive convolution differ by {diff:e}"
            )));
        }
        rows.push(BenchRow {
            shape: shape.to_string(),
            implementation: "naive",
            ns_per_call: time_per_call(reps, || naive_conv(&x, &kernels, &bias, s, p))?,
        });
        rows.push(BenchRow {
            shape: shape.to_string(),
            implementation: "im2col",
            ns_per_call: time_per_call(reps, || conv2d_im2col(&x, &kernels, &bias, s, p))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_squares(x: &Tensor) -> Result<f64> {
        Ok(x.sum_squares())
    }

    #[test]
    fn numeric_gradient_of_sum_of_squares() {
        let x = Tensor::vector(&[1.0, 2.0]).unwrap();
        let g = numeric_gradient(sum_squares, &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let g = numeric_gradient(|_| Ok(3.5), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn numeric_gradient_errors() {
        let x = Tensor::vector(&[1.0]).unwrap();
        assert!(matches!(
            numeric_gradient(sum_squares, &x, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            numeric_gradient(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn central_difference_error_is_second_order() {
        // f = Σ x³: exact gradient 3x², central-difference error exactly h².
        let x = Tensor::vector(&[0.7, -1.3, 2.1]).unwrap();
        let cube = |t: &Tensor| Ok(t.data().iter().map(|v| v * v * v).sum::<f64>());
        let exact = x.map(|v| 3.0 * v * v);
        let err = |h: f64| {
            numeric_gradient(cube, &x, h)
                .unwrap()
                .max_abs_diff(&exact)
                .unwrap()
        };
        let mut h = 1e-2;
        while h > 1.5e-3 {
            let ratio = err(h) / err(h / 2.0);
            assert!((ratio - 4.0).abs() < 0.05, "h={h}: ratio {ratio}");
            h /= 2.0;
        }
    }

    #[test]
    fn numeric_gradient_matches_a_quadratic_loss() {
        // J(W) = ½‖Wx − y‖² has gradient (Wx − y)xᵀ.
        let x = Tensor::vector(&[0.5, -1.0, 2.0]).unwrap();
        let y = Tensor::vector(&[1.0, 0.0]).unwrap();
        let w = Tensor::matrix(&[&[0.1, 0.2, 0.3], &[-0.4, 0.5, 0.6]]).unwrap();
        let loss = |w: &Tensor| {
            let r = w.matmul(&x.reshape(&[3, 1])?)?.reshape(&[2])?.sub(&y)?;
            Ok(0.5 * r.sum_squares())
        };
        let r = w
            .matmul(&x.reshape(&[3, 1]).unwrap())
            .unwrap()
            .reshape(&[2])
            .unwrap()
            .sub(&y)
            .unwrap();
        let exact = Tensor::outer(&r, &x).unwrap();
        let numeric = numeric_gradient(loss, &w, 1e-5).unwrap();
        assert!(numeric.max_abs_diff(&exact).unwrap() < 1e-9);
    }

    #[test]
    fn dense_and_conv_pass() {
        let mut rng = SeededRng::new(11);
        let opts = CheckOptions::default();
        let dense = Layer::Dense(Dense::zeros(3, 2).unwrap());
        let r = check_layer(&dense, &Shape::new(&[3]).unwrap(), &mut rng, &opts).unwrap();
        assert_eq!(r.verdict(), Verdict::Pass, "{r}");
        let conv = Layer::Conv2d(Conv2d::zeros(3, 2, 2, 1, 0).unwrap());
        let r = check_layer(&conv, &Shape::new(&[6, 6, 2]).unwrap(), &mut rng, &opts).unwrap();
        assert_eq!(r.verdict(), Verdict::Pass, "{r}");
        assert_eq!(r.blocks.len(), opts.batch + 2);
    }

    #[test]
    fn injected_tie_is_reported_as_degenerate() {
        let pool = Layer::MaxPool2d(MaxPool2d::new(2, 2, 0).unwrap());
        let net = Network::from_layers(vec![pool], Shape::new(&[2, 2, 1]).unwrap()).unwrap();
        let x = Tensor::from_vec(&[2, 2, 1], vec![0.5, 0.5, -1.0, 0.2]).unwrap();
        let r = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let opts = CheckOptions {
            exclude_degenerate: false,
            ..CheckOptions::default()
        };
        let report = check_network_at(
            &net,
            std::slice::from_ref(&x),
            std::slice::from_ref(&r),
            &opts,
            "tied pool",
        )
        .unwrap();
        assert_eq!(report.verdict(), Verdict::Degenerate);
        assert!(report.degenerate.as_deref().unwrap().contains("tie"));
        let strict = CheckOptions::default();
        assert!(matches!(
            check_network_at(&net, &[x], &[r], &strict, "tied pool"),
            Err(Error::Check(_))
        ));
    }

    #[test]
    fn impossible_threshold_fails_cleanly() {
        let dense = Layer::Dense(Dense::zeros(4, 3).unwrap());
        let opts = CheckOptions {
            threshold: 1e-14,
            ..CheckOptions::default()
        };
        let r = check_layer(
            &dense,
            &Shape::new(&[4]).unwrap(),
            &mut SeededRng::new(2),
            &opts,
        )
        .unwrap();
        assert_eq!(r.verdict(), Verdict::Fail);
        assert!(r.worst_block().is_some());
    }

    #[test]
    fn filtered_suite_is_reproducible() {
        let opts = CheckOptions::default();
        let a = run_suite(3, Some("conv"), &opts).unwrap();
        let b = run_suite(3, Some("conv"), &opts).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        let full = run_suite(3, None, &opts).unwrap();
        assert_eq!(full[3..6], a[..]);
        assert!(
            full.iter().all(|r| r.verdict() == Verdict::Pass),
            "{}",
            full.iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join("\n")
        );
        assert!(matches!(
            run_suite(3, Some("lstm"), &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn naive_conv_examples() {
        let x = Tensor::filled(&Shape::new(&[3, 3, 1]).unwrap(), 1.0);
        let k = Tensor::filled(&Shape::new(&[2, 2, 1, 1]).unwrap(), 1.0);
        let b = Tensor::zeros(&Shape::new(&[1]).unwrap());
        let z = naive_conv(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(z.dims(), [2, 2, 1]);
        assert!(z.data().iter().all(|&v| v == 4.0));

        let mut rng = SeededRng::new(8);
        let x = Tensor::randn(&Shape::new(&[4, 5, 3]).unwrap(), 1.0, &mut rng);
        let mut id = Tensor::zeros(&Shape::new(&[1, 1, 3, 3]).unwrap());
        for c in 0..3 {
            id.set(&[0, 0, c, c], 1.0).unwrap();
        }
        let z = naive_conv(&x, &id, &Tensor::zeros(&Shape::new(&[3]).unwrap()), 1, 0).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn naive_matches_im2col_bit_for_bit() {
        let mut rng = SeededRng::new(21);
        let shape = ConvShape::new(5, 5, 3, 3, 2);
        let (x, k, b) = shape.sample(&mut rng).unwrap();
        let naive = naive_conv(&x, &k, &b, 1, 0).unwrap();
        let fast = conv2d_im2col(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(naive.max_abs_diff(&fast).unwrap(), 0.0);
    }

    #[test]
    fn bench_minimal_run() {
        let shapes = [
            ConvShape::new(8, 8, 2, 3, 4),
            ConvShape {
                stride: 2,
                padding: 1,
                ..ConvShape::new(9, 7, 1, 3, 2)
            },
        ];
        let rows = bench_conv(&shapes, 1, &mut SeededRng::new(0)).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.ns_per_call > 0.0));
        assert_eq!(rows[0].csv().split(',').count(), 3);
        assert!(default_bench_shapes().contains(&ConvShape::new(200, 200, 1, 5, 8)));
        assert!(bench_conv(&shapes, 0, &mut SeededRng::new(0)).is_err());
    }
}
