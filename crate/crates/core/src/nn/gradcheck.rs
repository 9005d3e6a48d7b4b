//! Central finite-difference checks of the analytic backward passes.
//!
//! Every check runs in `f64` on small tensors. A layer is wrapped in the
//! scalar objective `sum(R * layer(x))` for a fixed random `R`, so the
//! analytic gradient is simply the layer's backward pass fed with `R`.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{
    dropout_backward, dropout_forward, relu_backward, relu_forward, softmax_cross_entropy, BatchNorm, Conv3d, Dense,
    MaxPool3d, Mode, Padding,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding are compared absolutely.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    /// Tensor index and flat element index of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Coordinates left out because a perturbation crossed a ReLU or
    /// max-pool switch.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {} max_rel_err={:.3e} tol={:.0e} coords={}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.coordinates
        )?;
        if self.skipped > 0 {
            write!(f, " skipped={}", self.skipped)?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` against central differences of `objective` at `point`,
/// perturbing every coordinate of every tensor.
pub fn compare_with_finite_differences<F>(
    name: &str,
    point: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    opts: &GradCheckOptions,
    mut objective: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(Error::shape("gradient list does not match parameter list"));
    }
    for (p, a) in point.iter().zip(analytic) {
        p.expect_same_shape(a)?;
    }
    let mut work = point.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        coordinates: 0,
        tolerance: opts.tolerance,
        worst: None,
        skipped: 0,
    };
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + opts.step;
            let plus = objective(&work)?;
            work[t].data_mut()[i] = orig - opts.step;
            let minus = objective(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[t].data()[i], numeric, opts.denominator_floor);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}

/// Layer families covered by [`layer_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3d,
    MaxPool3d,
    BatchNorm,
    Relu,
    Dropout,
    Dense,
    SoftmaxCrossEntropy,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv3d,
        LayerKind::MaxPool3d,
        LayerKind::BatchNorm,
        LayerKind::Relu,
        LayerKind::Dropout,
        LayerKind::Dense,
        LayerKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3d => "conv3d",
            LayerKind::MaxPool3d => "maxpool3d",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Dropout => "dropout",
            LayerKind::Dense => "dense",
            LayerKind::SoftmaxCrossEntropy => "softmax_ce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        LayerKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Run the finite-difference checks for one layer family (or all of them).
pub fn layer_suite(only: Option<LayerKind>, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for kind in LayerKind::ALL {
        if only.is_some_and(|k| k != kind) {
            continue;
        }
        match kind {
            LayerKind::Conv3d => {
                reports.push(check_conv(
                    "conv3d/valid",
                    [1, 4, 5, 4, 2],
                    [3, 2, 3],
                    3,
                    Padding::Valid,
                    opts,
                )?);
                reports.push(check_conv(
                    "conv3d/same_even",
                    [2, 3, 4, 3, 2],
                    [2, 2, 2],
                    2,
                    Padding::Same,
                    opts,
                )?);
                reports.push(check_conv(
                    "conv3d/same_odd",
                    [1, 3, 3, 4, 1],
                    [3, 3, 3],
                    2,
                    Padding::Same,
                    opts,
                )?);
            }
            LayerKind::MaxPool3d => {
                reports.push(check_pool("maxpool3d/1x2x2", [2, 3, 4, 4, 2], [1, 2, 2], opts)?);
                reports.push(check_pool("maxpool3d/2x2x2", [1, 4, 5, 4, 1], [2, 2, 2], opts)?);
            }
            LayerKind::BatchNorm => {
                reports.push(check_batchnorm("batchnorm/train", Mode::Train, opts)?);
                reports.push(check_batchnorm("batchnorm/infer", Mode::Infer, opts)?);
            }
            LayerKind::Relu => reports.push(check_relu(opts)?),
            LayerKind::Dropout => reports.push(check_dropout(opts)?),
            LayerKind::Dense => reports.push(check_dense(opts)?),
            LayerKind::SoftmaxCrossEntropy => reports.push(check_softmax_ce(opts)?),
        }
    }
    Ok(reports)
}

fn check_conv(
    name: &str,
    input: [usize; 5],
    kernel: [usize; 3],
    cout: usize,
    padding: Padding,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut conv = Conv3d::<f64>::new(kernel, input[4], cout, padding, 101)?;
    conv.bias = Tensor::uniform(&[cout], -0.5, 0.5, 102)?;
    let x = Tensor::uniform(&input, -1.0, 1.0, 103)?;
    let y = conv.forward(&x)?;
    let r = Tensor::uniform(y.dims(), -1.0, 1.0, 104)?;
    let g = conv.backward(&x, &r)?;
    let point = [x, conv.kernel.clone(), conv.bias.clone()];
    compare_with_finite_differences(name, &point, &[g.input, g.kernel, g.bias], opts, |p| {
        let layer = Conv3d::from_parts(p[1].clone(), p[2].clone(), padding)?;
        Ok(weighted_sum(&layer.forward(&p[0])?, &r))
    })
}

fn check_pool(name: &str, input: [usize; 5], pool: [usize; 3], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let layer = MaxPool3d::new(pool)?;
    let x = Tensor::uniform(&input, -1.0, 1.0, 201)?;
    let out = layer.forward(&x)?;
    let r = Tensor::uniform(out.output.dims(), -1.0, 1.0, 202)?;
    let g = layer.backward(x.dims(), &out.argmax, &r)?;
    compare_with_finite_differences(name, &[x], &[g], opts, |p| {
        Ok(weighted_sum(&layer.forward(&p[0])?.output, &r))
    })
}

fn check_batchnorm(name: &str, mode: Mode, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut bn = BatchNorm::<f64>::new(3, 0.99, 1e-3)?;
    bn.gamma = Tensor::uniform(&[3], 0.5, 1.5, 301)?;
    bn.beta = Tensor::uniform(&[3], -0.5, 0.5, 302)?;
    bn.moving_mean = Tensor::uniform(&[3], -0.2, 0.2, 303)?;
    bn.moving_var = Tensor::uniform(&[3], 0.5, 2.0, 304)?;
    let x = Tensor::uniform(&[2, 2, 3, 2, 3], -2.0, 2.0, 305)?;
    let template = bn.clone();
    let (y, cache) = bn.forward(&x, mode)?;
    let r = Tensor::uniform(y.dims(), -1.0, 1.0, 306)?;
    let g = template.backward(&cache, &r)?;
    let point = [x, template.gamma.clone(), template.beta.clone()];
    compare_with_finite_differences(name, &point, &[g.input, g.gamma, g.beta], opts, |p| {
        let mut layer = template.clone();
        layer.gamma = p[1].clone();
        layer.beta = p[2].clone();
        Ok(weighted_sum(&layer.forward(&p[0], mode)?.0, &r))
    })
}

fn check_relu(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    // keep every input at least 1e-3 away from the kink
    let x = Tensor::<f64>::uniform(&[4, 5, 6], -1.0, 1.0, 401)?.map(|v| if v.abs() < 1e-3 { v + 2e-3 } else { v });
    let r = Tensor::uniform(x.dims(), -1.0, 1.0, 402)?;
    let g = relu_backward(&x, &r)?;
    compare_with_finite_differences("relu", &[x], &[g], opts, |p| Ok(weighted_sum(&relu_forward(&p[0]), &r)))
}

fn check_dropout(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let x = Tensor::<f64>::uniform(&[3, 40], -1.0, 1.0, 501)?;
    let (_, mask) = dropout_forward(&x, 0.3, Mode::Train, 502)?;
    let r = Tensor::uniform(x.dims(), -1.0, 1.0, 503)?;
    let g = dropout_backward(&mask, &r)?;
    compare_with_finite_differences("dropout", &[x], &[g], opts, |p| {
        Ok(weighted_sum(&dropout_forward(&p[0], 0.3, Mode::Train, 502)?.0, &r))
    })
}

fn check_dense(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut dense = Dense::<f64>::new(5, 4, 601)?;
    dense.bias = Tensor::uniform(&[4], -0.5, 0.5, 602)?;
    let x = Tensor::uniform(&[3, 5], -1.0, 1.0, 603)?;
    let r = Tensor::uniform(&[3, 4], -1.0, 1.0, 604)?;
    let g = dense.backward(&x, &r)?;
    let point = [x, dense.weights.clone(), dense.bias.clone()];
    compare_with_finite_differences("dense", &point, &[g.input, g.weights, g.bias], opts, |p| {
        let layer = Dense {
            weights: p[1].clone(),
            bias: p[2].clone(),
        };
        Ok(weighted_sum(&layer.forward(&p[0])?, &r))
    })
}

fn check_softmax_ce(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let logits = Tensor::<f64>::uniform(&[4, 6], -3.0, 3.0, 701)?;
    let labels = [0, 5, 2, 2];
    let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
    compare_with_finite_differences("softmax_ce", &[logits], &[grad], opts, |p| {
        Ok(softmax_cross_entropy(&p[0], &labels)?.0)
    })
}
