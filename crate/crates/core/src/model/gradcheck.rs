#![allow(clippy::needless_range_loop)]
use crate::error::Result;
use crate::model::arch::ArchConfig;
use crate::model::graph::ModelGraph;
use crate::nn::gradcheck::{relative_error, GradCheckOptions, GradCheckReport};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::tensor::Tensor;

/// Finite-difference check of the whole network, in train mode (batch
/// statistics and a fixed dropout mask), on a batch of two random inputs.
///
/// Returns one report for the parameters and one for the input. Coordinates
/// whose perturbation flips a ReLU or a pooling choice are skipped and counted.
pub fn model_gradcheck(arch: &ArchConfig, opts: &GradCheckOptions, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut model = ModelGraph::<f64>::new(arch.clone(), seed)?;
    let [d, h, w, c] = model.input_dims();
    let mut x = Tensor::<f64>::uniform(&[2, d, h, w, c], 0.0, 1.0, seed ^ 0x5eed)?;
    let labels = [0, arch.num_classes / 2];
    let dropout_seed = seed.wrapping_add(17);

    let eval = |m: &ModelGraph<f64>, x: &Tensor<f64>| -> Result<(f64, u64)> {
        let (logits, tape) = m.forward_with_tape(x, Mode::Train, dropout_seed)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        Ok((loss, tape.activation_signature()))
    };

    let (logits, tape) = model.forward_with_tape(&x, Mode::Train, dropout_seed)?;
    let (_, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
    let (param_grads, input_grad) = model.backward(&tape, &grad_logits)?;
    let signature = tape.activation_signature();

    let mut params = new_report("model/params", opts);
    let n_params = param_grads.len();
    for t in 0..n_params {
        for i in 0..param_grads[t].len() {
            let orig = model.params_mut()[t].data()[i];
            model.params_mut()[t].data_mut()[i] = orig + opts.step;
            let plus = eval(&model, &x)?;
            model.params_mut()[t].data_mut()[i] = orig - opts.step;
            let minus = eval(&model, &x)?;
            model.params_mut()[t].data_mut()[i] = orig;
            record(
                &mut params,
                opts,
                signature,
                plus,
                minus,
                param_grads[t].data()[i],
                (t, i),
            );
        }
    }

    let mut input = new_report("model/input", opts);
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + opts.step;
        let plus = eval(&model, &x)?;
        x.data_mut()[i] = orig - opts.step;
        let minus = eval(&model, &x)?;
        x.data_mut()[i] = orig;
        record(&mut input, opts, signature, plus, minus, input_grad.data()[i], (0, i));
    }
    Ok(vec![params, input])
}

fn new_report(name: &str, opts: &GradCheckOptions) -> GradCheckReport {
    GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        coordinates: 0,
        tolerance: opts.tolerance,
        worst: None,
        skipped: 0,
    }
}

fn record(
    report: &mut GradCheckReport,
    opts: &GradCheckOptions,
    signature: u64,
    plus: (f64, u64),
    minus: (f64, u64),
    analytic: f64,
    at: (usize, usize),
) {
    if plus.1 != signature || minus.1 != signature {
        report.skipped += 1;
        return;
    }
    let numeric = (plus.0 - minus.0) / (2.0 * opts.step);
    let err = relative_error(analytic, numeric, opts.denominator_floor);
    report.coordinates += 1;
    if err > report.max_rel_error || report.worst.is_none() {
        report.max_rel_error = err.max(report.max_rel_error);
        report.worst = Some(at);
    }
}
